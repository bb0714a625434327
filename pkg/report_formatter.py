"""
Output artifacts of a sweep: the result CSV, per-example certificate CSVs,
accuracy-vs-epsilon SVG charts, and PGM images of clean/adversarial pairs.
"""

import logging
import math
import os
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator

from attacks import AttackConfig, adversarial_examples
from certificates import CertificateRecord, ThreatModel
from datasets import LabeledDataset
from errors import ParameterError
from heads import AnyHead
from projection import ProjectionModel

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["dataset", "projection", "r", "head", "attack", "norm", "epsilon", "accuracy", "n", "seed"]
CERTIFICATE_COLUMNS = ["index", "clean_pred", "label", "margin", "dual_norm", "radius", "norm_p"]
ERROR_MARKER = "error"

# chart layout, in SVG user units
PANEL_WIDTH = 360
PANEL_HEIGHT = 260
MARGIN_LEFT = 50
MARGIN_RIGHT = 15
MARGIN_TOP = 30
MARGIN_BOTTOM = 40
PANEL_COLUMNS = 2
LEGEND_HEIGHT = 40
PALETTE = ["#440154", "#3b528b", "#21918c", "#5ec962", "#fde725", "#e8590c", "#c2255c", "#5f3dc4"]
DASH = "6,4"
MARKER_RADIUS = 2.5


class ResultRow(BaseModel):
    """One cell of the sweep table; accuracy is None when the cell failed."""
    dataset: str
    projection: str
    r: int
    head: str
    attack: str
    norm: str
    epsilon: float = Field(ge=0.0)
    accuracy: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    n: int = Field(ge=0)
    seed: int

    @field_validator("norm")
    @classmethod
    def _norm(cls, v):
        if v not in ("linf", "l2", "none"):
            raise ValueError(f"norm must be linf, l2 or none, got {v!r}")
        return v

    def sort_key(self) -> Tuple:
        return (self.dataset, self.projection, self.r, self.head, self.attack, self.norm, self.epsilon)


def format_epsilon(eps: float) -> str:
    return format(eps, ".6g")


def rows_to_frame(rows: Iterable[ResultRow]) -> pd.DataFrame:
    """Rows in sorted-key order, formatted for CSV output."""
    ordered = sorted(rows, key=lambda row: row.sort_key())
    records = []
    for row in ordered:
        rec = row.model_dump()
        rec["epsilon"] = format_epsilon(row.epsilon)
        rec["accuracy"] = ERROR_MARKER if row.accuracy is None else f"{row.accuracy:.6f}"
        records.append(rec)
    return pd.DataFrame.from_records(records, columns=RESULT_COLUMNS)


def frame_to_rows(frame: pd.DataFrame) -> List[ResultRow]:
    rows = []
    for rec in frame.to_dict(orient="records"):
        acc = str(rec["accuracy"])
        rec["accuracy"] = None if acc == ERROR_MARKER else float(acc)
        rows.append(ResultRow(**rec))
    return rows


def _ensure_parent(path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def write_csv(table: Sequence[ResultRow], path: str) -> None:
    """Writes the result table with the fixed column order; refuses an empty table."""
    if not table:
        raise ParameterError("refusing to write an empty result table")
    frame = rows_to_frame(table)
    try:
        _ensure_parent(path)
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise OSError(f"Could not write results to {path}: {e}") from e
    logger.info("Wrote %d rows to %s", len(frame), path)


def read_csv(path: str) -> List[ResultRow]:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise FileNotFoundError(f"The file {path} was not found.")
    return frame_to_rows(frame)


def _format_radius(value: float) -> str:
    return "inf" if math.isinf(value) else repr(float(value))


def write_certificate_csv(records: Sequence[CertificateRecord], path: str) -> None:
    """Per-example certificate details; infinite radii are written as ``inf``."""
    frame = pd.DataFrame.from_records(
        [
            {
                "index": rec.index,
                "clean_pred": rec.clean_pred,
                "label": rec.label,
                "margin": repr(rec.margin),
                "dual_norm": repr(rec.dual_norm),
                "radius": _format_radius(rec.radius),
                "norm_p": rec.norm_p,
            }
            for rec in records
        ],
        columns=CERTIFICATE_COLUMNS,
    )
    try:
        _ensure_parent(path)
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise OSError(f"Could not write certificates to {path}: {e}") from e


class SVG:
    """Minimal SVG 1.1 document builder."""

    def __init__(self):
        self.svg = ""

    def header(self, width, height):
        self.svg += (
            '<?xml version="1.0" standalone="no"?>\n'
            '<!DOCTYPE svg PUBLIC "-//W3C//DTD SVG 1.1//EN" "http://www.w3.org/Graphics/SVG/1.1/DTD/svg11.dtd">\n'
            f'<svg version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" '
            'xmlns="http://www.w3.org/2000/svg">\n'
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>\n'
        )

    def group_start(self, ident: str):
        self.svg += f'<g id="{escape(ident)}">\n'

    def group_end(self):
        self.svg += "</g>\n"

    def line(self, x1, y1, x2, y2, stroke="#999", extra=""):
        self.svg += f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="{stroke}" {extra}/>\n'

    def polyline(self, points: Sequence[Tuple[float, float]], stroke: str, dashed: bool, title: str = ""):
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
        dash = f' stroke-dasharray="{DASH}"' if dashed else ""
        self.svg += f'<polyline points="{coords}" fill="none" stroke="{stroke}" stroke-width="1.5"{dash}>'
        self.svg += f"<title>{escape(title)}</title></polyline>\n" if title else "</polyline>\n"

    def circle(self, x, y, r, fill):
        self.svg += f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{fill}"/>\n'

    def text(self, x, y, string, extra=""):
        self.svg += f'<text x="{x:.2f}" y="{y:.2f}" font-family="sans-serif" font-size="11" {extra}>{escape(string)}</text>\n'

    def get_svg(self):
        return f"{self.svg}</svg>\n"


def panel_point(eps: float, acc: float, x_max: float, origin: Tuple[float, float] = (0.0, 0.0)) -> Tuple[float, float]:
    """Maps (epsilon, accuracy) to SVG coordinates in a panel; x spans [0, x_max], y spans [0, 1]."""
    plot_w = PANEL_WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    ox, oy = origin
    x = ox + MARGIN_LEFT + (eps / x_max if x_max > 0 else 0.0) * plot_w
    y = oy + MARGIN_TOP + (1.0 - acc) * plot_h
    return x, y


def _panels(table: Sequence[ResultRow]) -> Dict[Tuple[str, str, str], List[ResultRow]]:
    panels: Dict[Tuple[str, str, str], List[ResultRow]] = {}
    for row in sorted(table, key=lambda r: r.sort_key()):
        if row.attack == "clean" or row.accuracy is None:
            continue
        panels.setdefault((row.dataset, row.attack, row.norm), []).append(row)
    return panels


def render_curves(table: Sequence[ResultRow], path: str) -> str:
    """
    Accuracy-vs-epsilon chart: one panel per (dataset, attack, norm), one colour
    per r, solid lines for SPCA and dashed lines for PCA.
    """
    if not table:
        raise ParameterError("refusing to plot an empty result table")
    panels = _panels(table)
    if not panels:
        raise ParameterError("result table has no attack or certificate rows to plot")
    r_values = sorted({row.r for rows in panels.values() for row in rows})
    colors = {r: PALETTE[i % len(PALETTE)] for i, r in enumerate(r_values)}

    n_rows = math.ceil(len(panels) / PANEL_COLUMNS)
    width = PANEL_WIDTH * min(PANEL_COLUMNS, len(panels))
    height = PANEL_HEIGHT * n_rows + LEGEND_HEIGHT
    svg = SVG()
    svg.header(width, height)
    plot_w = PANEL_WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    for idx, ((dataset, attack, norm), rows) in enumerate(panels.items()):
        origin = (float((idx % PANEL_COLUMNS) * PANEL_WIDTH), float((idx // PANEL_COLUMNS) * PANEL_HEIGHT))
        ox, oy = origin
        x_max = max(row.epsilon for row in rows)
        svg.group_start(f"{dataset}-{attack}-{norm}")
        svg.text(ox + MARGIN_LEFT, oy + MARGIN_TOP - 10, f"{dataset} - {attack} ({norm})", 'font-weight="bold"')
        # axes and y grid
        for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
            _, ty = panel_point(0.0, tick, x_max, origin)
            svg.line(ox + MARGIN_LEFT, ty, ox + MARGIN_LEFT + plot_w, ty, stroke="#e0e0e0")
            svg.text(ox + 8, ty + 4, f"{tick:.2f}")
        svg.line(ox + MARGIN_LEFT, oy + MARGIN_TOP, ox + MARGIN_LEFT, oy + MARGIN_TOP + plot_h, stroke="#333")
        svg.line(ox + MARGIN_LEFT, oy + MARGIN_TOP + plot_h, ox + MARGIN_LEFT + plot_w, oy + MARGIN_TOP + plot_h, stroke="#333")
        svg.text(ox + MARGIN_LEFT, oy + PANEL_HEIGHT - 12, "0")
        svg.text(ox + MARGIN_LEFT + plot_w - 20, oy + PANEL_HEIGHT - 12, format_epsilon(x_max))
        svg.text(ox + MARGIN_LEFT + plot_w / 2 - 10, oy + PANEL_HEIGHT - 12, "epsilon")

        curves: Dict[Tuple[str, int, str], List[ResultRow]] = {}
        for row in rows:
            curves.setdefault((row.projection, row.r, row.head), []).append(row)
        for (projection, r, head), pts in curves.items():
            pts = sorted(pts, key=lambda row: row.epsilon)
            coords = [panel_point(row.epsilon, row.accuracy, x_max, origin) for row in pts]
            svg.polyline(coords, colors[r], dashed=projection == "pca", title=f"{projection.upper()} r={r} {head}")
            for x, y in coords:
                svg.circle(x, y, MARKER_RADIUS, colors[r])
        svg.group_end()

    # legend
    ly = PANEL_HEIGHT * n_rows + 15
    svg.line(10, ly, 40, ly, stroke="#333")
    svg.text(45, ly + 4, "SPCA")
    svg.line(90, ly, 120, ly, stroke="#333", extra=f'stroke-dasharray="{DASH}"')
    svg.text(125, ly + 4, "PCA")
    for i, r in enumerate(r_values):
        lx = 170 + 70 * i
        svg.line(lx, ly, lx + 20, ly, stroke=colors[r], extra='stroke-width="3"')
        svg.text(lx + 24, ly + 4, f"r={r}")

    content = svg.get_svg()
    try:
        _ensure_parent(path)
        with open(path, "w", encoding="utf-8") as f:
            f.write(content)
    except OSError as e:
        raise OSError(f"Could not write chart to {path}: {e}") from e
    logger.info("Wrote %d panels to %s", len(panels), path)
    return content


def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] intensities to 8-bit grey levels."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str, pixels: np.ndarray) -> None:
    """Binary (P5) portable graymap of a 2-D uint8 array."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise ParameterError(f"PGM needs a 2-D image, got shape {pixels.shape}")
    h, w = pixels.shape
    try:
        _ensure_parent(path)
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(pixels.tobytes())
    except OSError as e:
        raise OSError(f"Could not write image {path}: {e}") from e


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ParameterError(f"{path} is not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def dump_adversarial_grid(
    projection: ProjectionModel,
    head: AnyHead,
    dataset: LabeledDataset,
    attack_config: AttackConfig,
    count: int,
    path: str,
    epsilons: Optional[Sequence[float]] = None,
) -> List[str]:
    """
    Writes clean/adversarial image pairs for the first ``count`` examples.

    For every epsilon (default: the attack's own) this writes the adversarial
    image and the perturbation magnitude ``round(255 |x' - x|)``; a combined
    ``grid.pgm`` puts clean images in the left column and the adversarial
    images for increasing epsilon to the right.
    """
    if dataset.image_shape is None:
        raise ParameterError(f"{dataset.name} rows are not images")
    if count < 1:
        raise ParameterError(f"count must be positive, got {count}")
    subset = dataset.head(count)
    eps_list = sorted(epsilons) if epsilons else [attack_config.threat.epsilon]
    h, w = dataset.image_shape
    written: List[str] = []
    columns = [[quantize(subset.X[i].reshape(h, w)) for i in range(subset.N)]]
    for i in range(subset.N):
        out = os.path.join(path, f"{i:03d}_clean.pgm")
        write_pgm(out, columns[0][i])
        written.append(out)

    for eps in eps_list:
        config = attack_config.model_copy(update={"threat": ThreatModel(p=attack_config.threat.p, epsilon=eps)})
        X_adv, _ = adversarial_examples(projection, head, subset, config)
        column = []
        for i in range(subset.N):
            adv = quantize(X_adv[i].reshape(h, w))
            pert = quantize(np.abs(X_adv[i] - subset.X[i]).reshape(h, w))
            tag = f"{i:03d}_{attack_config.kind}_{attack_config.threat.label}_eps{format_epsilon(eps)}"
            for suffix, img in (("adv", adv), ("pert", pert)):
                out = os.path.join(path, f"{tag}_{suffix}.pgm")
                write_pgm(out, img)
                written.append(out)
            column.append(adv)
        columns.append(column)

    gap = 2
    grid = np.full((subset.N * (h + gap) - gap, len(columns) * (w + gap) - gap), 255, dtype=np.uint8)
    for c, column in enumerate(columns):
        for i, img in enumerate(column):
            grid[i * (h + gap):i * (h + gap) + h, c * (w + gap):c * (w + gap) + w] = img
    out = os.path.join(path, "grid.pgm")
    write_pgm(out, grid)
    written.append(out)
    logger.info("Wrote %d images to %s", len(written), path)
    return written
