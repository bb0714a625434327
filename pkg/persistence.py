"""
Binary model files holding a fitted projection and its head.

Layout (all integers little-endian)::

    b"SPCR"                 magic
    uint16                  format version
    uint32                  number of records
    records, each:
        uint16              name length
        bytes               UTF-8 name
        uint32, uint32      rows, cols
        float64[rows*cols]  row-major IEEE-754 payload

Record names: ``proj.W``, ``proj.b``, ``proj.kind`` (1x1 code),
``proj.converged`` (1x1), optional ``proj.explained_variance``, then either
``head.linear.U`` / ``head.linear.biases`` or ``head.mlp.W{i}`` /
``head.mlp.b{i}`` for each layer. A file without head records holds a projection
only.
"""

import io
import logging
import os
import struct
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import MagicError, ModelFileError, ModelTruncationError, VersionError
from heads import AnyHead, LinearHead, MlpHead
from projection import ProjectionModel

logger = logging.getLogger(__name__)

MAGIC = b"SPCR"
FORMAT_VERSION = 1
KIND_CODES = {"pca": 0, "spca": 1, "linear": 2}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}


def _records(projection: ProjectionModel, head: Optional[AnyHead]) -> List[Tuple[str, np.ndarray]]:
    recs = [
        ("proj.W", projection.W),
        ("proj.b", projection.b[None, :]),
        ("proj.kind", np.array([[KIND_CODES[projection.kind]]], dtype=np.float64)),
        ("proj.converged", np.array([[1.0 if projection.converged else 0.0]])),
    ]
    if projection.explained_variance is not None:
        recs.append(("proj.explained_variance", projection.explained_variance[None, :]))
    if isinstance(head, LinearHead):
        recs += [("head.linear.U", head.U), ("head.linear.biases", head.biases[None, :])]
    elif isinstance(head, MlpHead):
        for i, (W, b) in enumerate(zip(head.weights, head.biases)):
            recs += [(f"head.mlp.W{i}", W), (f"head.mlp.b{i}", b[None, :])]
    elif head is not None:
        raise ModelFileError(f"cannot persist head of type {type(head).__name__}")
    return recs


def save_model(path: str, projection: ProjectionModel, head: Optional[AnyHead] = None) -> None:
    """Writes ``projection`` and ``head`` (if any) to ``path`` in the SPCR format."""
    buf = io.BytesIO()
    recs = _records(projection, head)
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(recs)))
    for name, mat in recs:
        raw = name.encode("utf-8")
        mat = np.ascontiguousarray(mat, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        buf.write(mat.tobytes(order="C"))
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as f:
            f.write(buf.getvalue())
    except OSError as e:
        raise OSError(f"Could not write model file {path}: {e}") from e
    logger.info("Saved %s projection (r=%d) and %s head to %s", projection.kind, projection.r, type(head).__name__ if head is not None else "no", path)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelTruncationError(f"{self.path}: file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_records(path: str) -> Dict[str, np.ndarray]:
    """Reads every named matrix of a model file."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"The file {path} was not found.")

    reader = _Reader(data, path)
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise MagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, count = reader.unpack("<HI")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    records: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        rows, cols = reader.unpack("<II")
        payload = reader.take(8 * rows * cols)
        records[name] = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
    if reader.pos != len(data):
        raise ModelFileError(f"{path}: {len(data) - reader.pos} trailing bytes after the last record")
    return records


def load_model(path: str) -> Tuple[ProjectionModel, Optional[AnyHead]]:
    """Reads a model file written by :func:`save_model`; the head is None for projection-only files."""
    recs = read_records(path)
    try:
        kind = CODE_KINDS[int(recs["proj.kind"][0, 0])]
        ev = recs.get("proj.explained_variance")
        projection = ProjectionModel(
            W=recs["proj.W"],
            b=recs["proj.b"][0],
            kind=kind,
            explained_variance=None if ev is None else ev[0],
            converged=bool(recs["proj.converged"][0, 0]),
        )
        head: Optional[AnyHead] = None
        if "head.linear.U" in recs:
            head = LinearHead(U=recs["head.linear.U"], biases=recs["head.linear.biases"][0])
        elif any(name.startswith("head.mlp.W") for name in recs):
            n_layers = sum(1 for name in recs if name.startswith("head.mlp.W"))
            head = MlpHead(
                weights=tuple(recs[f"head.mlp.W{i}"] for i in range(n_layers)),
                biases=tuple(recs[f"head.mlp.b{i}"][0] for i in range(n_layers)),
            )
    except KeyError as e:
        raise ModelFileError(f"{path}: missing record {e.args[0]}") from e
    return projection, head
