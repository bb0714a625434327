"""
Exact robustness certificates for linear heads on a linear projection, plus
dual-norm and operator-norm diagnostics.

For a linear head the logit gap between two classes is an affine function of
the input, so the smallest perturbation that closes it is the gap divided by
the dual norm of its gradient ``W^T (u_a - u_b)``: the l1 norm for an l-inf
threat and the l2 norm for an l2 threat. Certificates use the pure norm-ball
threat model and ignore the [0, 1] pixel box, so they stay sound for clipped
attacks.
"""

import logging
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from datasets import LabeledDataset
from errors import DimensionError, ParameterError, SizeError, UnsupportedHeadError
from heads import AnyHead, LinearHead, lipschitz_upper_bound
from numerics import as_matrix, as_vector, spectral_norm
from projection import ProjectionModel, project

logger = logging.getLogger(__name__)

Norm = Literal["inf", "2"]
EXACT_INF2_MAX_D = 20
_SIGN_CHUNK = 1 << 15


class ThreatModel(BaseModel):
    """Perturbations ``||delta||_p <= epsilon`` in [0, 1] pixel units."""
    model_config = ConfigDict(frozen=True)

    p: Norm
    epsilon: float = Field(ge=0.0)

    @property
    def label(self) -> str:
        return "linf" if self.p == "inf" else "l2"


class CertificateRecord(BaseModel):
    """Per-example certificate: margin, dual norm of the binding pair, and radius."""
    model_config = ConfigDict(frozen=True)

    index: int
    clean_pred: int
    label: int
    margin: float = Field(description="Smallest pairwise logit gap of the predicted class")
    dual_norm: float = Field(description="Dual norm of the pair that attains the radius")
    radius: float = Field(ge=0.0)
    norm_p: Norm
    correct: bool


def norm_label(p: str) -> str:
    return "linf" if p == "inf" else "l2"


def _dual(values: np.ndarray, p: str, axis: int = -1) -> np.ndarray:
    if p == "inf":
        return np.abs(values).sum(axis=axis)
    if p == "2":
        return np.sqrt((values * values).sum(axis=axis))
    raise ParameterError(f"unsupported norm p={p!r}; use 'inf' or '2'")


def dual_norms(W: np.ndarray, v: np.ndarray) -> Tuple[float, float]:
    """``(||W^T v||_1, ||W^T v||_2)``."""
    W = as_matrix(W, "W")
    v = as_vector(v, "v")
    if v.shape[0] != W.shape[0]:
        raise DimensionError(f"v has length {v.shape[0]}, W has r={W.shape[0]} rows")
    g = W.T @ v
    return float(np.abs(g).sum()), float(np.linalg.norm(g))


def _radius(margin: float, dual: float) -> float:
    if margin <= 0.0:
        return 0.0
    if dual == 0.0:
        return float("inf")
    return margin / dual


def certified_radius_binary(
    W: np.ndarray,
    u: np.ndarray,
    b_head: float,
    x: np.ndarray,
    y: int,
    p: str,
    b_proj: Optional[np.ndarray] = None,
) -> float:
    """
    Certified radius of a binary linear head with labels in {-1, +1}.

    The margin is ``m(x) = y (u^T (W x + b_proj) + b_head)``; the radius is
    ``m(x) / ||W^T u||_*`` when the margin is positive and 0 otherwise. A zero
    dual norm with a positive margin gives ``inf``.
    """
    if y not in (-1, 1):
        raise ParameterError(f"binary labels must be -1 or +1, got {y}")
    W = as_matrix(W, "W")
    u = as_vector(u, "u")
    x = as_vector(x, "x")
    if u.shape[0] != W.shape[0] or x.shape[0] != W.shape[1]:
        raise DimensionError(f"u ({u.shape[0]}) / x ({x.shape[0]}) do not fit W {W.shape}")
    z = W @ x + (0.0 if b_proj is None else b_proj)
    margin = y * (float(u @ z) + b_head)
    return _radius(margin, float(_dual(W.T @ u, p)))


def _pairwise(W: np.ndarray, U: np.ndarray, biases: np.ndarray, Z: np.ndarray, p: str):
    """Predicted class, per-competitor gaps and per-competitor dual norms for rows of Z."""
    logits = Z @ U + biases
    pred = np.argmax(logits, axis=1)
    K = U.shape[1]
    # dual norms for every ordered class pair: ||W^T (u_a - u_b)||
    G = W.T @ U
    pair_dual = np.zeros((K, K))
    for a in range(K):
        pair_dual[a] = _dual(G[:, [a]] - G, p, axis=0)
    gaps = logits[np.arange(Z.shape[0]), pred][:, None] - logits
    duals = pair_dual[pred]
    return pred, gaps, duals


def _radii(gaps: np.ndarray, duals: np.ndarray, pred: np.ndarray):
    """Radius, binding margin and binding dual norm per row."""
    n, K = gaps.shape
    mask = np.ones_like(gaps, dtype=bool)
    mask[np.arange(n), pred] = False
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(duals > 0, gaps / np.where(duals > 0, duals, 1.0), np.inf)
    ratio = np.where(mask, ratio, np.inf)
    binding = np.argmin(ratio, axis=1)
    radius = ratio[np.arange(n), binding]
    min_gap = np.where(mask, gaps, np.inf).min(axis=1)
    radius = np.where(min_gap > 0, radius, 0.0)
    return radius, min_gap, duals[np.arange(n), binding]


def certified_radius_multiclass(
    W: np.ndarray,
    U: np.ndarray,
    biases: np.ndarray,
    x: np.ndarray,
    p: str,
    b_proj: Optional[np.ndarray] = None,
) -> Tuple[int, float]:
    """
    Predicted class and certified radius of a K-class linear head.

    The radius is the minimum over competitors k of the logit gap to k divided
    by ``||W^T (u_pred - u_k)||_*``, and 0 if any gap is non-positive.
    """
    W = as_matrix(W, "W")
    U = as_matrix(U, "U")
    biases = as_vector(biases, "biases")
    x = as_vector(x, "x")
    if U.shape[1] < 2:
        raise DimensionError("multiclass certificate needs K >= 2")
    if U.shape[0] != W.shape[0] or x.shape[0] != W.shape[1] or biases.shape[0] != U.shape[1]:
        raise DimensionError(f"shapes W {W.shape}, U {U.shape}, biases {biases.shape}, x {x.shape} do not fit")
    z = W @ x + (0.0 if b_proj is None else b_proj)
    pred, gaps, duals = _pairwise(W, U, biases, z[None, :], p)
    radius, _, _ = _radii(gaps, duals, pred)
    return int(pred[0]), float(radius[0])


def _require_linear(head: AnyHead) -> LinearHead:
    if not isinstance(head, LinearHead):
        raise UnsupportedHeadError(
            f"exact certificates need a linear head, got {type(head).__name__}; use sensitivity_bound instead"
        )
    return head


def certify_dataset(projection: ProjectionModel, head: AnyHead, dataset: LabeledDataset, p: str) -> List[CertificateRecord]:
    """Certificate records for every example of ``dataset``; one forward pass in total."""
    head = _require_linear(head)
    Z = project(projection, dataset.X)
    pred, gaps, duals = _pairwise(projection.W, head.U, head.biases, Z, p)
    radius, margin, dual = _radii(gaps, duals, pred)
    correct = pred == dataset.y
    radius = np.where(correct, radius, 0.0)
    return [
        CertificateRecord(
            index=i,
            clean_pred=int(pred[i]),
            label=int(dataset.y[i]),
            margin=float(margin[i]),
            dual_norm=float(dual[i]),
            radius=float(radius[i]),
            norm_p=p,
            correct=bool(correct[i]),
        )
        for i in range(dataset.N)
    ]


def certified_accuracy_curve(
    projection: ProjectionModel,
    head: AnyHead,
    dataset: LabeledDataset,
    p: str,
    epsilons: Sequence[float],
) -> List[Tuple[float, float]]:
    """Fraction of examples that are correctly classified with certified radius > epsilon."""
    eps = np.asarray(list(epsilons), dtype=np.float64)
    if eps.size and np.any(np.diff(eps) < 0):
        raise ParameterError("epsilons must be sorted ascending")
    radii = np.array([rec.radius for rec in certify_dataset(projection, head, dataset, p)])
    return [(float(e), float(np.mean(radii > e))) for e in eps]


class OperatorNormReport(BaseModel):
    """Bounds on ``||W||_{inf->2}``: column norms, spectral norm, and the exact value for small D."""
    col_norm_max: float
    col_norm_sum: float
    spectral: float
    sqrt_d_spectral: float
    exact_inf_to_2: Optional[float] = None


def exact_inf_to_2(W: np.ndarray) -> float:
    """``max over s in {-1,+1}^D of ||W s||_2``, by enumeration (D <= 20)."""
    W = as_matrix(W, "W")
    D = W.shape[1]
    if D > EXACT_INF2_MAX_D:
        raise SizeError(f"exact inf->2 norm enumerates 2^D sign vectors; D={D} exceeds {EXACT_INF2_MAX_D}")
    if D == 0:
        return 0.0
    # s and -s give the same norm, so fix the last sign to +1
    total = 1 << (D - 1)
    bits = np.arange(D - 1, dtype=np.int64)
    best = 0.0
    for start in range(0, total, _SIGN_CHUNK):
        idx = np.arange(start, min(start + _SIGN_CHUNK, total), dtype=np.int64)
        signs = np.ones((idx.size, D))
        signs[:, :-1] = 1.0 - 2.0 * ((idx[:, None] >> bits) & 1)
        best = max(best, float(np.max(np.linalg.norm(signs @ W.T, axis=1))))
    return best


def operator_norm_diagnostics(W: np.ndarray, exact: Optional[bool] = None) -> OperatorNormReport:
    """
    Reports ``max_j ||w_j||``, ``sum_j ||w_j||``, ``||W||_2``, ``sqrt(D) ||W||_2`` and,
    when D <= 20 (or when ``exact=True``), the exact inf->2 norm.
    """
    W = as_matrix(W, "W")
    D = W.shape[1]
    if exact is None:
        exact = D <= EXACT_INF2_MAX_D
    col = np.linalg.norm(W, axis=0)
    spec = spectral_norm(W)
    return OperatorNormReport(
        col_norm_max=float(col.max()),
        col_norm_sum=float(col.sum()),
        spectral=spec,
        sqrt_d_spectral=float(np.sqrt(D) * spec),
        exact_inf_to_2=exact_inf_to_2(W) if exact else None,
    )


class SensitivityBound(BaseModel):
    """Lipschitz bounds of ``x -> C(W x)`` into l2, for l2 and l-inf inputs."""
    lipschitz_head: float
    l2: float = Field(description="L_C * ||W||_{2->2}")
    linf: float = Field(description="L_C * sum_j ||w_j||_2, an upper surrogate for L_C * ||W||_{inf->2}")

    def for_norm(self, p: str) -> float:
        return self.linf if p == "inf" else self.l2


def sensitivity_bound(projection: ProjectionModel, head: AnyHead) -> SensitivityBound:
    """Composition bound ``L_C ||W||_{p->2}`` with ``L_C`` the head's spectral-norm product."""
    L = lipschitz_upper_bound(head)
    W = projection.W
    return SensitivityBound(
        lipschitz_head=L,
        l2=L * spectral_norm(W),
        linf=L * float(np.linalg.norm(W, axis=0).sum()),
    )


class MarginSummary(BaseModel):
    """Medians over correctly classified examples; margin and dual norm drive the radius jointly."""
    p: Norm
    n_correct: int
    median_margin: float
    median_dual_norm: float
    median_radius: float


def margin_report(projection: ProjectionModel, head: AnyHead, dataset: LabeledDataset, p: str) -> MarginSummary:
    records = [r for r in certify_dataset(projection, head, dataset, p) if r.correct]
    if not records:
        return MarginSummary(p=p, n_correct=0, median_margin=0.0, median_dual_norm=0.0, median_radius=0.0)
    return MarginSummary(
        p=p,
        n_correct=len(records),
        median_margin=float(np.median([r.margin for r in records])),
        median_dual_norm=float(np.median([r.dual_norm for r in records])),
        median_radius=float(np.median([r.radius for r in records])),
    )


class DualNormBoundCheck(BaseModel):
    """Realised dual norms of every class-pair direction against their column-norm bounds."""
    pairs: int
    max_l1_ratio: float = Field(description="max ||W^T v||_1 / (||v||_2 sum_j ||w_j||_2)")
    max_l2_ratio: float = Field(description="max ||W^T v||_2 / (||v||_2 ||W||_2)")
    holds: bool


def dual_norm_bound_report(projection: ProjectionModel, head: AnyHead, slack: float = 1e-9) -> DualNormBoundCheck:
    """Checks ``||W^T v||_1 <= ||v|| sum_j ||w_j||`` and ``||W^T v||_2 <= ||v|| ||W||_2`` for v = u_a - u_b."""
    head = _require_linear(head)
    W, U = projection.W, head.U
    col_sum = float(np.linalg.norm(W, axis=0).sum())
    spec = spectral_norm(W)
    K = U.shape[1]
    r1, r2, n = 0.0, 0.0, 0
    for a in range(K):
        for b in range(a + 1, K):
            v = U[:, a] - U[:, b]
            nv = float(np.linalg.norm(v))
            if nv == 0.0:
                continue
            l1, l2 = dual_norms(W, v)
            if col_sum > 0:
                r1 = max(r1, l1 / (nv * col_sum))
            if spec > 0:
                r2 = max(r2, l2 / (nv * spec))
            n += 1
    return DualNormBoundCheck(pairs=n, max_l1_ratio=r1, max_l2_ratio=r2, holds=r1 <= 1 + slack and r2 <= 1 + slack)
