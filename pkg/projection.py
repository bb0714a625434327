"""
Linear feature extractors: PCA and sparse PCA fitted on centred training data,
applied as ``phi(x) = W x + b`` with ``b = -W x_bar``.
"""

import logging
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from datasets import CenteringInfo
from errors import DensityFloorError, DimensionError, ParameterError
from numerics import as_matrix, soft_threshold, spectral_norm, sym_eig

logger = logging.getLogger(__name__)

ProjectionKind = Literal["pca", "spca", "linear"]

ZERO_TOL = 1e-12
ORTHONORMAL_TOL = 1e-8
UNIT_ROW_TOL = 1e-8


class ProjectionModel(BaseModel):
    """The fitted map x -> W x + b and what is known about how it was fitted."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    W: np.ndarray = Field(description="r x D projection matrix, one component per row")
    b: np.ndarray = Field(description="length-r bias, -W x_bar")
    kind: ProjectionKind = Field(description="'pca', 'spca', or 'linear' for a supplied matrix")
    explained_variance: Optional[np.ndarray] = Field(default=None, description="Variance captured per component")
    converged: bool = Field(default=True, description="False if any SPCA component hit max_iters")

    @model_validator(mode="after")
    def _check(self):
        W, b = self.W, self.b
        if W.ndim != 2 or W.shape[0] == 0 or W.shape[1] == 0:
            raise DimensionError(f"W must be a non-empty r x D matrix, got {W.shape}")
        if b.shape != (W.shape[0],):
            raise DimensionError(f"b has shape {b.shape}, expected ({W.shape[0]},)")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ParameterError("projection parameters must be finite")
        if self.kind == "pca":
            gap = np.max(np.abs(W @ W.T - np.eye(W.shape[0])))
            if gap >= ORTHONORMAL_TOL:
                raise ParameterError(f"PCA rows are not orthonormal (max |WW^T - I| = {gap:.2e})")
        elif self.kind == "spca":
            gap = np.max(np.abs(np.linalg.norm(W, axis=1) - 1.0))
            if gap >= UNIT_ROW_TOL:
                raise ParameterError(f"SPCA rows are not unit norm (max deviation {gap:.2e})")
        return self

    @property
    def r(self) -> int:
        return self.W.shape[0]

    @property
    def D(self) -> int:
        return self.W.shape[1]

    @property
    def density(self) -> float:
        return float(np.mean(np.abs(self.W) >= ZERO_TOL))

    @property
    def col_norms(self) -> np.ndarray:
        return np.linalg.norm(self.W, axis=0)


class SparsityReport(BaseModel):
    """Quantities entering the column-norm dual bound and the operator-norm bounds."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    density: float
    row_nonzeros: np.ndarray
    col_norms: np.ndarray
    col_norm_sum: float
    col_norm_max: float
    spectral_norm: float
    alpha: float = Field(description="Achieved l1 budget, sum of |W_ij|")
    explained_variance: Optional[np.ndarray] = None

    def summary(self) -> dict:
        """Scalar fields only, for JSON summaries."""
        return {
            "density": self.density,
            "min_row_nonzeros": int(self.row_nonzeros.min()),
            "max_row_nonzeros": int(self.row_nonzeros.max()),
            "col_norm_sum": self.col_norm_sum,
            "col_norm_max": self.col_norm_max,
            "spectral_norm": self.spectral_norm,
            "alpha": self.alpha,
            "explained_variance_total": None if self.explained_variance is None
            else float(np.sum(self.explained_variance)),
        }


def covariance(X_centered: np.ndarray) -> np.ndarray:
    """Empirical covariance (1/N) X^T X of already-centred rows."""
    X = as_matrix(X_centered, "X_centered")
    return (X.T @ X) / X.shape[0]


def _bias(W: np.ndarray, centering: Optional[CenteringInfo]) -> np.ndarray:
    if centering is None:
        return np.zeros(W.shape[0])
    if centering.mean.shape[0] != W.shape[1]:
        raise DimensionError(f"centering mean has length {centering.mean.shape[0]}, W has D={W.shape[1]}")
    return -W @ centering.mean


def fit_pca(X_centered: np.ndarray, r: int, centering: Optional[CenteringInfo] = None) -> ProjectionModel:
    """
    PCA projection: the rows of W are the top-r eigenvectors of the covariance.

    Args:
        X_centered: Training rows with the training mean already removed.
        r: Number of components.
        centering: Training mean used to fold centring into the bias; None means
            inputs to ``project`` will already be centred.
    """
    X = as_matrix(X_centered, "X_centered")
    N, D = X.shape
    if r < 1 or r > D:
        raise ParameterError(f"r must lie in 1..{D}, got {r}")
    if r > N:
        raise ParameterError(f"r={r} exceeds the sample count N={N}")

    values, vectors = sym_eig(covariance(X))
    rank = int(np.sum(values > ZERO_TOL * max(values[0], 1.0)))
    if r > rank:
        logger.warning("PCA: r=%d exceeds covariance rank %d; trailing components are degenerate", r, rank)
    W = vectors[:, :r].T.copy()
    logger.info("PCA: r=%d captures %.4f of total variance", r, values[:r].sum() / max(values.sum(), ZERO_TOL))
    return ProjectionModel(W=W, b=_bias(W, centering), kind="pca", explained_variance=values[:r].copy())


def _support_eigvec(S: np.ndarray, support: np.ndarray) -> Tuple[np.ndarray, float]:
    """Leading eigenvector of S restricted to ``support``, embedded in R^D."""
    sub = S[np.ix_(support, support)]
    values, vectors = sym_eig(0.5 * (sub + sub.T))
    v = np.zeros(S.shape[0])
    v[support] = vectors[:, 0]
    return v, float(values[0])


def _sparse_component(
    S: np.ndarray,
    k: int,
    candidates: np.ndarray,
    start: np.ndarray,
    max_iters: int,
    tol: float,
) -> Tuple[np.ndarray, float, bool]:
    """
    Thresholded power iteration from ``start``.

    Each step applies S, soft-thresholds at the level that leaves exactly k
    nonzeros among the candidate coordinates, and renormalises. The final
    support is polished with an exact eigensolve on the support.
    """
    v = start / np.linalg.norm(start)
    best_v, best_var, converged = None, -np.inf, False
    for _ in range(max_iters):
        sv = S @ v
        sv[~candidates] = 0.0
        mags = np.sort(np.abs(sv))[::-1]
        if mags[0] <= ZERO_TOL:
            break
        lam = mags[k] if k < mags.size else 0.0
        w = soft_threshold(sv, lam)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        w /= norm
        var = float(w @ S @ w)
        if var > best_var:
            best_v, best_var = w, var
        change = min(np.linalg.norm(w - v), np.linalg.norm(w + v))
        v = w
        if change < tol:
            converged = True
            break

    if best_v is None:
        return v, float(v @ S @ v), False
    final = v if converged else best_v
    support = np.flatnonzero(np.abs(final) >= ZERO_TOL)
    polished, var = _support_eigvec(S, support)
    return polished, var, converged


def fit_spca(
    X_centered: np.ndarray,
    r: int,
    target_density: float,
    max_iters: int = 300,
    tol: float = 1e-10,
    centering: Optional[CenteringInfo] = None,
    restarts: int = 3,
) -> ProjectionModel:
    """
    Sparse PCA by thresholded power iteration with projection deflation.

    Components are extracted one at a time. Each keeps
    ``round(target_density * D)`` nonzero loadings, has unit l2 norm, and is
    removed from the covariance with ``S <- (I - v v^T) S (I - v v^T)``
    before the next one is extracted.

    Args:
        X_centered: Training rows with the training mean removed.
        r: Number of components.
        target_density: Fraction of nonzero loadings per component, in (0, 1].
        max_iters: Power-iteration cap per start.
        tol: Convergence threshold on the change of the loading vector.
        centering: Training mean folded into the bias.
        restarts: Extra starts from the highest-variance coordinates, besides
            the leading eigenvector; the best-variance result is kept.
    """
    X = as_matrix(X_centered, "X_centered")
    N, D = X.shape
    if not 0.0 < target_density <= 1.0:
        raise ParameterError(f"target_density must lie in (0, 1], got {target_density}")
    if r < 1 or r > D:
        raise ParameterError(f"r must lie in 1..{D}, got {r}")
    k = int(round(target_density * D))
    if k < 1:
        raise DensityFloorError(f"target_density={target_density} leaves no nonzero loading out of D={D}")

    S = covariance(X)
    diag = np.diag(S)
    candidates = diag > ZERO_TOL * max(float(diag.max()), 1.0)
    n_candidates = int(candidates.sum())
    if n_candidates == 0:
        raise ParameterError("every input column has zero variance")
    if k > n_candidates:
        logger.warning("SPCA: only %d columns have variance; using %d nonzeros instead of %d", n_candidates, n_candidates, k)
        k = n_candidates

    rows: List[np.ndarray] = []
    variances: List[float] = []
    all_converged = True
    S_def = S.copy()
    for comp in range(r):
        values, vectors = sym_eig(0.5 * (S_def + S_def.T))
        starts = [vectors[:, 0]]
        for j in np.argsort(-np.diag(S_def), kind="stable")[:restarts]:
            e = np.zeros(D)
            e[j] = 1.0
            starts.append(e)

        best = None
        for start in starts:
            if np.linalg.norm(S_def @ start) <= ZERO_TOL:
                continue
            v, var, ok = _sparse_component(S_def, k, candidates, start, max_iters, tol)
            if best is None or var > best[1] + 1e-12:
                best = (v, var, ok)
        if best is None:
            # covariance exhausted; fall back to an unused coordinate
            used = np.any(np.abs(np.array(rows)) >= ZERO_TOL, axis=0) if rows else np.zeros(D, bool)
            free = np.flatnonzero(candidates & ~used)
            j = int(free[0]) if free.size else int(np.flatnonzero(candidates)[0])
            v = np.zeros(D)
            v[j] = 1.0
            best = (v, 0.0, True)
            logger.warning("SPCA: covariance exhausted at component %d; using coordinate %d", comp, j)

        v, var, ok = best
        idx = np.argmax(np.abs(v))
        if v[idx] < 0:
            v = -v
        all_converged &= ok
        rows.append(v)
        variances.append(var)
        P = np.eye(D) - np.outer(v, v)
        S_def = P @ S_def @ P

    if not all_converged:
        logger.warning("SPCA: some components did not converge within %d iterations", max_iters)
    W = np.vstack(rows)
    model = ProjectionModel(
        W=W,
        b=_bias(W, centering),
        kind="spca",
        explained_variance=np.array(variances),
        converged=all_converged,
    )
    logger.info("SPCA: r=%d, %d nonzeros per row, density %.4f, alpha %.3f",
                r, k, model.density, float(np.abs(W).sum()))
    return model


def linear_projection(W: np.ndarray, b: Optional[np.ndarray] = None) -> ProjectionModel:
    """Wraps a supplied matrix (and bias) as a projection without fitting."""
    W = as_matrix(W, "W")
    b = np.zeros(W.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return ProjectionModel(W=W, b=b, kind="linear")


def project(model: ProjectionModel, X: np.ndarray) -> np.ndarray:
    """Applies W x + b to every row of X (or to a single vector)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.D:
        raise DimensionError(f"input has {X.shape[-1]} features, projection expects D={model.D}")
    return X @ model.W.T + model.b


def sparsity_report(model: ProjectionModel) -> SparsityReport:
    """Density, per-row nonzeros, column norms and spectral norm of W."""
    W = model.W
    nonzero = np.abs(W) >= ZERO_TOL
    col_norms = model.col_norms
    return SparsityReport(
        density=float(nonzero.mean()),
        row_nonzeros=nonzero.sum(axis=1),
        col_norms=col_norms,
        col_norm_sum=float(col_norms.sum()),
        col_norm_max=float(col_norms.max()),
        spectral_norm=spectral_norm(W),
        alpha=float(np.abs(W).sum()),
        explained_variance=model.explained_variance,
    )
