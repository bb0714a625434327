"""
Dense linear algebra and elementary operators used across the toolkit.

Matrices and vectors are plain ``numpy`` float64 arrays. Every function here is
pure except the random draws, which advance only the generator handed in.

Random streams come from :class:`SeededRng`, a thin wrapper around numpy's
``Philox`` bit generator (Philox-4x64-10, a counter-based generator with a
published specification). Identical seeds give identical streams on every
platform numpy supports.
"""

import logging
from typing import Tuple

import numpy as np

from errors import DimensionError, ParameterError

logger = logging.getLogger(__name__)

Mat = np.ndarray
Vec = np.ndarray

SYMMETRY_TOL = 1e-10
SPECTRAL_TOL = 1e-9
SPECTRAL_MAX_ITERS = 20000
EXACT_GRAM_LIMIT = 2048
RITZ_BLOCK = 8
# Seed of the fixed start vector for power iteration.
_POWER_START_SEED = 0x5EED


def as_matrix(a, name: str = "matrix") -> Mat:
    """Converts ``a`` to a finite float64 2-D array or raises DimensionError."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ParameterError(f"{name} contains non-finite entries")
    return m


def as_vector(a, name: str = "vector") -> Vec:
    """Converts ``a`` to a finite float64 1-D array or raises DimensionError."""
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ParameterError(f"{name} contains non-finite entries")
    return v


class SeededRng:
    """Reproducible random source: Philox-4x64 keyed by a 64-bit seed."""

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ParameterError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.Philox(self.seed))

    def spawn(self, *keys: int) -> "SeededRng":
        """Derives an independent child generator from this seed and ``keys``."""
        mixed = np.random.SeedSequence([self.seed, *(int(k) for k in keys)]).generate_state(1, np.uint64)[0]
        return SeededRng(int(mixed))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"


def rng_uniform(rng: SeededRng, lo: float, hi: float, n: int) -> Vec:
    """Draws ``n`` samples uniformly from ``[lo, hi)``."""
    if not lo <= hi:
        raise ParameterError(f"invalid uniform range [{lo}, {hi}]")
    if n < 0:
        raise ParameterError(f"sample count must be non-negative, got {n}")
    if lo == hi:
        return np.full(n, float(lo))
    return rng.generator.uniform(lo, hi, size=n)


def rng_normal(rng: SeededRng, mean: float, std: float, n: int) -> Vec:
    """Draws ``n`` Gaussian samples."""
    if std < 0:
        raise ParameterError(f"standard deviation must be non-negative, got {std}")
    if n < 0:
        raise ParameterError(f"sample count must be non-negative, got {n}")
    if std == 0:
        return np.full(n, float(mean))
    return rng.generator.normal(mean, std, size=n)


def _sign_fix(vectors: Mat) -> Mat:
    """Flips each column so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sym_eig(S: Mat) -> Tuple[Vec, Mat]:
    """
    Eigendecomposition of a real symmetric matrix.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns. Ties are broken by the row index of each vector's
    largest-magnitude entry, and each vector is signed so that entry is positive.
    """
    S = as_matrix(S, "S")
    if S.shape[0] != S.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if S.size and np.max(np.abs(S - S.T)) > SYMMETRY_TOL * scale:
        raise DimensionError("sym_eig needs a symmetric matrix")
    if S.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 0))

    values, vectors = np.linalg.eigh(0.5 * (S + S.T))
    vectors = _sign_fix(vectors)
    lead = np.argmax(np.abs(vectors), axis=0)
    # round to group numerically tied eigenvalues before the secondary key
    tie_key = np.round(values / scale, 12)
    order = np.lexsort((lead, -tie_key))
    return values[order], vectors[:, order]


def top_eigenvalue(gram: Mat, tol: float = SPECTRAL_TOL, max_iters: int = SPECTRAL_MAX_ITERS) -> float:
    """
    Largest eigenvalue of a symmetric positive semidefinite matrix by power iteration.

    Iteration stops once the residual ``||G v - lam v||_2`` drops to ``tol * lam``.
    The estimate is then polished by Rayleigh-Ritz on the Krylov block spanned by
    the final vector, which recovers the top eigenvalue of tightly clustered spectra
    where the residual test alone cannot be met within ``max_iters``.
    """
    gram = as_matrix(gram, "gram")
    n = gram.shape[0]
    if n == 0 or not np.any(gram):
        return 0.0

    start = np.random.Generator(np.random.Philox(_POWER_START_SEED)).standard_normal(n)
    v = start / np.linalg.norm(start)
    lam = 0.0
    for _ in range(max_iters):
        gv = gram @ v
        lam = float(v @ gv)
        if np.linalg.norm(gv - lam * v) <= tol * abs(lam):
            break
        norm = np.linalg.norm(gv)
        if norm == 0.0:
            return 0.0
        v = gv / norm
    else:
        logger.debug("top_eigenvalue: power iteration hit %d iterations", max_iters)

    block = [v]
    for _ in range(min(RITZ_BLOCK, n) - 1):
        block.append(gram @ block[-1])
    q, _ = np.linalg.qr(np.column_stack(block))
    ritz = float(np.linalg.eigvalsh(q.T @ gram @ q)[-1])
    return max(lam, ritz, 0.0)


def spectral_norm(W: Mat, tol: float = SPECTRAL_TOL, max_iters: int = SPECTRAL_MAX_ITERS) -> float:
    """
    Largest singular value of ``W``.

    Works on the smaller Gram matrix. Up to EXACT_GRAM_LIMIT rows it is
    diagonalized directly; larger ones go through :func:`top_eigenvalue`.
    """
    W = as_matrix(W, "W")
    if W.size == 0:
        raise DimensionError("spectral_norm needs a non-empty matrix")
    gram = W @ W.T if W.shape[0] <= W.shape[1] else W.T @ W
    if not np.any(gram):
        return 0.0
    if gram.shape[0] <= EXACT_GRAM_LIMIT:
        lam = float(np.linalg.eigvalsh(0.5 * (gram + gram.T))[-1])
    else:
        lam = top_eigenvalue(gram, tol, max_iters)
    return float(np.sqrt(max(lam, 0.0)))


def soft_threshold(v: Vec, lam: float) -> Vec:
    """Entrywise ``sign(v) * max(|v| - lam, 0)``."""
    if lam < 0:
        raise ParameterError(f"threshold must be non-negative, got {lam}")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0)
