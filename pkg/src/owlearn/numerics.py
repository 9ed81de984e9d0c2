"""Dense float64 matrix utilities shared by every other module.

All public operations take and return plain ``numpy.ndarray`` matrices
(2-D, row-major, float64) and guarantee finite entries on output.
"""

from __future__ import annotations

import numpy as np

# Fixed seed for the power-iteration start vector so spectral norms are
# reproducible across calls and platforms.
_POWER_ITER_SEED = 0x5EED


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 generator; identical seed gives an identical stream."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={arr.ndim}")
    return arr


def check_finite(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Raises ValueError naming both shapes on an inner-dimension mismatch.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul: cannot multiply {a.shape[0]}x{a.shape[1]} by "
            f"{b.shape[0]}x{b.shape[1]} (inner dimensions {a.shape[1]} != {b.shape[0]})"
        )
    return a @ b


def frob(a: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a)))


def spectral_norm(a, iters: int = 200, tol: float = 1e-10) -> float:
    """Largest singular value via power iteration on ``a^T a``.

    Stops when the relative change of the estimate drops below ``tol`` or
    the iteration budget runs out. The start vector is drawn from a fixed
    seed so repeated calls agree bit for bit. A zero matrix returns 0.0.
    """
    a = as_matrix(a, "a")
    if a.size == 0:
        raise ValueError("spectral_norm: empty matrix")
    if iters < 1:
        raise ValueError("spectral_norm: iters must be >= 1")
    if not np.any(a):
        return 0.0
    rng = make_rng(_POWER_ITER_SEED)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        w = a @ v
        v_next = a.T @ w
        norm_next = np.linalg.norm(v_next)
        if norm_next == 0.0:
            # v landed in the null space; restart deterministically shifted
            v = rng.standard_normal(a.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = v_next / norm_next
        sigma_next = float(np.linalg.norm(a @ v))
        if abs(sigma_next - sigma) <= tol * max(1.0, sigma_next):
            return sigma_next
        sigma = sigma_next
    return sigma


def row_softmax(z) -> np.ndarray:
    """Row-wise softmax with max subtraction; every row sums to 1."""
    z = as_matrix(z, "z")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def minmax_normalize(x) -> np.ndarray:
    """Affine map of each column onto [0, 1].

    Constant columns map to 0 rather than NaN so downstream Lipschitz
    estimates stay finite. Idempotent on already-normalized input.
    """
    x = as_matrix(x, "x")
    lo = x.min(axis=0, keepdims=True)
    hi = x.max(axis=0, keepdims=True)
    span = hi - lo
    out = np.zeros_like(x)
    np.divide(x - lo, span, out=out, where=span > 0)
    return out
