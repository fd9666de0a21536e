"""Dense float64 matrix helpers with deterministic accumulation and seeded RNG.

Matrices are plain 2-D C-contiguous ``numpy.float64`` arrays. The product in
:func:`matmul` accumulates each entry left to right over the inner index with
separately rounded multiplies and adds, so it agrees bit for bit with a naive
triple loop and never depends on BLAS blocking or FMA contraction.

Random streams come from NumPy's counter-based Philox4x64-10 bit generator,
keyed by ``SeedSequence([seed, stream])``.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "philox4x64-10"

__all__ = [
    "RNG_ALGORITHM",
    "ShapeError",
    "make_rng",
    "as_matrix",
    "matmul",
    "gaussian",
    "orthonormal_columns",
    "frobenius_norm",
    "hslice",
    "vslice",
    "hconcat",
    "vconcat",
    "power_svd",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        desc = " and ".join("x".join(str(v) for v in s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a Philox generator for ``(seed, stream)``.

    Distinct ``stream`` values give statistically independent sequences for
    the same seed; identical arguments always give the identical sequence.
    """
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be non-negative")
    ss = np.random.SeedSequence([int(seed), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    return m


def matmul(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Matrix product with fixed left-to-right accumulation over the inner index.

    Each term ``lhs[i, k] * rhs[k, j]`` is rounded on its own and the terms are
    summed in order ``k = 0, 1, ...`` (a running sum, never a tree or fused
    multiply-add), so results equal a naive triple loop bit for bit.
    """
    if lhs.ndim != 2 or rhs.ndim != 2 or lhs.shape[1] != rhs.shape[0]:
        raise ShapeError("matmul", lhs.shape, rhs.shape)
    m, k = lhs.shape
    n = rhs.shape[1]
    if m * n == 1:
        # accumulate is a running sum by definition; reduce would go pairwise here
        return np.add.accumulate(lhs[0] * rhs[:, 0])[-1:].reshape(1, 1)
    # Reducing axis 0 of a C-contiguous (k, ., .) buffer adds whole slices in
    # order k = 0, 1, ...; numpy only sums pairwise along the fast axis. The
    # explicit ``out`` pins that layout, and the larger of m, n goes innermost.
    if m > n:
        terms = np.empty((k, n, m))
        np.multiply(rhs[:, :, None], lhs.T[:, None, :], out=terms)
        return np.ascontiguousarray(np.add.reduce(terms, axis=0).T)
    terms = np.empty((k, m, n))
    np.multiply(lhs.T[:, :, None], rhs[:, None, :], out=terms)
    return np.add.reduce(terms, axis=0)


def gaussian(rows: int, cols: int, rng: np.random.Generator, stddev: float = 1.0) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError(f"gaussian: dimensions must be positive, got {rows}x{cols}")
    if not stddev > 0:
        raise ValueError(f"gaussian: stddev must be positive, got {stddev}")
    return np.ascontiguousarray(rng.standard_normal((rows, cols)) * stddev)


def orthonormal_columns(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormalize a seeded Gaussian draw with modified Gram-Schmidt.

    Each column is swept twice against its predecessors, which keeps
    ``Q.T @ Q`` within a few ulps of the identity.
    """
    if cols > rows:
        raise ValueError(f"orthonormal_columns: cols ({cols}) > rows ({rows})")
    q = gaussian(rows, cols, rng).copy()
    for j in range(cols):
        v = q[:, j].copy()
        for _ in range(2):
            for i in range(j):
                v -= np.dot(q[:, i], v) * q[:, i]
        nrm = np.sqrt(np.sum(v * v))
        if nrm < 1e-12:
            raise ArithmeticError("orthonormal_columns: degenerate Gaussian draw")
        q[:, j] = v / nrm
    return np.ascontiguousarray(q)


def frobenius_norm(m: np.ndarray) -> float:
    m = np.ascontiguousarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def _check_boundary(op: str, at: int, dim: int) -> None:
    if not 0 < at < dim:
        raise ValueError(f"{op}: boundary {at} must lie strictly inside (0, {dim})")


def vslice(m: np.ndarray, at: int) -> tuple[np.ndarray, np.ndarray]:
    """Split rows into ``m[:at]`` and ``m[at:]``."""
    _check_boundary("vslice", at, m.shape[0])
    return np.ascontiguousarray(m[:at]), np.ascontiguousarray(m[at:])


def hslice(m: np.ndarray, at: int) -> tuple[np.ndarray, np.ndarray]:
    """Split columns into ``m[:, :at]`` and ``m[:, at:]``."""
    _check_boundary("hslice", at, m.shape[1])
    return np.ascontiguousarray(m[:, :at]), np.ascontiguousarray(m[:, at:])


def vconcat(top: np.ndarray, bottom: np.ndarray) -> np.ndarray:
    if top.shape[1] != bottom.shape[1]:
        raise ShapeError("vconcat", top.shape, bottom.shape)
    return np.ascontiguousarray(np.vstack([top, bottom]))


def hconcat(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    if left.shape[0] != right.shape[0]:
        raise ShapeError("hconcat", left.shape, right.shape)
    return np.ascontiguousarray(np.hstack([left, right]))


def power_svd(
    m: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 20000,
    tol: float = 1e-14,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-``k`` singular triplets by power iteration with deflation.

    Returns ``(U, s, Vt)`` with ``U`` of shape (p, k), ``s`` descending and
    ``Vt`` of shape (k, q). Each new right vector is kept orthogonal to the
    ones already found, so deflation error does not accumulate.
    """
    m = as_matrix(m)
    p, q = m.shape
    k = min(k, p, q)
    rng = make_rng(seed, stream=17)
    us, ss, vs = [], [], []
    resid = m.copy()
    floor = 1e-14 * np.linalg.norm(m)
    for _ in range(k):
        v = rng.standard_normal(q)
        for w in vs:
            v -= np.dot(w, v) * w
        v /= np.linalg.norm(v)
        # remaining spectrum is numerically zero; keep the random direction
        iters = 0 if np.linalg.norm(resid) <= floor else max_iter
        for _ in range(iters):
            v_new = resid.T @ (resid @ v)
            for w in vs:
                v_new -= np.dot(w, v_new) * w
            nv = np.linalg.norm(v_new)
            if nv == 0.0:
                break
            v_new /= nv
            step = np.linalg.norm(v_new - v)
            v = v_new
            if step <= tol:
                break
        u = resid @ v
        nu = np.linalg.norm(u)
        u = u / nu if nu > 0 else np.zeros(p)
        sigma = float(nu)
        us.append(u)
        ss.append(sigma)
        vs.append(v)
        resid = resid - sigma * np.outer(u, v)
    return np.column_stack(us), np.array(ss), np.vstack(vs)
