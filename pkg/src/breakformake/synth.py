"""Synthetic content x style regression world and brute-force best-fit oracles.

The world is additive: ``Y(c, s) = W0 + T_c + S_s`` with every ``T_c`` and
``S_s`` a rank-``gt_rank`` product ``U @ V``. Inputs are isotropic standard
normal, so for any ``W`` the expected per-sample squared error is
``|W - Y|_F^2`` and operator-space Frobenius distances are exact population
quantities.

Factors ``U``, ``V`` are rounded to multiples of ``2**-20`` and ``W0`` to
multiples of ``2**-40``. Every entry of every composed target then fits in
the float64 mantissa, so sums such as ``Y(c, s) - Y(c, s')`` are computed
without rounding and ``T_c`` has rank exactly ``gt_rank`` in exact arithmetic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .matcore import as_matrix, frobenius_norm, gaussian, make_rng, matmul, power_svd
from .plp import EXACT, frozen_blocks, resolve_d

FACTOR_QUANTUM = 2.0**-20
BASE_QUANTUM = 2.0**-40
# entries of W0 + T + S on the 2**-40 grid stay exact below this magnitude
_EXACT_LIMIT = 2.0**12


def _quantize(x: np.ndarray, q: float) -> np.ndarray:
    return np.ascontiguousarray(np.round(x / q) * q)


@dataclass(frozen=True, eq=False)
class SynthTask:
    m: int
    n: int
    W0: np.ndarray
    contents: tuple
    styles: tuple
    gt_rank: int
    seed: int
    base_scale: float = 10.0

    @property
    def num_contents(self) -> int:
        return len(self.contents)

    @property
    def num_styles(self) -> int:
        return len(self.styles)

    @property
    def key(self) -> tuple:
        return (self.m, self.n, self.num_contents, self.num_styles, self.gt_rank, self.seed, self.base_scale)


@dataclass(frozen=True, eq=False)
class Batch:
    Z: np.ndarray
    X: np.ndarray
    content_id: int | None
    style_id: int | None
    noise_std: float = 0.0

    @property
    def size(self) -> int:
        return self.Z.shape[1]


def gen_task(
    m: int = 32,
    n: int = 32,
    num_contents: int = 3,
    num_styles: int = 5,
    gt_rank: int = 2,
    seed: int = 42,
    base_scale: float = 10.0,
) -> SynthTask:
    """Draw a task; ``base_scale`` is the entry stddev of the base map ``W0``.

    ``W0`` never enters a gradient (it cancels in the residual), so its scale
    only sets the denominator of the relative errors reported by ``diag``.
    """
    for name, v in (("m", m), ("n", n), ("num_contents", num_contents),
                    ("num_styles", num_styles), ("gt_rank", gt_rank)):
        if int(v) < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    if not base_scale > 0:
        raise ValueError(f"base_scale must be positive, got {base_scale}")
    if gt_rank > min(m, n):
        raise ValueError(f"gt_rank {gt_rank} exceeds min(m, n) = {min(m, n)}")
    if gt_rank > min(m, n) / 2:
        warnings.warn("gt_rank > min(m, n)/2: a rank-2*gt_rank adapter may not fit T_c + S_s", stacklevel=2)
    rng = make_rng(seed, stream=0)
    W0 = _quantize(gaussian(m, n, rng, base_scale), BASE_QUANTUM)
    std = 1.0 / math.sqrt(gt_rank)

    def lowrank() -> np.ndarray:
        U = _quantize(gaussian(m, gt_rank, rng, std), FACTOR_QUANTUM)
        V = _quantize(gaussian(gt_rank, n, rng, std), FACTOR_QUANTUM)
        if (np.abs(U) @ np.abs(V)).max() >= _EXACT_LIMIT / 4:
            raise ArithmeticError("factor magnitudes too large for exact composition")
        return matmul(U, V)

    contents = tuple(lowrank() for _ in range(num_contents))
    styles = tuple(lowrank() for _ in range(num_styles))
    peak = np.abs(W0).max() + max(np.abs(t).max() for t in contents) + max(np.abs(s).max() for s in styles)
    if peak >= _EXACT_LIMIT:
        raise ArithmeticError("base_scale too large for exact composition on the dyadic grid")
    for arr in (W0, *contents, *styles):
        arr.setflags(write=False)
    return SynthTask(m, n, W0, contents, styles, int(gt_rank), int(seed), float(base_scale))


def _check_ids(task: SynthTask, content_id: int | None, style_id: int | None) -> None:
    if content_id is not None and not 0 <= content_id < task.num_contents:
        raise IndexError(f"content id {content_id} out of range [0, {task.num_contents})")
    if style_id is not None and not 0 <= style_id < task.num_styles:
        raise IndexError(f"style id {style_id} out of range [0, {task.num_styles})")


def delta_target(task: SynthTask, content_id: int | None, style_id: int | None) -> np.ndarray:
    """``T_c + S_s``; either id may be ``None`` to drop that term."""
    _check_ids(task, content_id, style_id)
    out = np.zeros((task.m, task.n))
    if content_id is not None:
        out = out + task.contents[content_id]
    if style_id is not None:
        out = out + task.styles[style_id]
    return out


def target(task: SynthTask, content_id: int | None, style_id: int | None) -> np.ndarray:
    """Composed operator ``W0 + T_c + S_s`` (terms with ``None`` ids omitted)."""
    _check_ids(task, content_id, style_id)
    out = task.W0
    if content_id is not None:
        out = out + task.contents[content_id]
    if style_id is not None:
        out = out + task.styles[style_id]
    return np.array(out, copy=True)


def content_only_target(task: SynthTask, content_id: int) -> np.ndarray:
    return target(task, content_id, None)


def style_only_target(task: SynthTask, style_id: int) -> np.ndarray:
    return target(task, None, style_id)


def batch_from_inputs(
    task: SynthTask, content_id: int | None, style_id: int | None, Z: np.ndarray
) -> Batch:
    Z = as_matrix(Z, "Z")
    if Z.shape[0] != task.n:
        raise ValueError(f"Z must have {task.n} rows, got {Z.shape[0]}")
    return Batch(Z, matmul(target(task, content_id, style_id), Z), content_id, style_id)


def sample_batch(
    task: SynthTask,
    content_id: int | None,
    style_id: int | None,
    batch_size: int,
    rng: np.random.Generator,
    noise_std: float = 0.0,
) -> Batch:
    """Draw ``Z ~ N(0, I)`` and return ``X = Y(c, s) Z`` (+ optional target noise)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    _check_ids(task, content_id, style_id)
    b = batch_from_inputs(task, content_id, style_id, gaussian(task.n, batch_size, rng))
    if noise_std > 0:
        return Batch(b.Z, b.X + gaussian(task.m, batch_size, rng, noise_std), content_id, style_id, noise_std)
    return b


# --- oracles -------------------------------------------------------------


@dataclass(frozen=True)
class PlainRank:
    """Unstructured updates of rank at most ``r``."""

    r: int


@dataclass(frozen=True)
class PlpStructure:
    """PLP updates with the frozen blocks regenerated from ``frozen_seed``."""

    r: int
    d: int
    init_mode: str = EXACT
    frozen_seed: int = 7


@dataclass(frozen=True, eq=False)
class OracleFit:
    delta: np.ndarray
    residual: float
    converged: bool
    iterations: int = 0
    factors: tuple = ()


def fit_rank(M: np.ndarray, r: int, seed: int = 0) -> OracleFit:
    """Truncated SVD of ``M`` by power iteration with deflation."""
    U, s, Vt = power_svd(M, r, seed=seed)
    delta = (U * s) @ Vt
    return OracleFit(delta, frobenius_norm(M - delta), True, r)


def fit_plp(
    M: np.ndarray,
    A: np.ndarray,
    C: np.ndarray,
    restarts: int = 5,
    max_iter: int = 5000,
    min_iter: int = 500,
    rtol: float = 1e-12,
    seed: int = 0,
) -> OracleFit:
    """Least squares over ``B``, ``D`` with ``A``, ``C`` fixed, by alternation.

    Given ``B`` the right block column ``[A; B] D`` is an ordinary least
    squares problem in ``D``; given ``D`` the bottom block row ``B [C, D]``
    is one in ``B``. Each restart runs at least ``min_iter`` alternations and
    stops once the relative improvement of one alternation drops below
    ``rtol``; the best restart is returned. ``converged`` is False when the
    best restart hit ``max_iter`` first.
    """
    d, r = A.shape
    m, n = M.shape
    scale = max(frobenius_norm(M), 1.0) / math.sqrt(m * r)
    best: OracleFit | None = None
    for k in range(restarts):
        rng = make_rng(seed, stream=100 + k)
        B = rng.standard_normal((m - d, r)) * scale
        prev = math.inf
        converged = False
        it = 0
        for it in range(1, max_iter + 1):
            W_up = np.vstack([A, B])
            D = np.linalg.lstsq(W_up, M[:, d:], rcond=None)[0]
            W_down = np.hstack([C, D])
            B = np.linalg.lstsq(W_down.T, M[d:, :].T, rcond=None)[0].T
            delta = np.vstack([A, B]) @ np.hstack([C, D])
            err = frobenius_norm(delta - M)
            if it >= min_iter and prev - err <= rtol * max(prev, 1e-300):
                converged = True
                break
            prev = err
        fit = OracleFit(delta, err, converged, it, (B, D))
        if best is None or fit.residual < best.residual:
            best = fit
    return best


def oracle_best_fit(
    task: SynthTask,
    content_id: int | None,
    style_id: int | None,
    structure: PlainRank | PlpStructure,
    **kwargs,
) -> OracleFit:
    """Best Frobenius fit of ``T_c + S_s`` within ``structure``.

    With isotropic inputs the residual equals the square root of the excess
    expected squared prediction error of the best adapter in the class.
    """
    M = delta_target(task, content_id, style_id)
    if isinstance(structure, PlainRank):
        return fit_rank(M, structure.r, **kwargs)
    d = resolve_d(task.m, task.n, structure.d)
    A, C = frozen_blocks(d, structure.r, structure.init_mode, structure.frozen_seed)
    return fit_plp(M, A, C, **kwargs)
