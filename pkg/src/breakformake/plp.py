"""Partly learnable projection (PLP) adapters and the break/make algebra.

A PLP adapter splits the low-rank factors of ``delta_w = W_up @ W_down``
along the feature dimension::

    W_up   = [A]   (d x r, frozen)        W_down = [C | D]
             [B]   ((m-d) x r, trained)            (r x d frozen, r x (n-d) trained)

so that ``delta_w = [[A C, A D], [B C, B D]]``. With frozen blocks whose
product ``A C`` vanishes, the top-left block of the update is identically
zero, ``A D`` only depends on ``D`` and ``B C`` only on ``B``.

Two constructions of the frozen blocks are supported:

``exact-disjoint``
    ``A`` uses rank indices ``[0, r/2)`` and ``C`` uses ``[r/2, r)``; the
    live parts are orthonormalized. ``A @ C`` is exactly zero entry by entry.

``approximate-random``
    ``A`` and ``C`` are independent Gaussians scaled by ``1/sqrt(r)``. The
    product is only small relative to ``|A| |C|``; the measured leakage is
    recorded on the adapter.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .matcore import (
    ShapeError,
    frobenius_norm,
    gaussian,
    hconcat,
    make_rng,
    matmul,
    orthonormal_columns,
    vconcat,
)

EXACT = "exact-disjoint"
APPROX = "approximate-random"
INIT_MODES = (EXACT, APPROX)
TRAINABLE_INITS = ("zero-D", "zero-B", "gaussian-both")

# 2x the largest |AC| / (|A| |C|) * sqrt(r) seen over 20 seeds at
# (m, n, r, d) = (64, 64, 8, 32); the typical value is 1.0.
APPROX_EPS_SCALE = 2.1
TRAINABLE_STD = 0.02


class IncompatibleFrozenError(ValueError):
    """Halves were built on different frozen subspaces."""


class FrozenTamperError(ValueError):
    """Frozen blocks differ from their seed regeneration or break the orthogonality bound."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    """Read-only float64 view; writable inputs are copied so the caller keeps its own array."""
    if isinstance(arr, np.ndarray) and arr.dtype == np.float64 and arr.flags.c_contiguous and not arr.flags.writeable:
        return arr
    arr = np.array(arr, dtype=np.float64, order="C", copy=True)
    arr.setflags(write=False)
    return arr


def same_bits(x: np.ndarray, y: np.ndarray) -> bool:
    """Bitwise equality (distinguishes -0.0 from 0.0, NaN payloads match)."""
    return x.shape == y.shape and x.dtype == y.dtype and x.tobytes() == y.tobytes()


def default_eps_orth(init_mode: str, r: int) -> float:
    return 0.0 if init_mode == EXACT else APPROX_EPS_SCALE / math.sqrt(r)


def frozen_blocks(d: int, r: int, init_mode: str, frozen_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Regenerate the frozen ``(A, C)`` pair; depends only on ``(d, r, mode, seed)``."""
    rng = make_rng(frozen_seed, stream=1)
    if init_mode == EXACT:
        if r % 2:
            raise ValueError(f"exact-disjoint mode needs an even rank, got r={r}")
        h = r // 2
        A = np.zeros((d, r))
        C = np.zeros((r, d))
        # orthonormal columns when they fit in R^d, orthonormal rows otherwise
        A[:, :h] = orthonormal_columns(d, h, rng) if h <= d else orthonormal_columns(h, d, rng).T
        C[h:, :] = orthonormal_columns(d, h, rng).T if h <= d else orthonormal_columns(h, d, rng)
    elif init_mode == APPROX:
        A = gaussian(d, r, rng) / math.sqrt(r)
        C = gaussian(r, d, rng) / math.sqrt(r)
    else:
        raise ValueError(f"unknown init_mode {init_mode!r}; expected one of {INIT_MODES}")
    return _frozen(A), _frozen(C)


def orth_leakage(A: np.ndarray, C: np.ndarray) -> float:
    """``|A C| / (|A| |C|)``, zero when either factor vanishes."""
    denom = frobenius_norm(A) * frobenius_norm(C)
    return frobenius_norm(matmul(A, C)) / denom if denom > 0 else 0.0


@dataclass(frozen=True, eq=False)
class PlpAdapter:
    m: int
    n: int
    r: int
    d: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    init_mode: str = EXACT
    frozen_seed: int = 7
    tag: str = ""
    eps_orth: float = 0.0
    history: tuple = ()

    def __post_init__(self):
        m, n, r, d = self.m, self.n, self.r, self.d
        expect = {"A": (d, r), "B": (m - d, r), "C": (r, d), "D": (r, n - d)}
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"PlpAdapter.{name}", arr.shape, shape)
            object.__setattr__(self, name, _frozen(arr))

    @property
    def w_up(self) -> np.ndarray:
        return vconcat(self.A, self.B)

    @property
    def w_down(self) -> np.ndarray:
        return hconcat(self.C, self.D)

    @property
    def trainable_count(self) -> int:
        return (self.m - self.d) * self.r + self.r * (self.n - self.d)

    @property
    def leakage(self) -> float:
        return orth_leakage(self.A, self.C)

    def with_trainable(self, B: np.ndarray, D: np.ndarray, **changes) -> "PlpAdapter":
        return replace(self, B=B, D=D, **changes)


@dataclass(frozen=True, eq=False)
class PlainLoraAdapter:
    m: int
    n: int
    r: int
    W_up: np.ndarray
    W_down: np.ndarray
    tag: str = ""
    history: tuple = ()

    def __post_init__(self):
        if self.W_up.shape != (self.m, self.r):
            raise ShapeError("PlainLoraAdapter.W_up", self.W_up.shape, (self.m, self.r))
        if self.W_down.shape != (self.r, self.n):
            raise ShapeError("PlainLoraAdapter.W_down", self.W_down.shape, (self.r, self.n))
        object.__setattr__(self, "W_up", _frozen(self.W_up))
        object.__setattr__(self, "W_down", _frozen(self.W_down))

    @property
    def w_up(self) -> np.ndarray:
        return self.W_up

    @property
    def w_down(self) -> np.ndarray:
        return self.W_down

    @property
    def trainable_count(self) -> int:
        return self.m * self.r + self.r * self.n


Adapter = Union[PlpAdapter, PlainLoraAdapter]


@dataclass(frozen=True)
class BlockProfile:
    norm_ul: float
    norm_ur: float
    norm_dl: float
    norm_dr: float

    def as_dict(self) -> dict[str, float]:
        return {"ul": self.norm_ul, "ur": self.norm_ur, "dl": self.norm_dl, "dr": self.norm_dr}


@dataclass(frozen=True, eq=False)
class UpHalf:
    m: int
    n: int
    r: int
    d: int
    A: np.ndarray
    B: np.ndarray
    init_mode: str
    frozen_seed: int
    eps_orth: float
    tag: str
    history: tuple = field(default=())


@dataclass(frozen=True, eq=False)
class DownHalf:
    m: int
    n: int
    r: int
    d: int
    C: np.ndarray
    D: np.ndarray
    init_mode: str
    frozen_seed: int
    eps_orth: float
    tag: str
    history: tuple = field(default=())


def resolve_d(m: int, n: int, d: int | None = None, d_ratio: float | None = None) -> int:
    """Frozen feature count; defaults to half of ``min(m, n)``."""
    if d is None:
        d = int(math.floor((0.5 if d_ratio is None else d_ratio) * min(m, n)))
    if not 1 <= d < min(m, n):
        raise ValueError(f"d must satisfy 1 <= d < min(m, n) = {min(m, n)}, got {d}")
    return d


def new_plp(
    m: int,
    n: int,
    r: int,
    d: int | None = None,
    init_mode: str = EXACT,
    frozen_seed: int = 7,
    trainable_init: str = "zero-D",
    rng: np.random.Generator | None = None,
    tag: str = "",
    eps_orth: float | None = None,
) -> PlpAdapter:
    if m < 2 or n < 2 or r < 1:
        raise ValueError(f"invalid dimensions m={m}, n={n}, r={r}")
    d = resolve_d(m, n, d)
    if init_mode == EXACT and r % 2:
        raise ValueError(f"exact-disjoint mode needs an even rank, got r={r}")
    if r > min(d, m - d, n - d):
        warnings.warn(
            f"rank {r} exceeds min(d, m-d, n-d) = {min(d, m - d, n - d)}; blocks are rank-limited",
            stacklevel=2,
        )
    if trainable_init not in TRAINABLE_INITS:
        raise ValueError(f"unknown trainable_init {trainable_init!r}; expected one of {TRAINABLE_INITS}")
    A, C = frozen_blocks(d, r, init_mode, frozen_seed)
    if rng is None:
        rng = make_rng(frozen_seed, stream=2)
    B = np.zeros((m - d, r))
    D = np.zeros((r, n - d))
    if trainable_init in ("zero-D", "gaussian-both"):
        B = gaussian(m - d, r, rng, TRAINABLE_STD)
    if trainable_init in ("zero-B", "gaussian-both"):
        D = gaussian(r, n - d, rng, TRAINABLE_STD)
    eps = default_eps_orth(init_mode, r) if eps_orth is None else float(eps_orth)
    leak = orth_leakage(A, C)
    if leak > eps:
        raise ValueError(f"frozen leakage {leak:.4g} exceeds eps_orth {eps:.4g}; choose another frozen_seed")
    return PlpAdapter(m, n, r, d, A, B, C, D, init_mode, int(frozen_seed), tag, eps)


def new_plain(
    m: int,
    n: int,
    r: int,
    rng: np.random.Generator,
    tag: str = "",
    std: float = TRAINABLE_STD,
) -> PlainLoraAdapter:
    """Plain adapter with a small Gaussian up-projection and a zero down-projection."""
    if m < 1 or n < 1 or r < 1:
        raise ValueError(f"invalid dimensions m={m}, n={n}, r={r}")
    return PlainLoraAdapter(m, n, r, gaussian(m, r, rng, std), np.zeros((r, n)), tag)


def delta_w(adapter: Adapter) -> np.ndarray:
    """Materialized update; PLP adapters are assembled block by block."""
    if isinstance(adapter, PlainLoraAdapter):
        return matmul(adapter.W_up, adapter.W_down)
    a = adapter
    top = hconcat(matmul(a.A, a.C), matmul(a.A, a.D))
    bottom = hconcat(matmul(a.B, a.C), matmul(a.B, a.D))
    return vconcat(top, bottom)


def forward(adapter: Adapter, W0: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """``W0 Z + W_up (W_down Z)`` without forming the m x n update."""
    if W0.shape != (adapter.m, adapter.n):
        raise ShapeError("forward(W0)", W0.shape, (adapter.m, adapter.n))
    if Z.ndim != 2 or Z.shape[0] != adapter.n:
        raise ShapeError("forward(Z)", Z.shape, (adapter.n, -1))
    return matmul(W0, Z) + matmul(adapter.w_up, matmul(adapter.w_down, Z))


def break_adapter(adapter: PlpAdapter) -> tuple[UpHalf, DownHalf]:
    a = adapter
    common = dict(
        m=a.m, n=a.n, r=a.r, d=a.d, init_mode=a.init_mode, frozen_seed=a.frozen_seed,
        eps_orth=a.eps_orth, tag=a.tag, history=a.history,
    )
    return UpHalf(A=a.A, B=a.B, **common), DownHalf(C=a.C, D=a.D, **common)


def check_frozen(A: np.ndarray, C: np.ndarray, d: int, r: int, init_mode: str, frozen_seed: int) -> None:
    """Raise :class:`FrozenTamperError` unless ``A``/``C`` match their seed regeneration."""
    A_ref, C_ref = frozen_blocks(d, r, init_mode, frozen_seed)
    if not same_bits(A, A_ref) or not same_bits(C, C_ref):
        raise FrozenTamperError("corrupt or tampered frozen blocks")


def make_adapter(up: UpHalf, down: DownHalf, tag: str | None = None) -> PlpAdapter:
    """Join an up half and a down half that share frozen blocks.

    Halves of the same parent (equal tag and history) reproduce that parent
    exactly; otherwise the result is tagged ``combined(<up>,<down>)``.
    """
    if (up.m, up.n, up.r, up.d) != (down.m, down.n, down.r, down.d):
        raise ShapeError("make_adapter", (up.m, up.n, up.r, up.d), (down.m, down.n, down.r, down.d))
    if up.frozen_seed != down.frozen_seed or up.init_mode != down.init_mode:
        raise IncompatibleFrozenError(
            f"incompatible frozen subspaces: up ({up.init_mode}, seed {up.frozen_seed}) "
            f"vs down ({down.init_mode}, seed {down.frozen_seed})"
        )
    check_frozen(up.A, down.C, up.d, up.r, up.init_mode, up.frozen_seed)
    same_parent = up.tag == down.tag and up.history == down.history
    if tag is None:
        tag = up.tag if same_parent else f"combined({up.tag},{down.tag})"
    history = up.history if same_parent else ({"op": "combine", "up": up.tag, "down": down.tag},)
    return PlpAdapter(
        up.m, up.n, up.r, up.d, up.A, up.B, down.C, down.D,
        up.init_mode, up.frozen_seed, tag, max(up.eps_orth, down.eps_orth), history,
    )


def merge_into_base(W0: np.ndarray, adapters: Sequence[Adapter], lambdas: Sequence[float]) -> np.ndarray:
    """Weighted sum ``W0 + sum_i lambda_i delta_w_i``."""
    if len(adapters) != len(lambdas):
        raise ValueError(f"got {len(adapters)} adapters but {len(lambdas)} lambdas")
    out = np.array(W0, dtype=np.float64, copy=True)
    for lam, ad in zip(lambdas, adapters):
        dw = delta_w(ad)
        if dw.shape != out.shape:
            raise ShapeError("merge_into_base", out.shape, dw.shape)
        out = out + float(lam) * dw
    return out


def block_profile_of(delta: np.ndarray, d: int, d_cols: int | None = None) -> BlockProfile:
    """Frobenius norms of the four blocks of ``delta`` split at row ``d`` and column ``d_cols``."""
    d_cols = d if d_cols is None else d_cols
    return BlockProfile(
        frobenius_norm(delta[:d, :d_cols]),
        frobenius_norm(delta[:d, d_cols:]),
        frobenius_norm(delta[d:, :d_cols]),
        frobenius_norm(delta[d:, d_cols:]),
    )


def block_profile(adapter: PlpAdapter) -> BlockProfile:
    # one product; each block of W_up W_down is entrywise the same as its own AC, AD, BC, BD
    return block_profile_of(matmul(adapter.w_up, adapter.w_down), adapter.d)
