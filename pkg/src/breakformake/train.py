"""Losses, analytic gradients with frozen/routed blocks, and training loops.

All gradients derive from the per-batch squared error
``(1/b) |W0 Z + W_up W_down Z - X|_F^2``. With residual ``R`` and
``G = (2/b) R Z^T`` the full-factor gradients are ``G W_down^T`` and
``W_up^T G``; PLP training keeps only the ``B`` rows and ``D`` columns.

Multi-correspondence training of a content adapter draws, per step, one
primary batch ``(content, cycled style)`` whose gradient goes to ``B`` only
and ``n`` auxiliary batches ``(content, aux style)`` whose averaged gradient
goes to ``D`` only. Style training mirrors the roles.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .matcore import ShapeError, make_rng, matmul
from .plp import (
    EXACT,
    PlainLoraAdapter,
    PlpAdapter,
    block_profile,
    block_profile_of,
    forward,
    new_plain,
    new_plp,
    resolve_d,
)
from .synth import Batch, SynthTask, sample_batch

log = logging.getLogger(__name__)

ROUTINGS = ("mcp", "one-to-one", "both")
ROUTES = ("B-only", "D-only", "both")
OPTIMIZERS = ("sgd", "sgd-momentum")

# rng stream ids, one per procedure so runs never share draws
_S_CONTENT, _S_STYLE, _S_JOINT, _S_FINETUNE, _S_SINGLE = 10, 20, 30, 40, 50


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-2
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 42
    n_aux_styles: int = 3
    n_aux_contents: int = 2
    routing: str = "mcp"
    partner_id: int | None = None
    loss_weights: tuple[float, float] = (1.0, 1.0)
    rank: int = 8
    d: int | None = None
    d_ratio: float = 0.5
    init_mode: str = EXACT
    trainable_init: str = "zero-D"
    noise_std: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.routing not in ROUTINGS:
            raise ValueError(f"routing must be one of {ROUTINGS}")
        if self.routing != "one-to-one" and min(self.n_aux_styles, self.n_aux_contents) < 1:
            raise ValueError("n_aux must be >= 1 under mcp routing")

    def resolved_d(self, m: int, n: int) -> int:
        return resolve_d(m, n, self.d, self.d_ratio)


@dataclass(frozen=True, eq=False)
class Grads:
    dB: np.ndarray | None = None
    dD: np.ndarray | None = None
    dW_up: np.ndarray | None = None
    dW_down: np.ndarray | None = None


@dataclass
class TraceRecord:
    step: int
    loss: float
    content_term: float | None
    style_term: float | None
    blocks: dict = field(default_factory=dict)
    phase: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_trace(records: Iterable[TraceRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_trace(path) -> list[TraceRecord]:
    with open(path, encoding="utf-8") as fh:
        return [TraceRecord(**json.loads(line)) for line in fh if line.strip()]


# --- losses ----------------------------------------------------------------


def mse_loss(adapter, W0: np.ndarray, batch: Batch) -> float:
    R = forward(adapter, W0, batch.Z) - batch.X
    return float(np.sum(R * R)) / batch.size


def loss_joint(adapter, W0, content_batch: Batch, style_batch: Batch, weights=(1.0, 1.0)) -> float:
    w_c, w_s = weights
    return w_c * mse_loss(adapter, W0, content_batch) + w_s * mse_loss(adapter, W0, style_batch)


def loss_mcp(adapter, W0, primary_batch: Batch, aux_batches: Sequence[Batch]) -> float:
    """Primary squared error plus the mean over auxiliary partners."""
    if not aux_batches:
        raise ValueError("loss_mcp needs at least one auxiliary batch")
    aux = sum(mse_loss(adapter, W0, b) for b in aux_batches) / len(aux_batches)
    return mse_loss(adapter, W0, primary_batch) + aux


# --- gradients ---------------------------------------------------------------


def _residual(adapter, W0, batch: Batch) -> tuple[np.ndarray, np.ndarray, float]:
    """Residual ``R = forward - X`` together with ``W_down Z``, reused by the gradients."""
    if W0.shape != (adapter.m, adapter.n):
        raise ShapeError("residual(W0)", W0.shape, (adapter.m, adapter.n))
    if batch.Z.shape[0] != adapter.n or batch.X.shape != (adapter.m, batch.size):
        raise ShapeError("residual(batch)", batch.Z.shape, batch.X.shape)
    H = matmul(adapter.w_down, batch.Z)
    R = matmul(W0, batch.Z) + matmul(adapter.w_up, H) - batch.X
    return R, H, float(np.sum(R * R)) / batch.size


def grad_plp(adapter: PlpAdapter, W0, batch: Batch, route: str = "both") -> Grads:
    if route not in ROUTES:
        raise ValueError(f"route must be one of {ROUTES}")
    return _grad_plp(adapter, W0, batch, route)[0]


def _grad_plp(adapter: PlpAdapter, W0, batch: Batch, route: str) -> tuple[Grads, float]:
    # With G = (2/b) R Z^T: dB = G[d:] W_down^T = (2/b) R[d:] (W_down Z)^T and
    # dD = W_up^T G[:, d:] = (2/b) (W_up^T R) Z[d:]^T, without forming the m x n G.
    R, H, loss = _residual(adapter, W0, batch)
    scale = 2.0 / batch.size
    d = adapter.d
    dB = dD = None
    if route in ("B-only", "both"):
        dB = matmul(R[d:], np.ascontiguousarray(H.T)) * scale
    if route in ("D-only", "both"):
        UR = matmul(np.ascontiguousarray(adapter.w_up.T), R)
        dD = matmul(UR, np.ascontiguousarray(batch.Z[d:].T)) * scale
    return Grads(
        dB=np.zeros_like(adapter.B) if dB is None else dB,
        dD=np.zeros_like(adapter.D) if dD is None else dD,
    ), loss


def _grads_many(adapter: PlpAdapter, W0, batches: Sequence[Batch], routes: Sequence[str]):
    """``[_grad_plp(adapter, W0, b, r) for b, r in ...]`` with the column-wise products shared.

    ``W_down Z``, ``W0 Z``, ``W_up H`` and ``W_up^T R`` act on each column on
    its own, so one product over the stacked batches gives the same bits as
    one product per batch; only the reductions over a batch stay separate.
    """
    Z = np.hstack([b.Z for b in batches])
    X = np.hstack([b.X for b in batches])
    H = matmul(adapter.w_down, Z)
    R = matmul(W0, Z) + matmul(adapter.w_up, H) - X
    UR = matmul(adapter.w_up.T, R) if any(r != "B-only" for r in routes) else None
    d, out, lo = adapter.d, [], 0
    for batch, route in zip(batches, routes):
        cols = slice(lo, lo + batch.size)
        lo += batch.size
        Rb = R[:, cols]
        scale = 2.0 / batch.size
        dB = matmul(Rb[d:], H[:, cols].T) * scale if route != "D-only" else np.zeros_like(adapter.B)
        dD = matmul(UR[:, cols], batch.Z[d:].T) * scale if route != "B-only" else np.zeros_like(adapter.D)
        out.append((Grads(dB=dB, dD=dD), float(np.sum(Rb * Rb)) / batch.size))
    return out


def grad_plain(adapter: PlainLoraAdapter, W0, batch: Batch) -> Grads:
    return _grad_plain(adapter, W0, batch)[0]


def _grad_plain(adapter: PlainLoraAdapter, W0, batch: Batch) -> tuple[Grads, float]:
    R, H, loss = _residual(adapter, W0, batch)
    scale = 2.0 / batch.size
    UR = matmul(np.ascontiguousarray(adapter.W_up.T), R)
    return Grads(
        dW_up=matmul(R, np.ascontiguousarray(H.T)) * scale,
        dW_down=matmul(UR, np.ascontiguousarray(batch.Z.T)) * scale,
    ), loss


# --- optimizer -----------------------------------------------------------------


class Sgd:
    """Plain or heavy-ball SGD; only blocks passed to :meth:`step` move."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.momentum:
            v = self.velocity.get(name)
            v = grad if v is None else self.momentum * v + grad
            self.velocity[name] = v
            grad = v
        return param - self.lr * grad


def _optimizer(cfg: TrainConfig) -> Sgd:
    return Sgd(cfg.lr, cfg.momentum if cfg.optimizer == "sgd-momentum" else 0.0)


# --- training loops -----------------------------------------------------------------


def _partners(count: int, n_aux: int, label: str) -> None:
    if n_aux > count:
        raise ValueError(f"not enough distinct {label} ids ({count}) for n_aux={n_aux}")


def _plp_for(task: SynthTask, cfg: TrainConfig, frozen_seed: int, tag: str, stream: int) -> PlpAdapter:
    return new_plp(
        task.m, task.n, cfg.rank, cfg.resolved_d(task.m, task.n), cfg.init_mode, frozen_seed,
        cfg.trainable_init, make_rng(cfg.seed, stream), tag,
    )


def _profile(adapter) -> dict:
    if isinstance(adapter, PlpAdapter):
        return block_profile(adapter).as_dict()
    return block_profile_of(matmul(adapter.W_up, adapter.W_down), adapter.m // 2, adapter.n // 2).as_dict()


def _train_plp_side(
    task: SynthTask, primary_id: int, cfg: TrainConfig, frozen_seed: int, side: str
) -> tuple[PlpAdapter, list[TraceRecord]]:
    content_side = side == "content"
    stream = _S_CONTENT if content_side else _S_STYLE
    num_partners = task.num_styles if content_side else task.num_contents
    n_aux = cfg.n_aux_styles if content_side else cfg.n_aux_contents
    if cfg.routing != "one-to-one":
        _partners(num_partners, n_aux, "style" if content_side else "content")
    if content_side:
        task_ids = lambda k: (primary_id, k)  # noqa: E731
        w_prim, w_aux = cfg.loss_weights
        prim_route, aux_route = "B-only", "D-only"
    else:
        task_ids = lambda k: (k, primary_id)  # noqa: E731
        w_aux, w_prim = cfg.loss_weights
        prim_route, aux_route = "D-only", "B-only"
    if cfg.routing == "both":
        prim_route = aux_route = "both"

    adapter = _plp_for(task, cfg, frozen_seed, f"{side}:{primary_id}", stream)
    rng = make_rng(cfg.seed, stream + 1)
    opt = _optimizer(cfg)
    B, D = np.array(adapter.B), np.array(adapter.D)
    traces = []
    for step in range(cfg.steps):
        if cfg.routing == "one-to-one":
            partner = 0 if cfg.partner_id is None else cfg.partner_id
            batch = sample_batch(task, *task_ids(partner), cfg.batch_size, rng, cfg.noise_std)
            g, loss = _grad_plp(adapter, task.W0, batch, "both")
            dB, dD = w_prim * g.dB, w_prim * g.dD
            terms = (w_prim * loss, None)
        else:
            prim = step % num_partners
            aux_ids = [(prim + 1 + i) % num_partners for i in range(n_aux)]
            batches = [sample_batch(task, *task_ids(k), cfg.batch_size, rng, cfg.noise_std)
                       for k in [prim, *aux_ids]]
            (gp, lp), *aux = _grads_many(adapter, task.W0, batches, [prim_route] + [aux_route] * n_aux)
            la = sum(l for _, l in aux) / n_aux
            gaB = sum(g.dB for g, _ in aux) / n_aux
            gaD = sum(g.dD for g, _ in aux) / n_aux
            dB = w_prim * gp.dB + w_aux * gaB
            dD = w_prim * gp.dD + w_aux * gaD
            terms = (w_prim * lp, w_aux * la)
        loss_total = terms[0] + (terms[1] or 0.0)
        c_term, s_term = terms if content_side else terms[::-1]
        traces.append(TraceRecord(step, loss_total, c_term, s_term, _profile(adapter), side))
        B = opt.step("B", B, dB)
        D = opt.step("D", D, dD)
        adapter = adapter.with_trainable(B, D)
    log.info("%s:%d trained %d steps, final loss %.4g", side, primary_id, cfg.steps, traces[-1].loss)
    return adapter, traces


def train_content(task: SynthTask, content_id: int, cfg: TrainConfig, frozen_seed: int = 7):
    """Train a content PLP adapter; returns ``(adapter, traces)``."""
    if not 0 <= content_id < task.num_contents:
        raise IndexError(f"content id {content_id} out of range")
    return _train_plp_side(task, content_id, cfg, frozen_seed, "content")


def train_style(task: SynthTask, style_id: int, cfg: TrainConfig, frozen_seed: int = 7):
    """Train a style PLP adapter; mirror image of :func:`train_content`."""
    if not 0 <= style_id < task.num_styles:
        raise IndexError(f"style id {style_id} out of range")
    return _train_plp_side(task, style_id, cfg, frozen_seed, "style")


def _sgd_step(adapter, opt: Sgd, W0, batch: Batch, weight: float = 1.0):
    if isinstance(adapter, PlpAdapter):
        g, loss = _grad_plp(adapter, W0, batch, "both")
        B = opt.step("B", adapter.B, weight * g.dB)
        D = opt.step("D", adapter.D, weight * g.dD)
        return adapter.with_trainable(B, D), loss
    g, loss = _grad_plain(adapter, W0, batch)
    up = opt.step("W_up", adapter.W_up, weight * g.dW_up)
    down = opt.step("W_down", adapter.W_down, weight * g.dW_down)
    return replace(adapter, W_up=up, W_down=down), loss


def _new_adapter(task, cfg, kind, frozen_seed, tag, stream):
    if kind == "plain":
        return new_plain(task.m, task.n, cfg.rank, make_rng(cfg.seed, stream), tag)
    if kind == "plp-both-routes":
        return _plp_for(task, cfg, frozen_seed, tag, stream)
    raise ValueError(f"unknown adapter kind {kind!r}")


def train_joint(
    task: SynthTask,
    content_id: int,
    style_id: int,
    cfg: TrainConfig,
    adapter_kind: str = "plain",
    frozen_seed: int = 7,
):
    """Joint baseline: each step takes a content-only step, then a style-only step."""
    adapter = _new_adapter(task, cfg, adapter_kind, frozen_seed, f"joint({content_id},{style_id})", _S_JOINT)
    rng = make_rng(cfg.seed, _S_JOINT + 1)
    opt = _optimizer(cfg)
    w_c, w_s = cfg.loss_weights
    traces = []
    for step in range(cfg.steps):
        cb = sample_batch(task, content_id, None, cfg.batch_size, rng, cfg.noise_std)
        sb = sample_batch(task, None, style_id, cfg.batch_size, rng, cfg.noise_std)
        lc, ls = mse_loss(adapter, task.W0, cb), mse_loss(adapter, task.W0, sb)
        traces.append(TraceRecord(step, w_c * lc + w_s * ls, w_c * lc, w_s * ls, _profile(adapter), "joint"))
        adapter, _ = _sgd_step(adapter, opt, task.W0, cb, w_c)
        adapter, _ = _sgd_step(adapter, opt, task.W0, sb, w_s)
    return adapter, traces


def train_single(
    task: SynthTask,
    content_id: int | None,
    style_id: int | None,
    cfg: TrainConfig,
    adapter_kind: str = "plain",
    frozen_seed: int = 7,
    tag: str | None = None,
):
    """Fit one adapter to one target, e.g. content-only data for the merge baseline."""
    if tag is None:
        tag = f"single({content_id},{style_id})"
    # the two halves of a merge baseline get distinct init/data streams
    stream = _S_SINGLE + (0 if style_id is None else 4) + (0 if content_id is None else 2)
    adapter = _new_adapter(task, cfg, adapter_kind, frozen_seed, tag, stream)
    rng = make_rng(cfg.seed, stream + 1)
    opt = _optimizer(cfg)
    traces = []
    for step in range(cfg.steps):
        batch = sample_batch(task, content_id, style_id, cfg.batch_size, rng, cfg.noise_std)
        prof = _profile(adapter)
        adapter, loss = _sgd_step(adapter, opt, task.W0, batch)
        traces.append(TraceRecord(step, loss, loss if content_id is not None else None,
                                  loss if style_id is not None else None, prof, "single"))
    return adapter, traces


def finetune_combined(
    adapter: PlpAdapter,
    task: SynthTask,
    content_id: int,
    style_id: int,
    steps: int = 50,
    lr: float = 1e-2,
    batch_size: int = 8,
    seed: int = 42,
    optimizer: str = "sgd",
    momentum: float = 0.9,
):
    """Short joint ``B``+``D`` fine-tuning on composed ``(content, style)`` batches."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not adapter.tag.startswith("combined"):
        warnings.warn(f"fine-tuning an adapter tagged {adapter.tag!r}, expected a combined adapter", stacklevel=2)
    if steps == 0:
        return adapter, []
    rng = make_rng(seed, _S_FINETUNE)
    opt = Sgd(lr, momentum if optimizer == "sgd-momentum" else 0.0)
    traces = []
    for step in range(steps):
        batch = sample_batch(task, content_id, style_id, batch_size, rng)
        prof = _profile(adapter)
        adapter, loss = _sgd_step(adapter, opt, task.W0, batch)
        traces.append(TraceRecord(step, loss, None, None, prof, "finetune"))
    record = {"op": "finetune", "steps": steps, "lr": lr, "batch_size": batch_size, "seed": seed,
              "content": content_id, "style": style_id}
    return replace(adapter, history=adapter.history + (record,)), traces
