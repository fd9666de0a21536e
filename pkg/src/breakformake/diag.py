"""Alignment metrics, parameter-cloud export and method/ablation comparisons.

Errors are relative Frobenius distances between operators,
``|W0 + delta - ref| / |ref|``. Because task inputs are isotropic these are
the exact population analogs of sampled alignment scores. Oracle residuals
are reported on the same relative scale (divided by ``|Y(c, s)|``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .matcore import as_matrix, frobenius_norm, power_svd
from .pipeline import (
    FINETUNE_STEPS,
    break_for_make,
    joint_baseline,
    naive_merge,
    without_mcp_one,
    without_mcp_two,
)
from .plp import (
    APPROX,
    EXACT,
    BlockProfile,
    PlainLoraAdapter,
    PlpAdapter,
    block_profile,
    block_profile_of,
    delta_w,
)
from .synth import (
    OracleFit,
    PlainRank,
    PlpStructure,
    SynthTask,
    content_only_target,
    oracle_best_fit,
    style_only_target,
    target,
)
from .train import TrainConfig, finetune_combined

D_RATIO_GRID = (1 / 8, 1 / 4, 3 / 8, 1 / 2, 5 / 8, 3 / 4, 7 / 8)
FINETUNE_GRID = (0, 10, 25, 50, 100)

_ORACLE_CACHE: dict[tuple, OracleFit] = {}


def cached_oracle(task: SynthTask, content_id: int, style_id: int, structure) -> OracleFit:
    key = (task.key, content_id, style_id, structure)
    if key not in _ORACLE_CACHE:
        _ORACLE_CACHE[key] = oracle_best_fit(task, content_id, style_id, structure)
    return _ORACLE_CACHE[key]


def structure_of(adapter) -> PlainRank | PlpStructure:
    if isinstance(adapter, PlpAdapter):
        return PlpStructure(adapter.r, adapter.d, adapter.init_mode, adapter.frozen_seed)
    return PlainRank(adapter.r)


def _rel(x: np.ndarray, ref: np.ndarray) -> float:
    denom = frobenius_norm(ref)
    return frobenius_norm(x - ref) / (denom if denom > 0 else 1.0)


@dataclass
class MetricsReport:
    content_err: float
    style_err: float
    combined_err: float
    oracle_residual: float | None
    oracle_gap: float | None
    block_profile: BlockProfile
    oracle_converged: bool | None = None
    label: str = ""

    def as_dict(self) -> dict:
        out = {
            "label": self.label,
            "content_err": self.content_err,
            "style_err": self.style_err,
            "combined_err": self.combined_err,
            "oracle_residual": self.oracle_residual,
            "oracle_gap": self.oracle_gap,
            "oracle_converged": self.oracle_converged,
        }
        out.update({f"norm_{k}": v for k, v in self.block_profile.as_dict().items()})
        return out


def evaluate(
    obj,
    task: SynthTask,
    content_id: int,
    style_id: int,
    structure: PlainRank | PlpStructure | None = None,
    with_oracle: bool = True,
    label: str = "",
) -> MetricsReport:
    """Score an adapter, or a full merged weight matrix, against the task.

    For an ndarray ``obj`` (a merged ``W``) pass ``structure`` to get an
    oracle residual; otherwise the oracle fields are ``None``.
    """
    Y = target(task, content_id, style_id)
    if isinstance(obj, (PlpAdapter, PlainLoraAdapter)):
        delta = delta_w(obj)
        W = task.W0 + delta
        structure = structure or structure_of(obj)
        prof = block_profile(obj) if isinstance(obj, PlpAdapter) else block_profile_of(delta, task.m // 2, task.n // 2)
    else:
        W = as_matrix(obj, "W")
        if W.shape != task.W0.shape:
            raise ValueError(f"merged weight has shape {W.shape}, task expects {task.W0.shape}")
        prof = block_profile_of(W - task.W0, task.m // 2, task.n // 2)
    report = MetricsReport(
        content_err=_rel(W, content_only_target(task, content_id)),
        style_err=_rel(W, style_only_target(task, style_id)),
        combined_err=_rel(W, Y),
        oracle_residual=None,
        oracle_gap=None,
        block_profile=prof,
        label=label,
    )
    if with_oracle and structure is not None:
        fit = cached_oracle(task, content_id, style_id, structure)
        report.oracle_residual = fit.residual / frobenius_norm(Y)
        report.oracle_gap = report.combined_err - report.oracle_residual
        report.oracle_converged = fit.converged
    return report


# --- parameter cloud ----------------------------------------------------------


@dataclass
class Projection2D:
    rows: list[tuple[str, str, float, float]]
    explained: float

    def to_dsv(self, sep: str = ",") -> str:
        lines = [sep.join(("adapter_tag", "block_tag", "x", "y"))]
        lines += [sep.join((a, b, repr(x), repr(y))) for a, b, x, y in self.rows]
        return "\n".join(lines) + "\n"


def _block_vectors(adapter) -> list[tuple[str, np.ndarray]]:
    """Rank-indexed factor vectors: columns of up-side blocks, rows of down-side blocks."""
    if isinstance(adapter, PlpAdapter):
        groups = [("A", adapter.A.T), ("B", adapter.B.T), ("C", adapter.C), ("D", adapter.D)]
    else:
        groups = [("W_up", adapter.W_up.T), ("W_down", adapter.W_down)]
    return [(name, vec) for name, mat in groups for vec in mat]


def export_params_2d(adapters: Sequence) -> Projection2D:
    """Project every factor vector onto the top two principal directions of the pooled set.

    Vectors of different lengths are zero-padded. Directions are fixed in sign
    so that their largest-magnitude component is positive.
    """
    if not adapters:
        raise ValueError("no adapters given")
    dims = {(a.m, a.n, a.r, getattr(a, "d", None)) for a in adapters}
    if len(dims) > 1:
        raise ValueError(f"adapters disagree on dimensions: {sorted(dims, key=str)}")
    labelled = [(a.tag, name, vec) for a in adapters for name, vec in _block_vectors(a)]
    if len(labelled) < 3:
        raise ValueError("need at least 3 vectors to project")
    width = max(len(v) for _, _, v in labelled)
    X = np.zeros((len(labelled), width))
    for i, (_, _, v) in enumerate(labelled):
        X[i, : len(v)] = v
    Xc = X - X.mean(axis=0)
    _, s, Vt = power_svd(Xc, 2, seed=0)
    for k in range(Vt.shape[0]):
        if Vt[k, np.argmax(np.abs(Vt[k]))] < 0:
            Vt[k] = -Vt[k]
    coords = Xc @ Vt.T
    total = float(np.sum(Xc * Xc))
    explained = float(np.sum(s[:2] ** 2) / total) if total > 0 else 0.0
    rows = [(tag, name, float(x), float(y)) for (tag, name, _), (x, y) in zip(labelled, coords)]
    return Projection2D(rows, min(max(explained, 0.0), 1.0))


def separation_ratio(proj: Projection2D, group_a: tuple[str, str], group_b: tuple[str, str]) -> float:
    """Centroid distance between two point groups over their mean within-group spread."""
    pts = {}
    for key in (group_a, group_b):
        sel = np.array([(x, y) for a, b, x, y in proj.rows if (a, b) == key])
        if len(sel) == 0:
            raise ValueError(f"no points for {key}")
        pts[key] = sel
    ca, cb = pts[group_a].mean(axis=0), pts[group_b].mean(axis=0)
    spread = np.mean([np.linalg.norm(p - p.mean(axis=0), axis=1).mean() for p in pts.values()])
    return float(np.linalg.norm(ca - cb) / spread) if spread > 0 else math.inf


# --- comparisons -----------------------------------------------------------------


@dataclass
class ResultRow:
    arm: str
    seed: int
    report: MetricsReport
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"arm": self.arm, "seed": self.seed}
        out.update(self.report.as_dict())
        out.update(self.extra)
        return out


def compare_methods(
    task: SynthTask,
    content_id: int,
    style_id: int,
    cfg: TrainConfig = TrainConfig(),
    frozen_seed: int = 7,
    finetune_steps: int = FINETUNE_STEPS,
) -> list[ResultRow]:
    """Joint baseline, independent-then-merge baseline and break-for-make on one task."""
    rows = []
    joint, lr_used = joint_baseline(task, content_id, style_id, cfg)
    rows.append(ResultRow("joint", cfg.seed, evaluate(joint, task, content_id, style_id, label="joint"),
                          {"lr_used": lr_used}))
    nm = naive_merge(task, content_id, style_id, cfg)
    rows.append(ResultRow("naive-merge", cfg.seed, evaluate(
        nm.merged, task, content_id, style_id, structure=PlainRank(2 * cfg.rank), label="naive-merge")))
    bfm = break_for_make(task, content_id, style_id, cfg, frozen_seed, finetune_steps)
    rows.append(ResultRow("break-for-make", cfg.seed, evaluate(
        bfm.finetuned, task, content_id, style_id, label="break-for-make")))
    return rows


def _seeded(cfg: TrainConfig, seeds: Iterable[int]):
    for seed in seeds:
        yield seed, replace(cfg, seed=int(seed))


def ablate_d_ratio(task, content_id, style_id, cfg=TrainConfig(), seeds=(42,), ratios=D_RATIO_GRID,
                   frozen_seed=7, finetune_steps=FINETUNE_STEPS) -> list[ResultRow]:
    rows = []
    for seed, c in _seeded(cfg, seeds):
        for ratio in ratios:
            rc = replace(c, d=None, d_ratio=ratio)
            bfm = break_for_make(task, content_id, style_id, rc, frozen_seed, finetune_steps)
            rep = evaluate(bfm.finetuned, task, content_id, style_id, label=f"d-ratio={ratio:g}")
            rows.append(ResultRow(f"d-ratio={ratio:g}", seed, rep, {"d": bfm.finetuned.d, "ratio": ratio}))
    return rows


def ablate_mcp(task, content_id, style_id, cfg=TrainConfig(), seeds=(42,), frozen_seed=7,
               finetune_steps=FINETUNE_STEPS) -> list[ResultRow]:
    rows = []
    for seed, c in _seeded(cfg, seeds):
        with_mcp = break_for_make(task, content_id, style_id, c, frozen_seed, finetune_steps).finetuned
        one = without_mcp_one(task, content_id, style_id, c, frozen_seed)
        two = without_mcp_two(task, content_id, style_id, c, frozen_seed, finetune_steps).finetuned
        for arm, ad in (("with-MCP", with_mcp), ("w/o-MCP-I", one), ("w/o-MCP-II", two)):
            rows.append(ResultRow(arm, seed, evaluate(ad, task, content_id, style_id, label=arm)))
    return rows


def ablate_orthogonality(task, content_id, style_id, cfg=TrainConfig(), seeds=(42,), frozen_seed=7,
                         finetune_steps=FINETUNE_STEPS) -> list[ResultRow]:
    rows = []
    for seed, c in _seeded(cfg, seeds):
        for arm, mode in (("orthogonal", EXACT), ("random-fixed", APPROX)):
            ad = break_for_make(task, content_id, style_id, replace(c, init_mode=mode), frozen_seed,
                                finetune_steps).finetuned
            rows.append(ResultRow(arm, seed, evaluate(ad, task, content_id, style_id, label=arm),
                                  {"init_mode": mode, "leakage": ad.leakage}))
    return rows


def ablate_finetune(task, content_id, style_id, cfg=TrainConfig(), seeds=(42,), frozen_seed=7,
                    grid=FINETUNE_GRID) -> list[ResultRow]:
    rows = []
    for seed, c in _seeded(cfg, seeds):
        base = break_for_make(task, content_id, style_id, c, frozen_seed, finetune_steps=0)
        for steps in grid:
            ad, _ = finetune_combined(base.combined, task, content_id, style_id, steps, c.lr, c.batch_size,
                                      c.seed, c.optimizer, c.momentum)
            rows.append(ResultRow(f"finetune={steps}", seed, evaluate(ad, task, content_id, style_id,
                                                                       label=f"finetune={steps}"),
                                  {"finetune_steps": steps}))
    return rows


ABLATIONS = {
    "d-ratio": ablate_d_ratio,
    "mcp": ablate_mcp,
    "orthogonality": ablate_orthogonality,
    "finetune": ablate_finetune,
}


def format_table(rows: Sequence[ResultRow]) -> str:
    cols = ("arm", "seed", "combined_err", "content_err", "style_err", "oracle_residual", "oracle_gap",
            "norm_ul", "norm_ur", "norm_dl", "norm_dr")
    dicts = [r.as_dict() for r in rows]

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return "-" if v is None else str(v)

    cells = [cols] + [tuple(fmt(d.get(c)) for c in cols) for d in dicts]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells) + "\n"


def format_jsonl(rows: Sequence[ResultRow]) -> str:
    return "".join(json.dumps(r.as_dict(), sort_keys=True) + "\n" for r in rows)
