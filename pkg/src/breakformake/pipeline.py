"""End-to-end procedures: break-for-make and the two baselines it is compared to."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .plp import PlainLoraAdapter, PlpAdapter, break_adapter, delta_w, make_adapter, merge_into_base
from .synth import SynthTask
from .train import TrainConfig, finetune_combined, train_content, train_joint, train_single, train_style

FINETUNE_STEPS = 50

log = logging.getLogger(__name__)


@dataclass(eq=False)
class BreakForMake:
    content: PlpAdapter
    style: PlpAdapter
    combined: PlpAdapter
    finetuned: PlpAdapter
    traces: dict = field(default_factory=dict)
    lr_used: float | None = None


def _finite(adapters, traces) -> bool:
    return all(np.isfinite(t.loss) for ts in traces for t in ts) and all(
        np.all(np.isfinite(delta_w(a))) for a in adapters)


def _backoff(run, lr: float, max_halvings: int, label: str):
    """Call ``run(lr)`` until it reports a finite result, halving ``lr`` after each failure.

    ``run`` returns ``(result, finite)``. A run that stays finite at the
    requested rate is returned unchanged, so the policy only touches runs that
    would otherwise end in overflow.
    """
    for _ in range(max_halvings + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            result, finite = run(lr)
        if finite:
            return result, lr
        log.info("%s diverged at lr=%g, retrying at lr=%g", label, lr, lr / 2)
        lr /= 2
    raise FloatingPointError(f"{label} diverged down to lr={lr * 2:g}")


def break_for_make(
    task: SynthTask,
    content_id: int,
    style_id: int,
    cfg: TrainConfig,
    frozen_seed: int = 7,
    finetune_steps: int = FINETUNE_STEPS,
    content_cfg: TrainConfig | None = None,
    style_cfg: TrainConfig | None = None,
    max_halvings: int = 4,
) -> BreakForMake:
    """Train content and style PLPs, join content-up with style-down, fine-tune briefly.

    A run whose loss overflows is repeated from scratch at half the learning
    rate (at most ``max_halvings`` times); ``lr_used`` records the rate kept.
    """

    def run(lr):
        def at(c):
            return replace(c, lr=lr * c.lr / cfg.lr)

        content, tc = train_content(task, content_id, at(content_cfg or cfg), frozen_seed)
        style, ts = train_style(task, style_id, at(style_cfg or cfg), frozen_seed)
        up, _ = break_adapter(content)
        _, down = break_adapter(style)
        combined = make_adapter(up, down)
        finetuned, tf = finetune_combined(
            combined, task, content_id, style_id, finetune_steps, lr, cfg.batch_size, cfg.seed,
            cfg.optimizer, cfg.momentum,
        )
        out = BreakForMake(content, style, combined, finetuned, {"content": tc, "style": ts, "finetune": tf}, lr)
        return out, _finite((content, style, finetuned), (tc, ts, tf))

    return _backoff(run, cfg.lr, max_halvings, "break-for-make")[0]


def without_mcp_two(task: SynthTask, content_id: int, style_id: int, cfg: TrainConfig, frozen_seed: int = 7,
                    finetune_steps: int = FINETUNE_STEPS) -> BreakForMake:
    """Content trained one-to-one against a single non-target style, then combined as usual."""
    other = (style_id + 1) % task.num_styles
    content_cfg = replace(cfg, routing="one-to-one", partner_id=other)
    return break_for_make(task, content_id, style_id, cfg, frozen_seed, finetune_steps, content_cfg=content_cfg)


def without_mcp_one(task: SynthTask, content_id: int, style_id: int, cfg: TrainConfig,
                    frozen_seed: int = 7) -> PlpAdapter:
    """Single PLP adapter trained one-to-one on the target pair and used directly."""
    adapter, _ = train_content(task, content_id, replace(cfg, routing="one-to-one", partner_id=style_id), frozen_seed)
    return adapter


@dataclass(eq=False)
class NaiveMerge:
    merged: np.ndarray
    content: PlainLoraAdapter
    style: PlainLoraAdapter
    lambdas: tuple


def naive_merge(task: SynthTask, content_id: int, style_id: int, cfg: TrainConfig,
                lambdas: tuple = (1.0, 1.0), max_halvings: int = 4) -> NaiveMerge:
    """Two plain adapters fit separately to content-only and style-only data, then summed into ``W0``."""

    def fit(content, style, tag):
        def run(lr):
            adapter, traces = train_single(task, content, style, replace(cfg, lr=lr), "plain", tag=tag)
            return adapter, _finite((adapter,), (traces,))

        return _backoff(run, cfg.lr, max_halvings, tag)[0]

    content = fit(content_id, None, f"plain-content:{content_id}")
    style = fit(None, style_id, f"plain-style:{style_id}")
    merged = merge_into_base(task.W0, [content, style], list(lambdas))
    return NaiveMerge(merged, content, style, tuple(lambdas))


def joint_baseline(task: SynthTask, content_id: int, style_id: int, cfg: TrainConfig,
                   adapter_kind: str = "plain", frozen_seed: int = 7, max_halvings: int = 4):
    """Joint baseline; returns ``(adapter, lr_used)``.

    Alternating steps on two different targets are less stable than either
    alone, so a run whose loss turns non-finite is repeated from scratch at
    half the learning rate, at most ``max_halvings`` times.
    """

    def run(lr):
        adapter, traces = train_joint(task, content_id, style_id, replace(cfg, lr=lr), adapter_kind, frozen_seed)
        return adapter, _finite((adapter,), (traces,))

    return _backoff(run, cfg.lr, max_halvings, "joint baseline")
