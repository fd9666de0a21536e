"""Partly learnable projection adapters with break/make composition on a synthetic task."""

from .matcore import ShapeError, frobenius_norm, make_rng, matmul
from .plp import (
    APPROX,
    EXACT,
    FrozenTamperError,
    IncompatibleFrozenError,
    PlainLoraAdapter,
    PlpAdapter,
    break_adapter,
    delta_w,
    forward,
    make_adapter,
    merge_into_base,
    new_plain,
    new_plp,
)
from .synth import gen_task, oracle_best_fit, sample_batch, target
from .train import TrainConfig, finetune_combined, train_content, train_joint, train_style
from .pipeline import break_for_make, naive_merge
from .diag import evaluate, export_params_2d

__version__ = "0.1.0"
