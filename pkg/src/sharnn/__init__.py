"""Byte-level LSTM language model with one attention head, built on a small numpy autodiff core."""

from .config import LambConfig, ModelConfig, TrainingConfig, parse_config, render_config
from .engine import EvalReport, bpc_to_word_ppl, evaluate_bpc, generate, train
from .model import SHARNN, count_params, fold_overparam
from .optim import OptimizerState, lamb_step, lr_schedule
from .tensor import Tape, Tensor

__all__ = [
    "EvalReport",
    "LambConfig",
    "ModelConfig",
    "OptimizerState",
    "SHARNN",
    "Tape",
    "Tensor",
    "TrainingConfig",
    "bpc_to_word_ppl",
    "count_params",
    "evaluate_bpc",
    "fold_overparam",
    "generate",
    "lamb_step",
    "lr_schedule",
    "parse_config",
    "render_config",
    "train",
]
