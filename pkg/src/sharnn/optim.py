"""LAMB with a floor on the layer-wise trust ratio."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .config import LambConfig
from .errors import ContractError, NonFiniteError
from .tensor import Tensor


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    # trust ratio applied to each parameter on the latest step
    last_trust: dict = field(default_factory=dict)


def trust_ratio(p: np.ndarray, r: np.ndarray, min_trust: float) -> float:
    p_norm = float(np.linalg.norm(p))
    r_norm = float(np.linalg.norm(r))
    raw = p_norm / r_norm if p_norm > 0 and r_norm > 0 else 1.0
    return max(raw, min_trust)


def lamb_step(
    params: Mapping[str, Tensor],
    state: OptimizerState,
    cfg: LambConfig,
    lr: Optional[float] = None,
    grads: Optional[Mapping[str, np.ndarray]] = None,
) -> OptimizerState:
    """Apply one Min-Trust LAMB update in place.

    Gradients come from ``grads`` when given, otherwise from each tensor's
    ``.grad``.  All gradients are validated before anything is modified, so a
    non-finite gradient leaves parameters and state untouched.
    """
    lr = cfg.lr if lr is None else lr
    gs = {}
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise ContractError(f"no gradient for parameter {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        gs[name] = g

    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1**t, 1 - b2**t
    for name, p in params.items():
        g = gs[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        r = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay:
            r = r + cfg.weight_decay * p.data
        trust = trust_ratio(p.data, r, cfg.min_trust)
        state.last_trust[name] = trust
        p.data -= (lr * trust) * r.astype(p.dtype, copy=False)
    return state


def lr_schedule(epoch: int, base_lr: float, half_from_epoch: int) -> float:
    """Constant ``base_lr``, halved from ``half_from_epoch`` onwards."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr if epoch < half_from_epoch else base_lr / 2


class Lamb:
    """Thin stateful wrapper pairing a parameter dict with its optimizer state."""

    def __init__(self, params: Mapping[str, Tensor], cfg: LambConfig):
        self.params = params
        self.cfg = cfg
        self.state = OptimizerState()

    def step(self, lr: Optional[float] = None) -> None:
        lamb_step(self.params, self.state, self.cfg, lr)
