"""The SHA-RNN: stacked LSTM blocks with a single cached attention head.

Block topology (per layer)::

    x -> LN -> LSTM -> [LN -> append to memory, attend, residual add] -> (+ Boom(LN(.)))

The attention head projects only the query.  Keys and values are the stored
memory entries scaled elementwise by the gate vectors ``ks`` and ``vs``, so
nothing expensive is ever recomputed over the memory.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ContractError, DataError, DimensionError
from .tensor import Tensor

LN_EPS = 1e-5


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _const(shape, value: float, dtype) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


class LayerNorm:
    def __init__(self, H: int, dtype):
        self.gain = _const(H, 1.0, dtype)
        self.bias = _const(H, 0.0, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, LN_EPS)

    def parameters(self, prefix: str) -> dict:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class LSTM:
    """Single-layer LSTM; ``W`` is the stacked [input; recurrent] matrix (2H, 4H).

    Gate column order is input, forget, output, candidate.
    """

    def __init__(self, H: int, rng: np.random.Generator, dtype):
        self.H = H
        self.W = _uniform(rng, (2 * H, 4 * H), 1 / math.sqrt(H), dtype)
        b = np.zeros(4 * H, dtype=dtype)
        b[H : 2 * H] = 1.0
        self.b = Tensor(b, requires_grad=True)

    def parameters(self, prefix: str) -> dict:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}

    def __call__(self, x_seq: Tensor, h: Tensor, c: Tensor):
        H = self.H
        w_in, w_rec = self.W[:H], self.W[H:]
        pre = T.matmul(x_seq, w_in) + self.b
        return T.lstm_sequence(pre, w_rec, h, c)


def lstm_cell_step(x: Tensor, h: Tensor, c: Tensor, params: LSTM):
    """One step of the concatenated LSTM: returns ``(h', c')``."""
    if x.shape != h.shape or h.shape != c.shape or x.shape[-1] != params.H:
        raise DimensionError(f"lstm step shapes x{x.shape} h{h.shape} c{c.shape} vs H={params.H}")
    z = T.matmul(T.concat([x, h], axis=-1), params.W) + params.b
    return T.lstm_pointwise(z, c)


class OverparamGate:
    """A static learned vector held as ``sigmoid(Wf @ v) * tanh(Wc @ v)`` while training.

    After :meth:`fold` the computed vector is frozen and the three underlying
    tensors are dropped.
    """

    def __init__(self, H: int, rng: np.random.Generator, dtype):
        bound = 1 / math.sqrt(H)
        self.base: Optional[Tensor] = _uniform(rng, H, 1.0, dtype)
        self.Wf: Optional[Tensor] = _uniform(rng, (H, H), bound, dtype)
        self.Wc: Optional[Tensor] = _uniform(rng, (H, H), bound, dtype)
        self.folded: Optional[Tensor] = None

    @property
    def is_folded(self) -> bool:
        return self.folded is not None

    def parameters(self, prefix: str) -> dict:
        if self.is_folded:
            return {}
        return {f"{prefix}.base": self.base, f"{prefix}.Wf": self.Wf, f"{prefix}.Wc": self.Wc}

    def buffers(self, prefix: str) -> dict:
        return {f"{prefix}.folded": self.folded} if self.is_folded else {}

    def __call__(self) -> Tensor:
        return overparam_gate_forward(self)

    def fold(self) -> None:
        if self.is_folded:
            raise ContractError("gate is already folded")
        self.folded = Tensor(overparam_gate_forward(self).data.copy())
        self.base = self.Wf = self.Wc = None


def overparam_gate_forward(g: OverparamGate) -> Tensor:
    if g.folded is not None:
        return g.folded
    H = g.base.shape[0]
    v = T.reshape(g.base, (H, 1))
    f = T.sigmoid(T.matmul(g.Wf, v))
    cand = T.tanh(T.matmul(g.Wc, v))
    return T.reshape(f * cand, (H,))


class Attention:
    def __init__(self, H: int, rng: np.random.Generator, dtype):
        self.H = H
        self.ln = LayerNorm(H, dtype)
        self.Wq = _uniform(rng, (H, H), 1 / math.sqrt(H), dtype)
        self.qs_gate = OverparamGate(H, rng, dtype)
        self.ks_gate = OverparamGate(H, rng, dtype)
        self.vs_gate = OverparamGate(H, rng, dtype)

    @property
    def gates(self) -> dict:
        return {"qs": self.qs_gate, "ks": self.ks_gate, "vs": self.vs_gate}

    def parameters(self, prefix: str) -> dict:
        out = self.ln.parameters(f"{prefix}.ln")
        out[f"{prefix}.Wq"] = self.Wq
        for name, g in self.gates.items():
            out.update(g.parameters(f"{prefix}.{name}"))
        return out

    def buffers(self, prefix: str) -> dict:
        out = {}
        for name, g in self.gates.items():
            out.update(g.buffers(f"{prefix}.{name}"))
        return out

    def scales(self):
        """The (qs, ks, vs) vectors; qs and ks are squashed into (0, 1)."""
        return T.sigmoid(self.qs_gate()), T.sigmoid(self.ks_gate()), self.vs_gate()


def single_head_attention(h_seq: Tensor, memory: Tensor, params: Attention, return_weights: bool = False):
    """Causal single-head attention of ``h_seq`` (T, B, H) over ``memory`` (M, B, H) then itself.

    Position t sees every memory entry plus current entries 0..t.  Returns the
    (T, B, H) output, and the (B, T, M+T) weights when ``return_weights``.
    """
    Tn, B, H = h_seq.shape
    M = memory.shape[0]
    if memory.shape[1:] != (B, H):
        raise DimensionError(f"memory {memory.shape} does not match sequence {h_seq.shape}")
    if M + Tn == 0:
        raise ContractError("attention span is empty")
    qs, ks, vs = params.scales()
    entries = T.concat([memory, h_seq], axis=0) if M else h_seq
    q = T.matmul(h_seq, params.Wq) * qs
    k = entries * ks
    v = entries * vs
    scores = T.matmul(T.transpose(q, (1, 0, 2)), T.transpose(k, (1, 2, 0))) / math.sqrt(H)
    allowed = np.arange(M + Tn)[None, :] <= (M + np.arange(Tn))[:, None]
    mask = np.where(allowed, 0.0, -np.inf).astype(scores.dtype)
    weights = T.softmax(scores + Tensor(mask), axis=-1)
    out = T.transpose(T.matmul(weights, T.transpose(v, (1, 0, 2))), (1, 0, 2))
    return (out, weights) if return_weights else out


class Boom:
    def __init__(self, H: int, N: int, rng: np.random.Generator, dtype):
        self.H, self.N = H, N
        self.W = _uniform(rng, (H, N * H), 1 / math.sqrt(H), dtype)
        self.b = _const(N * H, 0.0, dtype)

    def parameters(self, prefix: str) -> dict:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        return boom_forward(x, self.W, self.b)


def boom_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Expand H -> N*H through GeLU, then sum the N chunks back to H."""
    H = x.shape[-1]
    if W.shape[0] != H or W.shape[1] % H or b.shape != (W.shape[1],):
        raise DimensionError(f"boom weights {W.shape}/{b.shape} do not fit input width {H}")
    N = W.shape[1] // H
    u = T.gelu(T.matmul(x, W) + b)
    return T.reshape(u, x.shape[:-1] + (N, H)).sum(axis=-2)


@dataclass
class BlockState:
    h: Tensor
    c: Tensor
    # (M, B, H), oldest first
    memory: Tensor

    @property
    def batch(self) -> int:
        return self.h.shape[0]


class Block:
    def __init__(self, cfg: ModelConfig, has_attention: bool, rng: np.random.Generator, dtype):
        H = cfg.hidden
        self.H = H
        self.ln_in = LayerNorm(H, dtype)
        self.lstm = LSTM(H, rng, dtype)
        self.attn = Attention(H, rng, dtype) if has_attention else None
        self.ln_boom = LayerNorm(H, dtype)
        self.boom = Boom(H, cfg.boom_factor, rng, dtype)

    def parameters(self, prefix: str) -> dict:
        out = {}
        out.update(self.ln_in.parameters(f"{prefix}.ln_in"))
        out.update(self.lstm.parameters(f"{prefix}.lstm"))
        if self.attn is not None:
            out.update(self.attn.parameters(f"{prefix}.attn"))
        out.update(self.ln_boom.parameters(f"{prefix}.ln_boom"))
        out.update(self.boom.parameters(f"{prefix}.boom"))
        return out

    def buffers(self, prefix: str) -> dict:
        return self.attn.buffers(f"{prefix}.attn") if self.attn is not None else {}


def block_forward(block: Block, x_seq: Tensor, state: BlockState, mem_window: int, detach: bool = True):
    """Run one block over a (T, B, H) segment; returns ``(y_seq, new_state)``."""
    if state.batch != x_seq.shape[1]:
        raise ContractError(f"state batch {state.batch} != input batch {x_seq.shape[1]}; reset the state")
    hs, h, c = block.lstm(block.ln_in(x_seq), state.h, state.c)
    memory = state.memory
    if block.attn is not None:
        a = block.attn.ln(hs)
        hs = hs + single_head_attention(a, memory, block.attn)
        memory = T.concat([memory, a], axis=0) if memory.shape[0] else a
        if memory.shape[0] > mem_window:
            memory = memory[memory.shape[0] - mem_window :]
    y = hs + block.boom(block.ln_boom(hs))
    if detach:
        h, c, memory = h.detach(), c.detach(), memory.detach()
    return y, BlockState(h, c, memory)


class SHARNN:
    """Byte-level SHA-RNN with tied input/output embeddings."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.config = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        H = cfg.hidden
        self.embed = _uniform(rng, (cfg.vocab_size, H), 1 / math.sqrt(H), self.dtype)
        self.blocks = [Block(cfg, i in cfg.attn_layers, rng, self.dtype) for i in range(cfg.n_layers)]

    # ---- parameter bookkeeping
    def parameters(self) -> dict:
        out = {"embed.weight": self.embed}
        for i, b in enumerate(self.blocks):
            out.update(b.parameters(f"blocks.{i}"))
        return out

    def buffers(self) -> dict:
        out = {}
        for i, b in enumerate(self.blocks):
            out.update(b.buffers(f"blocks.{i}"))
        return out

    def state_dict(self) -> dict:
        out = {k: t.data for k, t in self.parameters().items()}
        out.update({k: t.data for k, t in self.buffers().items()})
        return out

    @property
    def gates(self) -> list:
        return [g for b in self.blocks if b.attn is not None for g in b.attn.gates.values()]

    @property
    def is_folded(self) -> bool:
        return any(g.is_folded for g in self.gates)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def load_state_dict(self, arrays: dict) -> None:
        if any(k.endswith(".folded") for k in arrays):
            for g in self.gates:
                g.base = g.Wf = g.Wc = None
                g.folded = Tensor(np.zeros(self.config.hidden, dtype=self.dtype))
        targets = {**self.parameters(), **self.buffers()}
        missing = sorted(set(targets) - set(arrays))
        extra = sorted(set(arrays) - set(targets))
        if missing or extra:
            raise ContractError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, t in targets.items():
            if arrays[k].shape != t.shape:
                raise DimensionError(f"{k}: stored shape {arrays[k].shape} vs model {t.shape}")
            t.data = np.array(arrays[k], dtype=self.dtype)

    # ---- running
    def init_states(self, batch: int) -> list:
        H = self.config.hidden
        z = lambda *s: Tensor(np.zeros(s, dtype=self.dtype))
        return [BlockState(z(batch, H), z(batch, H), z(0, batch, H)) for _ in self.blocks]

    def forward(self, ids, states=None, training: bool = False, rng=None, detach: bool = True):
        return model_forward(self, ids, states, training, rng, detach)

    __call__ = forward

    def loss(self, ids, targets, states=None, training: bool = False, rng=None):
        """Mean cross-entropy (nats) over all positions; returns ``(loss, states)``."""
        logits, states = self.forward(ids, states, training, rng)
        V = self.config.vocab_size
        return T.cross_entropy(T.reshape(logits, (-1, V)), np.asarray(targets).reshape(-1)), states


def model_forward(model: SHARNN, ids, states=None, training: bool = False, rng=None, detach: bool = True):
    """Byte ids (T, B) -> logits (T, B, vocab) and the carried block states."""
    cfg = model.config
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DimensionError(f"ids must be (T, B), got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise DataError(f"byte ids must lie in [0, {cfg.vocab_size})")
    if states is None:
        states = model.init_states(ids.shape[1])
    emb = T.dropout(model.embed, cfg.dropout_e, training, rng, mask_shape=(cfg.vocab_size, 1))
    x = T.dropout(T.embedding(emb, ids), cfg.dropout_i, training, rng)
    new_states = []
    last = len(model.blocks) - 1
    for i, (block, st) in enumerate(zip(model.blocks, states)):
        x, st = block_forward(block, x, st, cfg.mem_window, detach)
        new_states.append(st)
        if i < last:
            x = T.dropout(x, cfg.dropout_h, training, rng)
    x = T.dropout(x, cfg.dropout_o, training, rng)
    return T.matmul(x, T.transpose(model.embed, (1, 0))), new_states


def count_params(model: SHARNN) -> int:
    """Trainable scalars; the tied embedding counts once, folded gates not at all."""
    return sum(p.size for p in model.parameters().values())


def fold_overparam(model: SHARNN, inplace: bool = False) -> SHARNN:
    """Replace every over-parameterized gate by its current output vector."""
    if model.is_folded:
        raise ContractError("model is already folded")
    out = model if inplace else copy.deepcopy(model)
    for g in out.gates:
        g.fold()
    return out
