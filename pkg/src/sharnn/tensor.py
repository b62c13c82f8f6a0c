"""A small define-by-run reverse-mode autodiff over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.backward`` replays them in exact reverse.  Outside a tape every op
is a plain numpy computation, which is what evaluation and generation use.

Only the broadcasting the model needs is supported: elementwise ops
broadcast numpy-style, and gradients are summed back to the input shape.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, ContractError, DimensionError

_TAPES: list["Tape"] = []


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating) and not np.issubdtype(data.dtype, np.integer):
            raise TypeError(f"unsupported dtype {data.dtype}")
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of executed ops.

    Each record is ``(outputs, inputs, backward_fn)``; ``backward_fn`` takes
    one gradient per output and returns one gradient (or None) per input.
    """

    def __init__(self):
        self.records: list[tuple[tuple[Tensor, ...], tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        for outs, _, _ in self.records:
            for o in outs:
                o._tape = None
        self.records = []

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        loss.grad = np.ones_like(loss.data)
        for outs, ins, fn in reversed(self.records):
            grads = [o.grad for o in outs]
            if all(g is None for g in grads):
                continue
            if len(outs) == 1:
                in_grads = fn(grads[0])
            else:
                grads = [np.zeros_like(o.data) if g is None else g for o, g in zip(outs, grads)]
                in_grads = fn(*grads)
            for t, g in zip(ins, in_grads):
                if g is None or not t.requires_grad:
                    continue
                t.grad = g if t.grad is None else t.grad + g


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the loss's tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not produced on an active tape")
    loss._tape.backward(loss)


def _record(outs, ins: Sequence[Tensor], fn: Callable):
    """Wrap output arrays as tensors, recording them if any input needs grad."""
    single = not isinstance(outs, (tuple, list))
    arrays = (np.asarray(outs),) if single else tuple(outs)
    tensors = tuple(Tensor(a) for a in arrays)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in ins):
        for t in tensors:
            t.requires_grad = True
            t._tape = tape
        tape.records.append((tensors, tuple(ins), fn))
    return tensors[0] if single else list(tensors)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _wrap(a, None)
    b = _wrap(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record(a.data * a.dtype.type(s), (a,), lambda g: (g * s,))


def mul(a, b) -> Tensor:
    a = _wrap(a, None)
    b = _wrap(b, a.dtype)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), fn)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1 - y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp of -|z| only, so neither branch overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    xd = x.data
    cdf = ndtr(xd)

    def fn(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2 * math.pi)
        return (g * (cdf + xd * pdf),)

    return _record(xd * cdf, (x,), fn)


# -------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def fn(g):
        out = np.zeros(shape, dtype=dtype)
        if _fancy(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _record(x.data[idx], (x,), fn)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _record(
        np.concatenate([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    n = len(xs)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(np.stack([t.data for t in xs], axis=axis), xs, fn)


def unbind(x: Tensor, axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into views, recorded as a single multi-output op."""
    parts = [np.take(x.data, i, axis=axis) for i in range(x.shape[axis])]
    return _record(parts, (x,), lambda *gs: (np.stack(gs, axis=axis),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / n)


# --------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and ``b`` of (k, n) or (..., k, n)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    # (..., m, k) @ (k, n) as one 2-D product; numpy would otherwise loop over the batch
    flat = bd.ndim == 2 and ad.ndim > 2

    def fn(g):
        if flat:
            ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],)) if flat else ad @ bd
    return _record(out, (a, b), fn)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather ``weight[ids]``; the gradient scatters back by addition."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"ids outside [0, {weight.shape[0]})")
    wshape, wdtype = weight.shape, weight.dtype

    def fn(g):
        out = np.zeros(wshape, dtype=wdtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, wshape[-1]))
        return (out,)

    return _record(weight.data[ids], (weight,), fn)


# ---------------------------------------------------------------- normalizers


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = softmax_np(x.data, axis)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), fn)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood in nats over rows of ``logits`` (N, V)."""
    targets = np.asarray(targets).reshape(-1)
    lp = log_softmax_np(logits.data, axis=-1)
    n = lp.shape[0]
    rows = np.arange(n)
    loss = -lp[rows, targets].mean()

    def fn(g):
        d = np.exp(lp)
        d[rows, targets] -= 1
        return (d * (g / n),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine {gain.shape}/{bias.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        red = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record(xhat * gd + bias.data, (x, gain, bias), fn)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator], mask_shape=None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or not training.

    ``mask_shape`` lets a mask broadcast, e.g. ``(V, 1)`` drops whole rows.
    """
    if not 0 <= p < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    keep = rng.random(mask_shape or x.shape) >= p
    return mul(x, Tensor((keep / (1 - p)).astype(x.dtype)))


# ------------------------------------------------------------------- fused ops


def lstm_pointwise(z: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """LSTM update from pre-activations ``z`` = [i | f | o | g] (B, 4H).

    Returns ``(h', c')`` with ``c' = f*c + i*g`` and ``h' = o*tanh(c')``.
    """
    H = c.shape[-1]
    if z.shape[-1] != 4 * H:
        raise DimensionError(f"lstm pre-activations {z.shape} do not match cell {c.shape}")
    zd = z.data
    sig = _sigmoid(zd[..., : 3 * H])
    i, f, o = sig[..., :H], sig[..., H : 2 * H], sig[..., 2 * H :]
    gg = np.tanh(zd[..., 3 * H :])
    cd = c.data
    c2 = f * cd + i * gg
    tc = np.tanh(c2)
    h2 = o * tc

    def fn(dh, dc2):
        dct = dc2 + dh * o * (1 - tc * tc)
        dz = np.concatenate(
            [
                dct * gg * i * (1 - i),
                dct * cd * f * (1 - f),
                dh * tc * o * (1 - o),
                dct * i * (1 - gg * gg),
            ],
            axis=-1,
        )
        return dz, dct * f

    h, cn = _record((h2, c2), (z, c), fn)
    return h, cn


def lstm_sequence(pre: Tensor, w_rec: Tensor, h0: Tensor, c0: Tensor):
    """Run the LSTM recurrence over precomputed input projections.

    ``pre`` is (T, B, 4H): input projection plus bias per step.  Returns
    ``(hs, h_T, c_T)`` with ``hs`` of shape (T, B, H).  Equivalent to chaining
    :func:`lstm_pointwise` over ``pre[t] + h @ w_rec``, but the recurrent
    weight gradient is formed with a single matrix product.
    """
    Tn, B, H4 = pre.shape
    H = H4 // 4
    if w_rec.shape != (H, H4) or h0.shape != (B, H) or c0.shape != (B, H):
        raise DimensionError(f"lstm shapes pre{pre.shape} w{w_rec.shape} h{h0.shape} c{c0.shape}")
    dtype = pre.dtype
    W = w_rec.data
    sig = np.empty((Tn, B, 3 * H), dtype=dtype)
    gg = np.empty((Tn, B, H), dtype=dtype)
    cs = np.empty((Tn + 1, B, H), dtype=dtype)
    tcs = np.empty((Tn, B, H), dtype=dtype)
    hs = np.empty((Tn + 1, B, H), dtype=dtype)
    hs[0], cs[0] = h0.data, c0.data
    for t in range(Tn):
        z = pre.data[t] + hs[t] @ W
        s = sig[t] = _sigmoid(z[:, : 3 * H])
        g = gg[t] = np.tanh(z[:, 3 * H :])
        c = cs[t + 1] = s[:, H : 2 * H] * cs[t] + s[:, :H] * g
        tc = tcs[t] = np.tanh(c)
        hs[t + 1] = s[:, 2 * H :] * tc

    def fn(dhs, dhT, dcT):
        dz = np.empty((Tn, B, H4), dtype=dtype)
        dh, dc = dhT.copy(), dcT.copy()
        Wt = W.T
        for t in range(Tn - 1, -1, -1):
            dh = dh + dhs[t]
            s = sig[t]
            i, f, o = s[:, :H], s[:, H : 2 * H], s[:, 2 * H :]
            g, tc = gg[t], tcs[t]
            dct = dc + dh * o * (1 - tc * tc)
            dz[t, :, :H] = dct * g * i * (1 - i)
            dz[t, :, H : 2 * H] = dct * cs[t] * f * (1 - f)
            dz[t, :, 2 * H : 3 * H] = dh * tc * o * (1 - o)
            dz[t, :, 3 * H :] = dct * i * (1 - g * g)
            dc = dct * f
            dh = dz[t] @ Wt
        dW = hs[:-1].reshape(-1, H).T @ dz.reshape(-1, H4)
        return dz, dW, dh, dc

    out = _record((hs[1:], hs[-1].copy(), cs[-1].copy()), (pre, w_rec, h0, c0), fn)
    return out[0], out[1], out[2]
