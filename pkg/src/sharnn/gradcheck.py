"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import GradCheckError
from .tensor import Tape, Tensor

Params = Union[Sequence[Tensor], Mapping[str, Tensor]]


def _value(out) -> float:
    return float(out.data) if isinstance(out, Tensor) else float(out)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Params,
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
    report: Optional[dict] = None,
) -> float:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` reads the current values of ``params`` and returns a scalar.  Every
    coordinate is probed unless ``max_coords`` caps it, in which case a seeded
    random subset is used per tensor.  The error of one tensor is
    ``|analytic - numeric| / max(|analytic|, |numeric|)`` in the l2 norm over
    the probed coordinates; the maximum over tensors is returned.  Pass a dict
    as ``report`` to receive the per-tensor errors.
    """
    named = dict(params) if isinstance(params, Mapping) else {str(i): p for i, p in enumerate(params)}
    for p in named.values():
        p.grad = None
        p.requires_grad = True

    with Tape() as tape:
        out = f()
        out.backward()
    base = _value(out)
    tape.clear()
    if _value(f()) != base:
        raise GradCheckError("f is not deterministic; disable dropout and fix the rng")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in named.items():
        analytic = np.zeros(p.size) if p.grad is None else np.asarray(p.grad, dtype=np.float64).reshape(-1)
        if not p.data.flags.c_contiguous:
            raise GradCheckError(f"{name}: parameter storage is not contiguous")
        flat = p.data.reshape(-1)
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        for j, k in enumerate(coords):
            orig = flat[k]
            flat[k] = orig + h
            up = _value(f())
            flat[k] = orig - h
            down = _value(f())
            flat[k] = orig
            numeric[j] = (up - down) / (2 * h)
        a = analytic[coords]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric))
        err = 0.0 if denom == 0 else float(np.linalg.norm(a - numeric) / denom)
        if report is not None:
            report[name] = err
        worst = max(worst, err)
    return worst
