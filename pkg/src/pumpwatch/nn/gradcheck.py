from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import NonScalarOutput
from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5, coords=None, richardson: bool = False) -> np.ndarray:
    """Central differences of ``fn()`` with respect to ``x`` (mutated in place, then restored).

    With ``richardson`` the steps eps and eps/2 are combined as (4 D(eps/2) - D(eps)) / 3,
    cancelling the eps^2 error term. That allows a larger step and so less round-off.
    """
    if richardson:
        half = numeric_grad(fn, x, eps / 2, coords)
        return (4 * half - numeric_grad(fn, x, eps, coords)) / 3
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)  # a view, so writes below perturb x
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = float(fn().data)
        flat[i] = old - eps
        down = float(fn().data)
        flat[i] = old
        out[i] = (up - down) / (2 * eps)
    return out.reshape(x.shape)


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor] | Mapping[str, Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    details: bool = False,
    richardson: bool = False,
):
    """Max relative error between backprop gradients and central differences.

    ``fn`` must rebuild the graph from ``inputs`` on each call and return a
    scalar. With ``max_coords`` only that many randomly chosen entries of each
    input are probed.
    """
    named = dict(inputs) if isinstance(inputs, Mapping) else {str(i): t for i, t in enumerate(inputs)}
    for t in named.values():
        t.requires_grad = True
        t.grad = None
    out = fn()
    if out.data.size != 1:
        raise NonScalarOutput(f"grad_check needs a scalar output, got shape {out.shape}")
    out.backward()
    analytic = {k: (np.zeros(t.shape) if t.grad is None else t.grad.copy()) for k, t in named.items()}

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    per_input = {}
    for key, t in named.items():
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        num = numeric_grad(fn, t, eps, coords, richardson)
        a = analytic[key].reshape(-1)
        n = num.reshape(-1)
        if coords is not None:
            a, n = a[coords], n[coords]
        err = float(relative_error(a, n).max()) if a.size else 0.0
        per_input[key] = err
        worst = max(worst, err)
    return (worst, per_input) if details else worst
