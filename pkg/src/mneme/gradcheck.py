"""Central finite-difference checks for the autodiff engine and models."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(a, b, floor: float = 1e-10) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def numeric_grad(f: Callable[[], float], x: Tensor, h: float = 1e-5, index=None) -> np.ndarray:
    """d f / d x by central differences, over all entries or just ``index``."""
    idx = list(np.ndindex(x.shape)) if index is None else index
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        old = x.data[i]
        x.data[i] = old + h
        fp = f()
        x.data[i] = old - h
        fm = f()
        x.data[i] = old
        out[k] = (fp - fm) / (2 * h)
    return out.reshape(x.shape) if index is None else out


def directional_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    rng: np.random.Generator,
    h: float = 1e-5,
    coords: int = 4,
) -> dict[int, float]:
    """Per parameter: worst relative error among a random-direction
    derivative and ``coords`` random coordinates.  Returns ``{position: error}``."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def f():
        return loss_fn().item()

    errors = {}
    for k, (p, g) in enumerate(zip(params, grads)):
        v = rng.standard_normal(p.shape)
        base = p.data.copy()
        p.data = base + h * v
        fp = f()
        p.data = base - h * v
        fm = f()
        p.data = base
        worst = relative_error(np.vdot(g, v), (fp - fm) / (2 * h))
        flat = rng.choice(p.data.size, size=min(coords, p.data.size), replace=False)
        index = [np.unravel_index(i, p.shape) for i in flat]
        num = numeric_grad(f, p, h, index)
        ana = np.array([g[i] for i in index])
        worst = max(worst, relative_error(ana, num, floor=max(1e-6, np.abs(g).max(initial=0.0) * 1e-3)))
        errors[k] = worst
    return errors
