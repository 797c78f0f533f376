"""Polynomial learning-rate decay and momentum SGD."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from forec.errors import DimensionError, NumericalError


def poly_lr(lr0: float, iteration: int, total_iter: int, power: float = 0.8) -> float:
    """``lr0 * (1 - iteration / total_iter) ** power``."""
    if total_iter <= 0:
        raise ValueError("total_iter must be positive")
    if not 0 <= iteration <= total_iter:
        raise ValueError(f"iteration {iteration} outside [0, {total_iter}]")
    return lr0 * (1.0 - iteration / total_iter) ** power


@dataclass
class SgdState:
    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.8
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: SgdState, lr: float) -> dict:
    """In-place momentum SGD: ``v = m*v + g + wd*p``; ``p -= lr*v``.

    Parameters without an entry in ``grads`` are not touched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}", name=name)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape mismatch for {name!r}", expected=p.shape, got=g.shape)
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise DimensionError(f"momentum buffer shape mismatch for {name!r}", expected=p.shape, got=v.shape)
        v = (state.momentum * v + g + state.weight_decay * p).astype(p.dtype)
        state.buffers[name] = v
        params[name] = (p - lr * v).astype(p.dtype)
    return params
