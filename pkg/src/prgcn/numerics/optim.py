"""Trainable parameters and SGD with momentum."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always requires grad and carries a momentum buffer."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True)
        self.name = name
        self.momentum_buffer = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def sgd_step(params, lr: float, momentum: float) -> None:
    """In-place update: ``buf = momentum * buf + grad``; ``value -= lr * buf``."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '<unnamed>'} has no gradient; run backward() first")
    for p in params:
        buf = p.momentum_buffer
        buf *= momentum
        buf += p.grad
        p.data -= lr * buf
