"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, eps: float = 1e-5,
                   indices=None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``target.data``.

    ``target.data`` is perturbed in place and restored. When ``indices`` is
    given only those flat positions are probed; the rest stay zero.
    """
    flat = target.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn().data)
        flat[i] = orig - eps
        down = float(fn().data)
        flat[i] = orig
        grad[i] = (up - down) / (2 * eps)
    return grad.reshape(target.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; zero when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
                    max_probes: int | None = None, rng=None) -> dict[int, float]:
    """Compare analytic and numeric gradients of ``fn()`` for each tensor.

    Returns ``{position in tensors: relative error}``. ``max_probes`` caps the
    number of entries probed per tensor (chosen with ``rng``); the relative
    error is then taken over the probed entries only.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    rng = np.random.default_rng(0) if rng is None else rng
    errors = {}
    for k, t in enumerate(tensors):
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        if max_probes is not None and t.size > max_probes:
            idx = np.sort(rng.choice(t.size, size=max_probes, replace=False))
        else:
            idx = np.arange(t.size)
        numeric = numerical_grad(fn, t, eps, idx)
        errors[k] = relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx])
    return errors
