"""Dense tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When grad mode is on and any operand
requires grad, the result keeps references to its parents plus a closure that
maps the output gradient to one gradient per parent. :meth:`Tensor.backward`
walks that record in reverse topological order and frees it afterwards.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_state = threading.local()


class ShapeError(ValueError):
    """Operand extents are incompatible for the requested op."""


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for a {ndim}-d tensor")
        out.append(a % ndim)
    return tuple(sorted(out))


def _expand_reduced(grad: np.ndarray, axes: tuple, keepdims: bool) -> np.ndarray:
    if keepdims:
        return grad
    for a in axes:
        grad = np.expand_dims(grad, a)
    return grad


class Tensor:
    """A float32/float64 array that can record how it was computed."""

    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            if dtype is not None:
                raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = ""

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=20)}{flag})"

    # -- tape plumbing -------------------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        out = Tensor(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out._op = op
        return out

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        if getattr(self, "_freed", False):
            raise RuntimeError("graph already freed by a previous backward()")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
        self._freed = True

    # -- elementwise arithmetic ----------------------------------------------
    def _binary(self, other, fn, grad_fn, op):
        other = self._lift(other)
        try:
            data = fn(self.data, other.data)
        except ValueError as exc:
            raise ShapeError(f"{op}: cannot broadcast shapes {self.shape} and {other.shape}") from exc
        a, b = self, other

        def backward(g):
            ga, gb = grad_fn(g, a.data, b.data, data)
            return (
                _unbroadcast(ga, a.shape) if ga is not None else None,
                _unbroadcast(gb, b.shape) if gb is not None else None,
            )

        return Tensor._result(data, (a, b), backward, op)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b, y: (g, g), "add")

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b, y: (g, -g), "sub")

    def __mul__(self, other):
        return self._binary(other, np.multiply, lambda g, a, b, y: (g * b, g * a), "mul")

    def __truediv__(self, other):
        return self._binary(
            other, np.divide, lambda g, a, b, y: (g / b, -g * a / (b * b)), "div"
        )

    def __radd__(self, other):
        return self._lift(other) + self

    def __rsub__(self, other):
        return self._lift(other) - self

    def __rmul__(self, other):
        return self._lift(other) * self

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        data = x ** exponent
        return Tensor._result(
            data, (self,), lambda g: (g * exponent * x ** (exponent - 1),), "pow"
        )

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary functions -----------------------------------------------------
    def relu(self) -> "Tensor":
        x = self.data
        return Tensor._result(np.maximum(x, 0), (self,), lambda g: (g * (x > 0),), "relu")

    def sigmoid(self) -> "Tensor":
        x = self.data
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
        return Tensor._result(s, (self,), lambda g: (g * s * (1 - s),), "sigmoid")

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor._result(y, (self,), lambda g: (g * y,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._result(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)
        return Tensor._result(y, (self,), lambda g: (g / (2 * y),), "sqrt")

    def clip(self, lo=None, hi=None) -> "Tensor":
        x = self.data
        y = np.clip(x, lo, hi)
        keep = np.ones(x.shape, dtype=bool)
        if lo is not None:
            keep &= x >= lo
        if hi is not None:
            keep &= x <= hi
        return Tensor._result(y, (self,), lambda g: (g * keep,), "clip")

    def softmax(self, axis: int = -1) -> "Tensor":
        if self.ndim == 0 or self.shape[axis] == 0:
            raise ShapeError(f"softmax over an empty axis {axis} of shape {self.shape}")
        x = self.data
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

        return Tensor._result(y, (self,), backward, "softmax")

    # -- reductions ----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        shape = self.shape
        data = self.data.sum(axis=axes, keepdims=keepdims)

        def backward(g):
            return (np.broadcast_to(_expand_reduced(g, axes, keepdims), shape),)

        return Tensor._result(np.asarray(data), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        if count == 0:
            raise ShapeError(f"mean over an empty axis of shape {self.shape}")
        shape = self.shape
        data = self.data.mean(axis=axes, keepdims=keepdims)

        def backward(g):
            return (np.broadcast_to(_expand_reduced(g, axes, keepdims) / count, shape),)

        return Tensor._result(np.asarray(data), (self,), backward, "mean")

    def max(self, axis=None, keepdims: bool = False) -> "Tensor":
        """Maximum along ``axis``; tied maxima share the gradient equally."""
        axes = _normalize_axes(axis, self.ndim)
        x = self.data
        peak = x.max(axis=axes, keepdims=True)
        data = peak if keepdims else np.squeeze(peak, axis=axes)

        def backward(g):
            hit = x == peak
            share = hit / hit.sum(axis=axes, keepdims=True)
            return (share * _expand_reduced(g, axes, keepdims),)

        return Tensor._result(np.asarray(data), (self,), backward, "max")

    # -- shape manipulation --------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {src} into {shape}") from exc
        return Tensor._result(data, (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        data = self.data.transpose(axes)
        return Tensor._result(data, (self,), lambda g: (g.transpose(inverse),), "transpose")

    def pad(self, pad_width) -> "Tensor":
        """Zero-pad; ``pad_width`` follows ``numpy.pad``."""
        pad_width = [tuple(p) for p in pad_width]
        if len(pad_width) != self.ndim:
            raise ShapeError(f"pad: need {self.ndim} (before, after) pairs, got {len(pad_width)}")
        data = np.pad(self.data, pad_width)
        window = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, self.shape))
        return Tensor._result(data, (self,), lambda g: (g[window],), "pad")

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape
        dtype = self.dtype
        data = self.data[index]
        fancy = isinstance(index, (np.ndarray, list)) or (
            isinstance(index, tuple) and any(isinstance(i, (np.ndarray, list)) for i in index)
        )

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            if fancy:
                np.add.at(full, index, g)
            else:
                full[index] += g
            return (full,)

        return Tensor._result(np.array(data), (self,), backward, "getitem")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    b = a._lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]}) "
            f"for shapes {a.shape} and {b.shape}"
        )
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._result(data, (a, b), backward, "matmul")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = _normalize_axes(axis, ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(
                f"concat along axis {axis}: shapes {[t.shape for t in tensors]} disagree off-axis"
            )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return Tensor._result(data, tuple(tensors), backward, "concat")


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
