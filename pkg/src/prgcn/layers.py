"""Reusable layers. All of them take feature maps shaped (B, C, T, N).

A 3-d (C, T, N) input is accepted too and treated as a batch of one.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .graph import PartitionedAdjacency
from .numerics import Parameter, ShapeError, Tensor, concat, matmul

TEMPORAL_KERNEL = 3
SUPPORTED_STRIDES = (1, 2, 3)


class Module:
    """Minimal container: walks attributes to find parameters, buffers and children."""

    training = True
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def flops(self, frames: int, joints: int) -> int:
        """Floating-point operations for one sample (2 per multiply-accumulate)."""
        raise NotImplementedError


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected a (B, C, T, N) or (C, T, N) feature map, got shape {x.shape}")
    return x, False


def _unbatched(y: Tensor, squeeze: bool) -> Tensor:
    return y.reshape(y.shape[1:]) if squeeze else y


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class BatchNorm(Module):
    """Per-channel normalization over (batch, time, joints)."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels), dtype=dtype)
        self.beta = Parameter(np.zeros(channels), dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        if x.shape[1] != self.channels:
            raise ShapeError(f"batch norm: channel axis is {x.shape[1]}, expected {self.channels}")
        shape = (1, self.channels, 1, 1)
        if self.training:
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            xhat = centered / (var + self.eps).sqrt()
            n = x.size // self.channels
            unbiased = var.data.reshape(-1) * (n / (n - 1) if n > 1 else 1.0)
            m = self.momentum
            self.running_mean[:] = (1 - m) * self.running_mean + m * mean.data.reshape(-1)
            self.running_var[:] = (1 - m) * self.running_var + m * unbiased
        else:
            mean = self.running_mean.reshape(shape)
            std = np.sqrt(self.running_var + self.eps).reshape(shape)
            xhat = (x - mean) / std
        y = xhat * self.gamma.reshape(shape) + self.beta.reshape(shape)
        return _unbatched(y, squeeze)


class PointwiseConv(Module):
    """1x1 convolution: the same channel-mixing matrix at every (t, n)."""

    def __init__(self, in_channels: int, out_channels: int, rng=None, dtype=np.float32,
                 weight: np.ndarray | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        if weight is None:
            rng = np.random.default_rng() if rng is None else rng
            weight = _he_normal(rng, (out_channels, in_channels), in_channels, dtype)
        weight = np.asarray(weight, dtype=dtype)
        if weight.shape != (out_channels, in_channels):
            raise ShapeError(f"pointwise weight shape {weight.shape} != {(out_channels, in_channels)}")
        self.weight = Parameter(weight)

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        b, c, t, n = x.shape
        if c != self.in_channels:
            raise ShapeError(f"pointwise conv: input has {c} channels, weights expect {self.in_channels}")
        y = matmul(self.weight, x.reshape(b, c, t * n)).reshape(b, self.out_channels, t, n)
        return _unbatched(y, squeeze)

    def flops(self, frames: int, joints: int) -> int:
        return 2 * self.in_channels * self.out_channels * frames * joints


def max_pool_time(x: Tensor, window: int) -> Tensor:
    """Max over disjoint windows of ``window`` frames."""
    x, squeeze = _batched(x)
    b, c, t, n = x.shape
    if window < 1 or t % window:
        raise ShapeError(f"max_pool_time: {t} frames are not divisible by window {window}")
    if window == 1:
        return _unbatched(x, squeeze)
    y = x.reshape(b, c, t // window, window, n).max(axis=3)
    return _unbatched(y, squeeze)


class GraphConv(Module):
    """Partitioned graph convolution with a learnable edge mask per group.

    ``aggregate`` returns ``sum_k W_k (x (A_k * M_k)^T)`` where row i of A_k lists the
    group-k neighbors feeding joint i. ``forward`` adds batch norm, the skip
    connection and a ReLU.
    """

    def __init__(self, in_channels: int, out_channels: int, adjacency: PartitionedAdjacency,
                 residual: str = "auto", rng=None, dtype=np.float32):
        rng = np.random.default_rng() if rng is None else rng
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.adjacency = np.asarray(adjacency.normalized, dtype=dtype)
        k, n, _ = self.adjacency.shape
        self.num_groups, self.num_joints = k, n
        self.weight = Parameter(_he_normal(rng, (k, out_channels, in_channels), k * in_channels, dtype))
        self.mask = Parameter(np.ones((k, n, n), dtype=dtype))
        self.bn = BatchNorm(out_channels, dtype=dtype)
        if residual == "auto":
            residual = "identity" if in_channels == out_channels else "project"
        if residual not in ("identity", "project", "none"):
            raise ValueError(f"unknown residual mode {residual!r}")
        if residual == "identity" and in_channels != out_channels:
            raise ShapeError("identity skip needs equal input and output channels")
        self.residual = residual
        self.skip = PointwiseConv(in_channels, out_channels, rng, dtype) if residual == "project" else None

    def aggregate(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        b, c, t, n = x.shape
        if c != self.in_channels:
            raise ShapeError(f"graph conv: channel axis is {c}, weights expect {self.in_channels}")
        if n != self.num_joints:
            raise ShapeError(f"graph conv: joint axis is {n}, adjacency has {self.num_joints}")
        k = self.num_groups
        masked = (self.mask * self.adjacency).transpose(0, 2, 1)  # (K, N_src, N_dst)
        spread = matmul(x.reshape(b, 1, c, t, n), masked.reshape(1, k, 1, n, n))  # (B, K, C, T, N)
        w = self.weight.transpose(1, 0, 2).reshape(self.out_channels, k * c)
        y = matmul(w, spread.reshape(b, k * c, t * n)).reshape(b, self.out_channels, t, n)
        return _unbatched(y, squeeze)

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        y = self.bn(self.aggregate(x))
        if self.residual == "identity":
            y = y + x
        elif self.residual == "project":
            y = y + self.skip(x)
        return _unbatched(y.relu(), squeeze)

    def flops(self, frames: int, joints: int) -> int:
        tn = frames * joints
        adj = self.num_groups * self.in_channels * tn * joints
        mix = self.num_groups * self.out_channels * self.in_channels * tn
        total = 2 * (adj + mix)
        if self.skip is not None:
            total += self.skip.flops(frames, joints)
        return total


class TemporalConv(Module):
    """K_t x 1 convolution along time per joint, with batch norm, skip and ReLU.

    Zero padding of (K_t - 1) / 2 frames on both ends; output length is
    ``ceil(T / stride)``. The skip path is the identity, a parameter-free
    temporal subsample when only the stride differs, or a strided 1x1
    projection when the channel count changes.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, residual: str = "auto",
                 rng=None, dtype=np.float32, kernel_size: int = TEMPORAL_KERNEL):
        if stride not in SUPPORTED_STRIDES:
            raise ValueError(f"unsupported temporal stride {stride}; expected one of {SUPPORTED_STRIDES}")
        if kernel_size % 2 != 1:
            raise ValueError("temporal kernel size must be odd")
        rng = np.random.default_rng() if rng is None else rng
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.kernel_size = kernel_size
        self.weight = Parameter(
            _he_normal(rng, (out_channels, in_channels, kernel_size), in_channels * kernel_size, dtype)
        )
        self.bn = BatchNorm(out_channels, dtype=dtype)
        if residual == "auto":
            residual = "identity" if in_channels == out_channels else "project"
        if residual not in ("identity", "project", "none"):
            raise ValueError(f"unknown residual mode {residual!r}")
        if residual == "identity" and in_channels != out_channels:
            raise ShapeError("identity skip needs equal input and output channels")
        self.residual = residual
        self.skip = PointwiseConv(in_channels, out_channels, rng, dtype) if residual == "project" else None

    def output_frames(self, frames: int) -> int:
        return -(-frames // self.stride)

    def convolve(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        b, c, t, n = x.shape
        if c != self.in_channels:
            raise ShapeError(f"temporal conv: channel axis is {c}, weights expect {self.in_channels}")
        if t < 1:
            raise ShapeError("temporal conv needs at least one frame")
        half = self.kernel_size // 2
        s = self.stride
        t_out = self.output_frames(t)
        padded = x.pad(((0, 0), (0, 0), (half, half), (0, 0)))
        taps = [padded[:, :, k:k + s * (t_out - 1) + 1:s, :] for k in range(self.kernel_size)]
        stacked = concat(taps, axis=1).reshape(b, self.kernel_size * c, t_out * n)
        w = self.weight.transpose(0, 2, 1).reshape(self.out_channels, self.kernel_size * c)
        y = matmul(w, stacked).reshape(b, self.out_channels, t_out, n)
        return _unbatched(y, squeeze)

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        y = self.bn(self.convolve(x))
        if self.residual != "none":
            shortcut = x if self.stride == 1 else x[:, :, ::self.stride, :]
            if self.skip is not None:
                shortcut = self.skip(shortcut)
            y = y + shortcut
        return _unbatched(y.relu(), squeeze)

    def flops(self, frames: int, joints: int) -> int:
        t_out = self.output_frames(frames)
        total = 2 * self.out_channels * self.in_channels * self.kernel_size * t_out * joints
        if self.skip is not None:
            total += self.skip.flops(t_out, joints)
        return total
