"""Pose refinement, gradual fusion and temporal aggregation blocks."""

from __future__ import annotations

import numpy as np

from .graph import PartitionedAdjacency
from .layers import GraphConv, Module, PointwiseConv, TemporalConv, _batched, _unbatched, max_pool_time
from .numerics import ShapeError, Tensor, concat

FUSION_MODES = ("parallel_pm", "parallel_pp", "sequential_p", "sequential_pm")
GFM_STRIDES = (2, 3)
TEMPORAL_REDUCTION = GFM_STRIDES[0] * GFM_STRIDES[1]
CLASSIFIER_INIT_STD = 0.01


def _classifier(channels: int, num_classes: int, rng, dtype) -> PointwiseConv:
    # small weights keep the initial predictions close to uniform
    rng = np.random.default_rng() if rng is None else rng
    w = rng.normal(0.0, CLASSIFIER_INIT_STD, (num_classes, channels))
    return PointwiseConv(channels, num_classes, dtype=dtype, weight=w)


def compute_motion(p: Tensor) -> Tensor:
    """Frame differences ``P[t] - P[t-1]``; the first frame has no predecessor and gets zeros."""
    p, squeeze = _batched(p)
    b, c, t, n = p.shape
    first = Tensor(np.zeros((b, c, 1, n), dtype=p.dtype))
    if t == 1:
        return _unbatched(first, squeeze)
    m = concat([first, p[:, :, 1:, :] - p[:, :, :-1, :]], axis=2)
    return _unbatched(m, squeeze)


def scale_concat(pos: Tensor, mot: Tensor) -> Tensor:
    """Max-pool ``pos`` along time down to ``mot``'s length, then stack channels."""
    pos, squeeze = _batched(pos)
    mot, _ = _batched(mot)
    t, t_mot = pos.shape[2], mot.shape[2]
    if t_mot == 0 or t % t_mot:
        raise ShapeError(f"scale_concat: position length {t} is not a multiple of motion length {t_mot}")
    fused = concat([max_pool_time(pos, t // t_mot), mot], axis=1)
    return _unbatched(fused, squeeze)


class PoseRefinement(Module):
    """Predicts per-joint coordinate offsets and adds them to the input poses.

    For ``xy_conf`` input only x and y receive offsets; the confidence channel
    is passed through. The offset head starts at zero, so a fresh module is
    the identity.
    """

    def __init__(self, adjacency: PartitionedAdjacency, in_channels: int = 3, hidden: int = 32,
                 semantics: str = "xy_conf", rng=None, dtype=np.float32):
        if semantics not in ("xy_conf", "xyz"):
            raise ValueError(f"unknown channel semantics {semantics!r}")
        if in_channels != 3:
            raise ShapeError(f"pose refinement expects 3 input channels, got {in_channels}")
        rng = np.random.default_rng() if rng is None else rng
        self.semantics = semantics
        self.in_channels = in_channels
        self.offset_dims = 2 if semantics == "xy_conf" else 3
        self.lift = PointwiseConv(in_channels, hidden, rng, dtype)
        self.gconv1 = GraphConv(hidden, hidden, adjacency, rng=rng, dtype=dtype)
        self.gconv2 = GraphConv(hidden, hidden, adjacency, rng=rng, dtype=dtype)
        self.tconv = TemporalConv(hidden, hidden, stride=1, rng=rng, dtype=dtype)
        self.head = PointwiseConv(hidden, self.offset_dims, dtype=dtype,
                                  weight=np.zeros((self.offset_dims, hidden)))

    def offsets(self, x: Tensor) -> Tensor:
        h = self.lift(x)
        h = self.gconv2(self.gconv1(h))
        return self.head(self.tconv(h))

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"pose refinement: got {x.shape[1]} channels, expected {self.in_channels}")
        delta = self.offsets(x)
        d = self.offset_dims
        if d == x.shape[1]:
            refined = x + delta
        else:
            refined = concat([x[:, :d] + delta, x[:, d:]], axis=1)
        return _unbatched(refined, squeeze)

    def flops(self, frames: int, joints: int) -> int:
        return sum(m.flops(frames, joints) for m in (self.lift, self.gconv1, self.gconv2, self.tconv, self.head))


class GradualFusion(Module):
    """Position and motion flows fused at three temporal scales.

    ``parallel_pm`` feeds P to the position flow and its frame differences to
    the motion flow; ``parallel_pp`` feeds P to both. The sequential variants
    replace both flows with one stack of alternating graph and temporal
    convolutions over P (``sequential_p``) or over P and M stacked along
    channels (``sequential_pm``).
    """

    def __init__(self, adjacency: PartitionedAdjacency, in_channels: int = 3,
                 pos_widths=(64, 64, 64), mot_width: int = 64, tconv_widths=(128, 192),
                 mode: str = "parallel_pm", rng=None, dtype=np.float32):
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
        if len(pos_widths) != 3 or len(tconv_widths) != 2:
            raise ValueError("need three position widths and two temporal-conv widths")
        rng = np.random.default_rng() if rng is None else rng
        self.mode = mode
        p1, p2, p3 = pos_widths
        t1, t2 = tconv_widths
        self.out_channels = p3 + t2
        if mode.startswith("parallel"):
            self.pos_gconvs = [
                GraphConv(in_channels, p1, adjacency, rng=rng, dtype=dtype),
                GraphConv(p1, p2, adjacency, rng=rng, dtype=dtype),
                GraphConv(p2, p3, adjacency, rng=rng, dtype=dtype),
            ]
            self.mot_gconv = GraphConv(in_channels, mot_width, adjacency, rng=rng, dtype=dtype)
            self.mot_tconv1 = TemporalConv(p1 + mot_width, t1, stride=GFM_STRIDES[0], rng=rng, dtype=dtype)
            self.mot_tconv2 = TemporalConv(p2 + t1, t2, stride=GFM_STRIDES[1], rng=rng, dtype=dtype)
        else:
            c_in = in_channels * (2 if mode == "sequential_pm" else 1)
            self.stack = [
                GraphConv(c_in, p1, adjacency, rng=rng, dtype=dtype),
                TemporalConv(p1, t1, stride=GFM_STRIDES[0], rng=rng, dtype=dtype),
                GraphConv(t1, t1, adjacency, rng=rng, dtype=dtype),
                TemporalConv(t1, t2, stride=GFM_STRIDES[1], rng=rng, dtype=dtype),
                GraphConv(t2, self.out_channels, adjacency, rng=rng, dtype=dtype),
            ]

    @staticmethod
    def output_frames(frames: int) -> int:
        if frames % TEMPORAL_REDUCTION:
            raise ShapeError(f"{frames} frames are not divisible by {TEMPORAL_REDUCTION}")
        return frames // TEMPORAL_REDUCTION

    def forward(self, p: Tensor) -> Tensor:
        p, squeeze = _batched(p)
        self.output_frames(p.shape[2])
        if self.mode.startswith("sequential"):
            h = concat([p, compute_motion(p)], axis=1) if self.mode == "sequential_pm" else p
            for layer in self.stack:
                h = layer(h)
            return _unbatched(h, squeeze)

        stages = []
        h = p
        for g in self.pos_gconvs:
            h = g(h)
            stages.append(h)
        m = self.mot_gconv(compute_motion(p) if self.mode == "parallel_pm" else p)
        m = self.mot_tconv1(scale_concat(stages[0], m))
        m = self.mot_tconv2(scale_concat(stages[1], m))
        return _unbatched(scale_concat(stages[2], m), squeeze)

    def flops(self, frames: int, joints: int) -> int:
        if self.mode.startswith("sequential"):
            total, t = 0, frames
            for layer in self.stack:
                total += layer.flops(t, joints)
                if isinstance(layer, TemporalConv):
                    t = layer.output_frames(t)
            return total
        total = sum(g.flops(frames, joints) for g in self.pos_gconvs)
        total += self.mot_gconv.flops(frames, joints)
        total += self.mot_tconv1.flops(frames, joints)
        total += self.mot_tconv2.flops(self.mot_tconv1.output_frames(frames), joints)
        return total


class TemporalAggregation(Module):
    """Time pooling, sigmoid channel gating, a last graph conv, joint pooling, classifier.

    ``forward`` returns class logits; :meth:`probabilities` applies the softmax.
    """

    def __init__(self, adjacency: PartitionedAdjacency, channels: int, num_classes: int,
                 reduction: int = 4, rng=None, dtype=np.float32):
        if channels % reduction:
            raise ValueError(f"aggregation width {channels} is not divisible by reduction {reduction}")
        rng = np.random.default_rng() if rng is None else rng
        self.channels = channels
        self.reduction = reduction
        self.se_reduce = PointwiseConv(channels, channels // reduction, rng, dtype)
        self.se_expand = PointwiseConv(channels // reduction, channels, rng, dtype)
        self.gconv = GraphConv(channels, channels, adjacency, rng=rng, dtype=dtype)
        self.classifier = _classifier(channels, num_classes, rng, dtype)

    def channel_scales(self, pooled: Tensor) -> Tensor:
        """Per-channel gates in (0, 1) for a time-pooled (B, C, 1, N) map."""
        squeezed = pooled.mean(axis=3, keepdims=True)
        return self.se_expand(self.se_reduce(squeezed).relu()).sigmoid()

    def recalibrate(self, f: Tensor) -> Tensor:
        f, squeeze = _batched(f)
        pooled = f.mean(axis=2, keepdims=True)
        return _unbatched(pooled * self.channel_scales(pooled), squeeze)

    def forward(self, f: Tensor) -> Tensor:
        f, _ = _batched(f)
        z = self.gconv(self.recalibrate(f))
        z = z.mean(axis=3, keepdims=True)
        logits = self.classifier(z)
        return logits.reshape(logits.shape[0], logits.shape[1])

    def probabilities(self, f: Tensor) -> Tensor:
        return self.forward(f).softmax(axis=-1)

    def flops(self, frames: int, joints: int) -> int:
        return (self.se_reduce.flops(1, 1) + self.se_expand.flops(1, 1)
                + self.gconv.flops(1, joints) + self.classifier.flops(1, 1))


class PoolingHead(Module):
    """Global average pooling over time and joints followed by the classifier."""

    def __init__(self, channels: int, num_classes: int, rng=None, dtype=np.float32):
        self.classifier = _classifier(channels, num_classes, rng, dtype)

    def forward(self, f: Tensor) -> Tensor:
        f, _ = _batched(f)
        logits = self.classifier(f.mean(axis=(2, 3), keepdims=True))
        return logits.reshape(logits.shape[0], logits.shape[1])

    def probabilities(self, f: Tensor) -> Tensor:
        return self.forward(f).softmax(axis=-1)

    def flops(self, frames: int, joints: int) -> int:
        return self.classifier.flops(1, 1)
