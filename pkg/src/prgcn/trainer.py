"""Cross-entropy training with SGD + momentum and a step schedule; top-k evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import AugmentParams, SkeletonSequence, augment, fit_length
from .model import PrGcnModel, save_checkpoint_file
from .numerics import Tensor, no_grad, sgd_step, zero_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch} (lr={lr:g})")
        self.epoch, self.batch, self.lr, self.loss = epoch, batch, lr, loss


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_period: int = 10
    warm_period: int = 10
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    augment: bool = True
    rotation: float = 10.0
    scale: float = 0.1
    translation: float = 0.25

    def validate(self) -> "TrainConfig":
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.decay_period < 1 or self.warm_period < 0:
            raise ValueError("decay_period must be >= 1 and warm_period >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        return self

    @property
    def augment_params(self) -> AugmentParams:
        return AugmentParams(self.rotation, self.scale, self.translation, self.seed)


@dataclass
class Metrics:
    top1: float = 0.0
    top5: float = 0.0
    loss: float = 0.0
    history: list[dict] = field(default_factory=list)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant for the first ``warm_period`` epochs, then one decay step every ``decay_period``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    steps = 0 if epoch < cfg.warm_period else (epoch - cfg.warm_period) // cfg.decay_period + 1
    return cfg.base_lr * cfg.decay_factor ** steps


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of ``-log p[label]`` with probabilities clamped at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = probs.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    picked = probs[np.arange(b), labels]
    return -(picked.clip(1e-12, None).log().mean())


def topk_hits(probs: np.ndarray, labels, k: int) -> np.ndarray:
    """Boolean hit per row; equal probabilities rank the smaller class index first."""
    probs = np.asarray(probs)
    k = min(k, probs.shape[1])
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return np.any(order == np.asarray(labels)[:, None], axis=1)


def _batch(model: PrGcnModel, seqs: Sequence[SkeletonSequence], mode: str, rng, cfg: TrainConfig | None):
    frames = model.config.frames
    persons = max(s.coords.shape[0] for s in seqs)
    clips = []
    for s in seqs:
        x = fit_length(s, frames, mode, rng)
        if mode == "train" and cfg is not None and cfg.augment:
            x = augment(x, cfg.augment_params, s.semantics, rng)
        if x.shape[0] < persons:
            x = np.concatenate([x, np.zeros((persons - x.shape[0],) + x.shape[1:])], axis=0)
        clips.append(x)
    data = np.stack(clips).astype(model.config.dtype)
    return Tensor(data), np.array([s.label for s in seqs])


def evaluate(model: PrGcnModel, dataset: Sequence[SkeletonSequence], batch_size: int = 32) -> Metrics:
    """Top-1/top-5 and mean loss with batch norm in inference mode."""
    was_training = model.training
    model.eval()
    probs, labels = [], []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            x, y = _batch(model, dataset[start:start + batch_size], "eval", None, None)
            probs.append(model(x).data)
            labels.append(y)
    model.train(was_training)
    p, y = np.concatenate(probs), np.concatenate(labels)
    loss = float(-np.log(np.clip(p[np.arange(len(y)), y], 1e-12, None)).mean())
    return Metrics(float(topk_hits(p, y, 1).mean()), float(topk_hits(p, y, 5).mean()), loss)


def train(model: PrGcnModel, dataset: Sequence[SkeletonSequence], cfg: TrainConfig,
          log_path=None, checkpoint_path=None, stop_at_top1: float | None = None) -> Metrics:
    """Run ``cfg.epochs`` epochs of shuffled mini-batch SGD.

    Each epoch appends ``{epoch, lr, loss, top1, top5}`` to the history (and to
    ``log_path`` as one JSON line). top1/top5 are measured on the training set
    in inference mode after the epoch. With ``stop_at_top1`` set, training ends
    at the first epoch reaching it.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    metrics = Metrics()
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            model.train()
            order = rng.permutation(len(dataset))
            total, seen = 0.0, 0
            for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
                seqs = [dataset[i] for i in order[start:start + cfg.batch_size]]
                x, y = _batch(model, seqs, "train", rng, cfg)
                zero_grad(params)
                loss = cross_entropy(model(x), y)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(epoch, bi, lr, value)
                loss.backward()
                sgd_step(params, lr, cfg.momentum)
                total += value * len(seqs)
                seen += len(seqs)
            ev = evaluate(model, dataset)
            row = {"epoch": epoch, "lr": lr, "loss": total / seen, "top1": ev.top1, "top5": ev.top5}
            metrics.history.append(row)
            metrics.top1, metrics.top5, metrics.loss = ev.top1, ev.top5, row["loss"]
            log.info("epoch %d lr %.2g loss %.4f top1 %.3f top5 %.3f", epoch, lr, row["loss"], ev.top1, ev.top5)
            if log_file is not None:
                log_file.write(json.dumps(row) + "\n")
                log_file.flush()
            if stop_at_top1 is not None and ev.top1 >= stop_at_top1:
                break
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint_file(model, checkpoint_path, include_optimizer=True)
    return metrics
