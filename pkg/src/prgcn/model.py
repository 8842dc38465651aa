"""End-to-end PR-GCN: configuration, assembly, accounting and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import (
    FUSION_MODES, TEMPORAL_REDUCTION, GradualFusion, PoolingHead, PoseRefinement, TemporalAggregation,
)
from .graph import build_skeleton, normalized_adjacency
from .layers import Module
from .numerics import ShapeError, Tensor


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    topology: str = "kinetics18"
    center_joint: int | None = None
    num_classes: int = 400
    frames: int = 300
    persons: int = 2
    in_channels: int = 3
    semantics: str = "xy_conf"
    prm_hidden: int = 32
    pos_widths: tuple[int, int, int] = (64, 64, 64)
    mot_width: int = 64
    tconv_widths: tuple[int, int] = (128, 192)
    se_reduction: int = 4
    alpha: float = 0.001
    enable_prm: bool = True
    enable_tam: bool = True
    fusion_mode: str = "parallel_pm"
    dtype: str = "float32"
    seed: int = 0

    @property
    def fused_channels(self) -> int:
        return self.pos_widths[2] + self.tconv_widths[1]

    def validate(self) -> "ModelConfig":
        if self.frames < TEMPORAL_REDUCTION or self.frames % TEMPORAL_REDUCTION:
            raise ConfigError(f"frames={self.frames} must be a positive multiple of {TEMPORAL_REDUCTION}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode={self.fusion_mode!r} not in {FUSION_MODES}")
        if self.semantics not in ("xy_conf", "xyz"):
            raise ConfigError(f"semantics={self.semantics!r} must be xy_conf or xyz")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype={self.dtype!r} must be float32 or float64")
        if self.enable_tam and self.fused_channels % self.se_reduction:
            raise ConfigError(
                f"fused width {self.fused_channels} is not divisible by se_reduction={self.se_reduction}"
            )
        for name in ("num_classes", "persons", "in_channels", "prm_hidden", "mot_width", "se_reduction"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if len(self.pos_widths) != 3 or len(self.tconv_widths) != 2:
            raise ConfigError("pos_widths needs 3 entries and tconv_widths needs 2")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        return self

    # -- flat key = value text -------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pos_widths"] = list(self.pos_widths)
        d["tconv_widths"] = list(self.tconv_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(cls, k, v) for k, v in d.items()})


def _field_types(cls) -> dict[str, object]:
    return {f.name: f.default for f in dataclasses.fields(cls)}


def _coerce(cls, key: str, value):
    """Convert ``value`` (often a string from a text file) to the type of ``cls.key``'s default."""
    default = _field_types(cls)[key]
    if key == "center_joint":
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none")):
            return None
        return int(value)
    if isinstance(value, str):
        text = value.strip()
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        try:
            if isinstance(default, tuple):
                return tuple(int(v) for v in text.replace(",", " ").split())
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r}") from exc
        return text
    if isinstance(default, tuple):
        return tuple(int(v) for v in value)
    return value


def format_config_text(sections: dict[str, dict]) -> str:
    """Render ``{"model": {...}, "train": {...}}`` as dotted ``key = value`` lines."""
    lines = []
    for section, values in sections.items():
        for key, value in values.items():
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{section}.{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys keep their dots."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


# -- the network ---------------------------------------------------------------

class PrGcnModel(Module):
    """Pose refinement -> gradual fusion -> temporal aggregation (or pooling head).

    Inputs are (B, M, C, T, N) batches. Every person stream runs through the
    same weights; per-person class scores are combined with an elementwise max
    before the softmax.
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        self.skeleton = build_skeleton(config.topology, config.center_joint)
        self.adjacency = normalized_adjacency(self.skeleton, config.alpha)
        self.prm = (
            PoseRefinement(self.adjacency, config.in_channels, config.prm_hidden, config.semantics, rng, dtype)
            if config.enable_prm else None
        )
        self.gfm = GradualFusion(self.adjacency, config.in_channels, config.pos_widths, config.mot_width,
                                 config.tconv_widths, config.fusion_mode, rng, dtype)
        if config.enable_tam:
            self.tam = TemporalAggregation(self.adjacency, self.gfm.out_channels, config.num_classes,
                                           config.se_reduction, rng, dtype)
            self.head = None
        else:
            self.tam = None
            self.head = PoolingHead(self.gfm.out_channels, config.num_classes, rng, dtype)
        for name, p in self.named_parameters():
            p.name = name

    @property
    def num_joints(self) -> int:
        return self.skeleton.num_joints

    def _check_batch(self, batch: Tensor) -> tuple[int, int, int, int, int]:
        if batch.ndim != 5:
            raise ShapeError(f"expected a (B, M, C, T, N) batch, got shape {batch.shape}")
        b, m, c, t, n = batch.shape
        if c != self.config.in_channels:
            raise ShapeError(f"batch has {c} channels, model expects {self.config.in_channels}")
        if n != self.num_joints:
            raise ShapeError(f"batch has {n} joints, skeleton {self.config.topology} has {self.num_joints}")
        if t % TEMPORAL_REDUCTION:
            raise ShapeError(f"batch has {t} frames, not divisible by {TEMPORAL_REDUCTION}")
        return b, m, c, t, n

    def refine(self, batch) -> Tensor:
        """Pose-refined copy of the batch; the input itself when PRM is disabled."""
        batch = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=self.config.dtype)
        if batch.ndim != 5:
            raise ShapeError(f"expected a (B, M, C, T, N) batch, got shape {batch.shape}")
        if self.prm is None:
            return batch
        b, m, c, t, n = batch.shape
        return self.prm(batch.reshape(b * m, c, t, n)).reshape(b, m, c, t, n)

    def logits(self, batch) -> Tensor:
        batch = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=self.config.dtype)
        b, m, c, t, n = self._check_batch(batch)
        x = batch.reshape(b * m, c, t, n)
        if self.prm is not None:
            x = self.prm(x)
        f = self.gfm(x)
        scores = self.tam(f) if self.tam is not None else self.head(f)
        return scores.reshape(b, m, scores.shape[-1]).max(axis=1)

    def forward(self, batch) -> Tensor:
        return self.logits(batch).softmax(axis=-1)

    def blocks(self) -> dict[str, Module | None]:
        return {"prm": self.prm, "gfm": self.gfm, "tam": self.tam, "head": self.head}


def count_params(model: PrGcnModel) -> dict[str, int]:
    """Scalar parameter counts per block. The classifier always counts as ``head``."""
    counts = {"prm": 0, "gfm": 0, "tam": 0, "head": 0}
    for name, p in model.named_parameters():
        block = name.split(".", 1)[0]
        if name.startswith("tam.classifier."):
            block = "head"
        counts[block] += p.size
    counts["total"] = sum(counts.values())
    return counts


def count_flops(model: PrGcnModel) -> dict[str, int]:
    """FLOPs per block for one clip of ``config.frames`` frames and ``config.persons`` persons.

    A multiply-accumulate counts as two FLOPs; convolutions and adjacency
    products are counted, batch norm, activations and pooling are not.
    """
    cfg = model.config
    t, n, m = cfg.frames, model.num_joints, cfg.persons
    counts = {"prm": 0, "gfm": 0, "tam": 0, "head": 0}
    if model.prm is not None:
        counts["prm"] = m * model.prm.flops(t, n)
    counts["gfm"] = m * model.gfm.flops(t, n)
    t_out = model.gfm.output_frames(t)
    if model.tam is not None:
        counts["head"] = m * model.tam.classifier.flops(1, 1)
        counts["tam"] = m * model.tam.flops(t_out, n) - counts["head"]
    else:
        counts["head"] = m * model.head.flops(t_out, n)
    counts["total"] = sum(counts.values())
    return counts


# -- checkpoints -----------------------------------------------------------------
#
# Layout (little-endian):
#   b"PRGC" | u16 version | u32 header length | UTF-8 JSON header | payload | sha256(all preceding bytes)
# The header holds the model config and one entry per block: name, kind, dtype,
# shape, byte offset into the payload.

MAGIC = b"PRGC"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DIGEST = 32


def _state_entries(model: PrGcnModel, include_optimizer: bool):
    for name, p in model.named_parameters():
        yield name, "param", p.data
        if include_optimizer:
            yield name, "momentum", p.momentum_buffer
    for name, buf in model.named_buffers():
        yield name, "buffer", buf


def save_checkpoint(model: PrGcnModel, include_optimizer: bool = False) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, kind, arr in _state_entries(model, include_optimizer):
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "kind": kind, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "entries": entries}, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def read_checkpoint_header(data: bytes) -> tuple[dict, memoryview]:
    """Verify framing and checksum; return the header and the payload view."""
    if len(data) < _PREFIX.size + _DIGEST:
        raise CheckpointError("checkpoint is truncated (shorter than its fixed framing)")
    magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError("not a PR-GCN checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint integrity check failed (truncated or corrupted)")
    start = _PREFIX.size + header_len
    try:
        header = json.loads(bytes(data[_PREFIX.size:start]).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header is unreadable: {exc}") from exc
    return header, memoryview(body)[start:]


def load_checkpoint(data: bytes, config: ModelConfig | None = None) -> PrGcnModel:
    """Rebuild a model from ``save_checkpoint`` output.

    With ``config`` given, every block's shape is checked against the model
    that config builds and any differing config field is reported.
    """
    header, payload = read_checkpoint_header(data)
    stored = ModelConfig.from_dict(header["config"])
    config = stored if config is None else config
    model = PrGcnModel(config)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())

    stored_names = {e["name"] for e in header["entries"] if e["kind"] != "momentum"}
    expected = set(params) | set(buffers)
    if stored_names != expected:
        missing, extra = sorted(expected - stored_names), sorted(stored_names - expected)
        raise CheckpointError(f"checkpoint blocks do not match the model: missing {missing}, unexpected {extra}")

    arrays = []
    for e in header["entries"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"block {e['name']} runs past the end of the payload")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        target = params[e["name"]].data if e["kind"] != "buffer" else buffers[e["name"]]
        if arr.shape != target.shape:
            raise CheckpointError(
                f"block {e['name']} has shape {tuple(arr.shape)} in the checkpoint "
                f"but {target.shape} in the requested model"
            )
        arrays.append((e, arr))

    diffs = [k for k, v in config.to_dict().items() if header["config"].get(k) != v and k != "seed"]
    if diffs:
        detail = ", ".join(f"{k} (checkpoint {header['config'].get(k)!r}, requested {getattr(config, k)!r})"
                           for k in diffs)
        raise CheckpointError(f"config mismatch: {detail}")

    for e, arr in arrays:
        if e["kind"] == "param":
            params[e["name"]].data[...] = arr
        elif e["kind"] == "momentum":
            params[e["name"]].momentum_buffer[...] = arr
        else:
            buffers[e["name"]][...] = arr
    return model


def save_checkpoint_file(model: PrGcnModel, path, include_optimizer: bool = False) -> None:
    Path(path).write_bytes(save_checkpoint(model, include_optimizer))


def load_checkpoint_file(path, config: ModelConfig | None = None) -> PrGcnModel:
    return load_checkpoint(Path(path).read_bytes(), config)
