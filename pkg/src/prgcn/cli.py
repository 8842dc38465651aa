"""Command-line interface: ``prgcn {train,eval,infer,refine,count,synth}``.

Configuration comes from a text file of dotted ``section.key = value`` lines
(sections ``model``, ``train`` and ``synth``) and from repeatable
``--set key=value`` overrides applied on top. A bare key names a model field,
or a training field when the model has no such field.

Exit codes: 0 success, 2 usage/config/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .data import (
    ClipFormatError, SkeletonSequence, fit_length, generate_synthetic, load_kinetics_clip, load_manifest,
    offset_record, read_clip_record, write_kinetics_clip, write_manifest,
)
from .graph import GraphError, build_skeleton
from .model import (
    CheckpointError, ConfigError, ModelConfig, PrGcnModel, _coerce, count_flops, count_params,
    format_config_text, load_checkpoint_file, parse_config_text, save_checkpoint,
)
from .numerics import ShapeError, Tensor, no_grad
from .trainer import TrainConfig, TrainingDiverged, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("prgcn")


class UsageError(Exception):
    pass


@dataclasses.dataclass
class SynthConfig:
    classes: int = 5
    per_class: int = 10
    joints: int = 5
    frames: int = 30
    frequency_step: float = 1.0
    amplitude: float = 0.12
    noise: float = 0.002
    seed: int = 0


# widths small enough to train on a laptop CPU in seconds per epoch
TOY_WIDTHS = {"prm_hidden": 8, "pos_widths": (16, 16, 16), "mot_width": 16, "tconv_widths": (32, 32)}

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthConfig}


# -- configuration ---------------------------------------------------------------

def _split_key(key: str) -> tuple[str, str]:
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in {key!r}")
    elif key in {f.name for f in dataclasses.fields(ModelConfig)}:
        section, name = "model", key
    elif key in {f.name for f in dataclasses.fields(TrainConfig)}:
        section, name = "train", key
    else:
        raise ConfigError(f"unknown config key {key!r}")
    if name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
        raise ConfigError(f"unknown {section} config key {name!r}")
    return section, name


def _build(cls, values: dict):
    try:
        return cls(**{k: _coerce(cls, k, v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_configs(config_path: str | None, overrides: list[str], seed: int | None):
    """Resolve (ModelConfig, TrainConfig, SynthConfig) from file, overrides and ``--seed``."""
    raw: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        for key, value in parse_config_text(path.read_text()).items():
            section, name = _split_key(key)
            raw[section][name] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        section, name = _split_key(key)
        raw[section][name] = value
    if seed is not None:
        for section in raw.values():
            section["seed"] = str(seed)
    model_cfg = _build(ModelConfig, raw["model"]).validate()
    train_cfg = _build(TrainConfig, raw["train"])
    try:
        train_cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    synth_cfg = _build(SynthConfig, raw["synth"])
    try:
        build_skeleton(model_cfg.topology, model_cfg.center_joint)
    except (GraphError, OSError, ValueError) as exc:
        raise ConfigError(f"topology {model_cfg.topology!r}: {exc}") from exc
    return model_cfg, train_cfg, synth_cfg


# -- helpers -----------------------------------------------------------------------

def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _require_out_dir(path: str | None, what: str = "out") -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    parent = p.parent if p.parent != Path("") else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")
    return p


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, sort_keys=True) if args.json else text)


def _load_model(args, model_cfg: ModelConfig | None = None) -> PrGcnModel:
    path = _require_file(args.checkpoint, "checkpoint")
    return load_checkpoint_file(path, model_cfg)


def _stack(model: PrGcnModel, seq: SkeletonSequence) -> Tensor:
    x = fit_length(seq, model.config.frames, "eval")
    return Tensor(x[None].astype(model.config.dtype))


# -- commands --------------------------------------------------------------------

def cmd_train(args) -> int:
    model_cfg, train_cfg, _ = load_configs(args.config, args.set, args.seed)
    manifest = _require_file(args.manifest, "manifest")
    ckpt = _require_out_dir(args.checkpoint, "checkpoint")
    log_path = Path(args.out) if args.out else ckpt.with_name(ckpt.name + ".log.jsonl")
    _require_out_dir(str(log_path))
    n = build_skeleton(model_cfg.topology, model_cfg.center_joint).num_joints
    dataset = load_manifest(manifest, n, model_cfg.persons)
    if not dataset:
        raise UsageError(f"manifest {manifest} lists no clips")
    bad = [s.id for s in dataset if not 0 <= s.label < model_cfg.num_classes]
    if bad:
        raise UsageError(f"labels outside [0, {model_cfg.num_classes}) in clips {bad[:5]}")

    model = PrGcnModel(model_cfg)
    fd, tmp_log = tempfile.mkstemp(dir=log_path.parent, prefix=f".{log_path.name}.")
    os.close(fd)
    try:
        metrics = train(model, dataset, train_cfg, log_path=tmp_log)
        _atomic_write(ckpt, save_checkpoint(model, include_optimizer=True))
        os.replace(tmp_log, log_path)
    finally:
        Path(tmp_log).unlink(missing_ok=True)
    _emit(args, {"top1": metrics.top1, "top5": metrics.top5, "loss": metrics.loss,
                 "checkpoint": str(ckpt), "log": str(log_path)},
          f"top1 {metrics.top1:.4f}  top5 {metrics.top5:.4f}  loss {metrics.loss:.4f}\n"
          f"checkpoint {ckpt}\nlog {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = _require_file(args.manifest, "manifest")
    model = _load_model(args)
    dataset = load_manifest(manifest, model.num_joints, model.config.persons)
    if not dataset:
        raise UsageError(f"manifest {manifest} lists no clips")
    bad = [s.id for s in dataset if not 0 <= s.label < model.config.num_classes]
    if bad:
        raise UsageError(f"labels outside [0, {model.config.num_classes}) in clips {bad[:5]}")
    m = evaluate(model, dataset)
    _emit(args, {"top1": m.top1, "top5": m.top5, "loss": m.loss, "clips": len(dataset)},
          f"clips {len(dataset)}  top1 {m.top1:.4f}  top5 {m.top5:.4f}  loss {m.loss:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    clip = _require_file(args.clip, "clip")
    model = _load_model(args)
    seq = load_kinetics_clip(clip, model.num_joints, model.config.persons)
    model.eval()
    with no_grad():
        probs = model(_stack(model, seq)).data[0]
    order = np.argsort(-probs, kind="stable")[:5]
    top = [{"class": int(k), "probability": float(probs[k])} for k in order]
    _emit(args, {"clip": str(clip), "top5": top},
          "\n".join(f"{r['class']:>5d}  {r['probability']:.4f}" for r in top))
    return EXIT_OK


def cmd_refine(args) -> int:
    clip = _require_file(args.clip, "clip")
    out = _require_out_dir(args.out)
    model = _load_model(args)
    record = read_clip_record(clip)
    persons = model.config.persons
    seq = load_kinetics_clip(clip, model.num_joints, persons)
    if model.prm is None:
        offsets = np.zeros((persons, 2) + seq.coords.shape[2:])
    else:
        model.eval()
        with no_grad():
            x = Tensor(seq.coords.astype(model.config.dtype))
            offsets = model.prm.offsets(x).data.astype(np.float64)
        offsets = offsets[:, :2]
    refined = offset_record(record, offsets, model.num_joints, persons)
    _atomic_write(out, json.dumps(refined).encode())
    _emit(args, {"clip": str(clip), "out": str(out), "frames": seq.frames, "joints": seq.num_joints,
                 "max_offset": float(np.abs(offsets).max(initial=0.0))},
          f"wrote {out} ({seq.frames} frames, {seq.num_joints} joints, "
          f"max |offset| {np.abs(offsets).max(initial=0.0):.6f})")
    return EXIT_OK


def cmd_count(args) -> int:
    model_cfg, _, _ = load_configs(args.config, args.set, args.seed)
    model = PrGcnModel(model_cfg)
    params, flops = count_params(model), count_flops(model)
    rows = [f"{'block':<6} {'params':>12} {'GFLOP':>10}"]
    for block in ("prm", "gfm", "tam", "head", "total"):
        rows.append(f"{block:<6} {params[block]:>12,d} {flops[block] / 1e9:>10.4f}")
    _emit(args, {"params": params, "flops": flops}, "\n".join(rows))
    return EXIT_OK


def cmd_synth(args) -> int:
    model_cfg, train_cfg, synth = load_configs(args.config, args.set, args.seed)
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise UsageError(f"output directory must be new or empty: {out}")
    if synth.frames % 6:
        raise ConfigError(f"synth.frames={synth.frames} must be a multiple of 6")
    data = generate_synthetic(synth.classes, synth.per_class, synth.joints, synth.frames, synth.seed,
                              frequency_step=synth.frequency_step, amplitude=synth.amplitude, noise=synth.noise)
    created = not out.exists()
    try:
        (out / "clips").mkdir(parents=True, exist_ok=True)
        entries = []
        for seq in data.sequences:
            path = out / "clips" / f"{seq.id}.json"
            write_kinetics_clip(seq, path, label_name=f"class_{seq.label}")
            entries.append((path, seq.label))
        write_manifest(entries, out / "manifest.txt")
        toy = dataclasses.replace(
            model_cfg, topology=data.topology, center_joint=None, num_classes=synth.classes,
            frames=synth.frames, persons=1, **TOY_WIDTHS,
        )
        (out / "config.txt").write_text(format_config_text({
            "model": toy.to_dict(), "train": dataclasses.asdict(train_cfg), "synth": dataclasses.asdict(synth),
        }))
    except BaseException:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise
    _emit(args, {"out": str(out), "clips": len(entries), "topology": data.topology},
          f"wrote {len(entries)} clips, manifest and config to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "refine": cmd_refine,
            "count": cmd_count, "synth": cmd_synth}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prgcn", description="Skeleton action recognition with PR-GCN.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="text file of 'section.key = value' lines")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value (repeatable, dotted keys)")
    common.add_argument("--seed", type=int, help="seed for every randomized step")
    common.add_argument("--manifest", help="dataset manifest: '<clip path> <label>' per line")
    common.add_argument("--checkpoint", help="model checkpoint (written by train, read otherwise)")
    common.add_argument("--out", help="output path")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train on a manifest and write a checkpoint and log")
    sub.add_parser("eval", parents=[common], help="top-1/top-5 of a checkpoint on a manifest")
    for name, desc in (("infer", "top-5 classes for one clip"), ("refine", "write a pose-refined copy of a clip")):
        p = sub.add_parser(name, parents=[common], help=desc)
        p.add_argument("clip", help="clip file in the Kinetics-skeleton format")
    sub.add_parser("count", parents=[common], help="parameter and FLOP totals per block")
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset, manifest and toy config")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CheckpointError, ClipFormatError, ShapeError, GraphError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
