"""Skeleton clips: Kinetics-skeleton JSON I/O, length fitting, augmentation, synthetic actions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_PERSONS = 2
KINETICS_JOINTS = 18


class ClipFormatError(ValueError):
    pass


@dataclass
class SkeletonSequence:
    coords: np.ndarray  # (M, C, T, N)
    label: int = -1
    semantics: str = "xy_conf"
    id: str = ""

    @property
    def frames(self) -> int:
        return self.coords.shape[2]

    @property
    def num_joints(self) -> int:
        return self.coords.shape[3]


@dataclass
class AugmentParams:
    """Symmetric ranges: rotation in degrees, scale as a deviation from 1, translation in coordinate units."""

    rotation: float = 10.0
    scale: float = 0.1
    translation: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("rotation", "scale", "translation"):
            if getattr(self, name) < 0:
                raise ValueError(f"augmentation range {name} must be non-negative")
        if self.scale >= 1:
            raise ValueError("scale deviation must stay below 1")


# -- Kinetics-skeleton clip files ------------------------------------------------

def _ranked_people(skeletons, num_joints: int, where: str) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """``(list index, pose, score)`` per person, highest summed confidence first (stable)."""
    people = []
    for k, person in enumerate(skeletons):
        try:
            pose = np.asarray(person["pose"], dtype=np.float64)
            score = np.asarray(person["score"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ClipFormatError(f"{where} has a malformed person record") from exc
        if pose.shape != (2 * num_joints,) or score.shape != (num_joints,):
            raise ClipFormatError(
                f"{where} person has {pose.size // 2} pose joints and {score.size} scores, expected {num_joints}"
            )
        people.append((k, pose, score))
    people.sort(key=lambda item: -item[2].sum())
    return people


def parse_kinetics_clip(record: dict, num_joints: int = KINETICS_JOINTS, clip_id: str = "",
                        max_persons: int = MAX_PERSONS) -> SkeletonSequence:
    """Convert one clip object into a (M, 3, T, N) ``xy_conf`` sequence.

    Frames are placed by ``frame_index`` relative to the smallest index in the
    clip. Per frame the ``max_persons`` skeletons with the largest summed
    confidence are kept. x and y are shifted by -0.5; joints with zero
    confidence are stored as all zeros.
    """
    frames = record.get("data")
    if not isinstance(frames, list):
        raise ClipFormatError(f"{clip_id or 'clip'}: missing 'data' frame list")
    indices = []
    for pos, frame in enumerate(frames):
        try:
            indices.append(int(frame["frame_index"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ClipFormatError(f"{clip_id or 'clip'}: frame {pos} has no valid frame_index") from exc
    first = min(indices, default=0)
    length = max(1, max(indices, default=0) - first + 1)
    coords = np.zeros((max_persons, 3, length, num_joints))

    for pos, (frame, index) in enumerate(zip(frames, indices)):
        skeletons = frame.get("skeleton", [])
        if not isinstance(skeletons, list):
            raise ClipFormatError(f"{clip_id or 'clip'}: frame {index} has a malformed skeleton list")
        people = _ranked_people(skeletons, num_joints, f"{clip_id or 'clip'}: frame {index}")
        t = index - first
        for m, (_, pose, score) in enumerate(people[:max_persons]):
            present = score > 0
            coords[m, 0, t] = np.where(present, pose[0::2] - 0.5, 0.0)
            coords[m, 1, t] = np.where(present, pose[1::2] - 0.5, 0.0)
            coords[m, 2, t] = score
    label = record.get("label_index", -1)
    return SkeletonSequence(coords, int(label) if label is not None else -1, "xy_conf", clip_id)


def read_clip_record(path) -> dict:
    path = Path(path)
    try:
        record = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ClipFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(record, dict):
        raise ClipFormatError(f"{path}: expected a JSON object")
    return record


def load_kinetics_clip(path, num_joints: int = KINETICS_JOINTS, max_persons: int = MAX_PERSONS) -> SkeletonSequence:
    path = Path(path)
    return parse_kinetics_clip(read_clip_record(path), num_joints, path.stem, max_persons)


def offset_record(record: dict, offsets: np.ndarray, num_joints: int = KINETICS_JOINTS,
                  max_persons: int = MAX_PERSONS) -> dict:
    """Copy of ``record`` with (M, 2, T, N) coordinate offsets added to the stored poses.

    Offsets are matched to persons and frames exactly as :func:`parse_kinetics_clip`
    places them. Joints with zero confidence, persons beyond ``max_persons`` and
    all scores are copied untouched, as is every value whose offset is zero.
    """
    out = json.loads(json.dumps(record))
    parse_kinetics_clip(record, num_joints, max_persons=max_persons)  # validates the structure
    first = min((int(f["frame_index"]) for f in out["data"]), default=0)
    for frame in out["data"]:
        t = int(frame["frame_index"]) - first
        skeletons = frame.get("skeleton", [])
        for m, (k, _, score) in enumerate(_ranked_people(skeletons, num_joints, "")[:max_persons]):
            pose = skeletons[k]["pose"]
            for j in range(num_joints):
                if score[j] <= 0:
                    continue
                for axis in (0, 1):
                    d = float(offsets[m, axis, t, j])
                    if d != 0.0:
                        pose[2 * j + axis] = pose[2 * j + axis] + d
    return out


def clip_record(seq: SkeletonSequence, label_name: str = "") -> dict:
    """Inverse of :func:`parse_kinetics_clip` for one sequence (frame indices start at 0)."""
    if seq.semantics != "xy_conf":
        raise ClipFormatError("only xy_conf sequences can be written in the Kinetics-skeleton format")
    m, _, t, n = seq.coords.shape
    data = []
    for ti in range(t):
        people = []
        for mi in range(m):
            x, y, conf = seq.coords[mi, :, ti]
            if not np.any(conf > 0):
                continue
            pose = np.empty(2 * n)
            pose[0::2] = np.where(conf > 0, x + 0.5, 0.0)
            pose[1::2] = np.where(conf > 0, y + 0.5, 0.0)
            people.append({"pose": [round(float(v), 6) for v in pose],
                           "score": [round(float(v), 6) for v in conf]})
        data.append({"frame_index": ti, "skeleton": people})
    return {"data": data, "label": label_name or str(seq.label), "label_index": int(seq.label)}


def write_kinetics_clip(seq: SkeletonSequence, path, label_name: str = "") -> None:
    Path(path).write_text(json.dumps(clip_record(seq, label_name)))


def read_manifest(path) -> list[tuple[Path, int]]:
    """Lines of ``<clip path> <label>``; relative paths resolve against the manifest's folder."""
    path = Path(path)
    entries = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.rsplit(maxsplit=1)
        if len(parts) != 2:
            raise ClipFormatError(f"{path}:{lineno}: expected '<clip path> <label>'")
        try:
            label = int(parts[1])
        except ValueError as exc:
            raise ClipFormatError(f"{path}:{lineno}: label {parts[1]!r} is not an integer") from exc
        clip = Path(parts[0])
        entries.append((clip if clip.is_absolute() else path.parent / clip, label))
    return entries


def write_manifest(entries, path) -> None:
    path = Path(path)
    lines = []
    for clip, label in entries:
        clip = Path(clip)
        try:
            clip = clip.relative_to(path.parent)
        except ValueError:
            pass
        lines.append(f"{clip} {label}")
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path, num_joints: int = KINETICS_JOINTS, max_persons: int = MAX_PERSONS) -> list[SkeletonSequence]:
    out = []
    for clip, label in read_manifest(path):
        seq = load_kinetics_clip(clip, num_joints, max_persons)
        seq.label = label
        out.append(seq)
    return out


# -- preprocessing ----------------------------------------------------------------

def fit_length(seq: SkeletonSequence | np.ndarray, frames: int, mode: str = "eval", rng=None) -> np.ndarray:
    """Crop or loop-pad a (M, C, T_raw, N) clip to exactly ``frames`` frames.

    Longer clips give a random window in ``train`` mode and the centered window
    in ``eval`` mode. Shorter clips repeat from the start.
    """
    x = seq.coords if isinstance(seq, SkeletonSequence) else np.asarray(seq)
    t_raw = x.shape[2]
    if t_raw < 1:
        raise ValueError("cannot fit an empty clip")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if t_raw > frames:
        if mode == "train":
            rng = np.random.default_rng() if rng is None else rng
            start = int(rng.integers(0, t_raw - frames + 1))
        else:
            start = (t_raw - frames) // 2
        return x[:, :, start:start + frames].copy()
    return np.take(x, np.arange(frames) % t_raw, axis=2)


def apply_transform(x: np.ndarray, angle_deg: float, scale: float, shift, semantics: str = "xy_conf") -> np.ndarray:
    """Rotate (counter-clockwise; yaw about y for xyz), scale and translate the coordinates.

    Joints that are missing (all-zero entries) stay zero.
    """
    out = np.array(x, copy=True)
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    if semantics == "xy_conf":
        present = x[:, 2] > 0
        a, b = x[:, 0], x[:, 1]
        shift = tuple(shift) + (0.0,) * (2 - len(shift))
        out[:, 0] = np.where(present, scale * (c * a - s * b) + shift[0], 0.0)
        out[:, 1] = np.where(present, scale * (s * a + c * b) + shift[1], 0.0)
    elif semantics == "xyz":
        present = np.any(x != 0, axis=1)
        a, y, b = x[:, 0], x[:, 1], x[:, 2]
        shift = tuple(shift) + (0.0,) * (3 - len(shift))
        out[:, 0] = np.where(present, scale * (c * a + s * b) + shift[0], 0.0)
        out[:, 1] = np.where(present, scale * y + shift[1], 0.0)
        out[:, 2] = np.where(present, scale * (-s * a + c * b) + shift[2], 0.0)
    else:
        raise ValueError(f"unknown channel semantics {semantics!r}")
    return out


def augment(x: np.ndarray, params: AugmentParams, semantics: str = "xy_conf", rng=None) -> np.ndarray:
    """One random rotation, uniform scale and translation for the whole clip."""
    rng = np.random.default_rng(params.seed) if rng is None else rng
    angle = rng.uniform(-params.rotation, params.rotation)
    scale = 1.0 + rng.uniform(-params.scale, params.scale)
    dims = 2 if semantics == "xy_conf" else 3
    shift = rng.uniform(-params.translation, params.translation, size=dims)
    if semantics == "xyz":
        shift[1] = 0.0  # yaw-only augmentation keeps height fixed
    return apply_transform(x, angle, scale, shift, semantics)


# -- synthetic actions -----------------------------------------------------------

@dataclass
class SyntheticSet:
    sequences: list[SkeletonSequence]
    topology: str
    frequencies: list[float] = field(default_factory=list)
    frequency_step: float = 0.0


def generate_synthetic(num_classes: int, per_class: int, num_joints: int = 5, frames: int = 30,
                       seed: int = 0, base_frequency: float = 1.0, frequency_step: float = 1.0,
                       amplitude: float = 0.12, noise: float = 0.002) -> SyntheticSet:
    """Oscillating chain skeletons, one class per (frequency, phase-lag) pattern.

    Class ``k`` swings at ``base_frequency + k * frequency_step`` cycles per
    clip; the phase lag between neighbouring joints is ``k * pi / num_classes``
    so each class also has its own travelling-wave shape along the chain.
    Samples differ by a random global phase, a +-5% gain and Gaussian noise.
    The skeleton is the ``chainN`` preset, one person, ``xy_conf`` channels
    with full confidence.
    """
    if not 1 <= num_classes <= 16:
        raise ValueError("num_classes must be in [1, 16]")
    rng = np.random.default_rng(seed)
    t = np.arange(frames) / frames
    j = np.arange(num_joints)
    rest_y = (j - (num_joints - 1) / 2) * 0.08
    swing = amplitude * (1.0 + j / max(num_joints - 1, 1)) / 2
    freqs = [base_frequency + k * frequency_step for k in range(num_classes)]
    sequences = []
    for k, f in enumerate(freqs):
        lag = k * np.pi / num_classes
        for s in range(per_class):
            phase0 = rng.uniform(0, 2 * np.pi)
            gain = rng.uniform(0.95, 1.05)
            angle = 2 * np.pi * f * t[:, None] + phase0 + lag * j[None, :]
            x = gain * swing[None, :] * np.sin(angle)
            y = rest_y[None, :] + 0.5 * gain * swing[None, :] * np.cos(angle)
            coords = np.zeros((1, 3, frames, num_joints))
            coords[0, 0] = x + rng.normal(0, noise, x.shape)
            coords[0, 1] = y + rng.normal(0, noise, y.shape)
            coords[0, 2] = 1.0
            sequences.append(SkeletonSequence(coords, k, "xy_conf", f"synth_c{k:02d}_{s:03d}"))
    return SyntheticSet(sequences, f"chain{num_joints}", freqs, frequency_step)


def motion_magnitude_features(seq: SkeletonSequence) -> np.ndarray:
    """Mean per-joint speed of the first person; a cheap hand-crafted descriptor."""
    xy = seq.coords[0, :2]
    return np.linalg.norm(np.diff(xy, axis=1), axis=0).mean(axis=0)


def nearest_centroid_accuracy(train: list[SkeletonSequence], test: list[SkeletonSequence]) -> float:
    """Accuracy of a nearest-centroid classifier on motion-magnitude features."""
    feats = np.stack([motion_magnitude_features(s) for s in train])
    labels = np.array([s.label for s in train])
    classes = np.unique(labels)
    centroids = np.stack([feats[labels == c].mean(axis=0) for c in classes])
    hits = 0
    for s in test:
        d = np.linalg.norm(centroids - motion_magnitude_features(s), axis=1)
        hits += int(classes[np.argmin(d)] == s.label)
    return hits / len(test)
