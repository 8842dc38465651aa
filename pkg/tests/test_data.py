import json

import numpy as np
import pytest

from prgcn.data import (
    AugmentParams, ClipFormatError, SkeletonSequence, apply_transform, augment, clip_record, fit_length,
    generate_synthetic, load_kinetics_clip, load_manifest, nearest_centroid_accuracy, offset_record,
    parse_kinetics_clip, read_manifest, write_kinetics_clip, write_manifest,
)


def person(xs, ys, scores):
    pose = [v for pair in zip(xs, ys) for v in pair]
    return {"pose": pose, "score": list(scores)}


def uniform_person(x, y, score, n=18):
    return person([x] * n, [y] * n, [score] * n)


# -- clip files ----------------------------------------------------------------------------

def test_hand_written_single_person_clip(tmp_path):
    xs = [0.1 * (j % 10) for j in range(18)]
    ys = [0.05 * j for j in range(18)]
    scores = [0.5 + 0.02 * j for j in range(18)]
    record = {"label": "wave", "label_index": 7,
              "data": [{"frame_index": 0, "skeleton": [person(xs, ys, scores)]}]}
    path = tmp_path / "clip.json"
    path.write_text(json.dumps(record))
    seq = load_kinetics_clip(path)
    assert seq.coords.shape == (2, 3, 1, 18) and seq.label == 7 and seq.id == "clip"
    np.testing.assert_allclose(seq.coords[0, 0, 0], np.array(xs) - 0.5)
    np.testing.assert_allclose(seq.coords[0, 1, 0], np.array(ys) - 0.5)
    np.testing.assert_allclose(seq.coords[0, 2, 0], scores)
    assert np.all(seq.coords[1] == 0)


def test_empty_frames_load_as_zeros():
    record = {"data": [{"frame_index": 0, "skeleton": []}, {"frame_index": 1, "skeleton": []}]}
    seq = parse_kinetics_clip(record)
    assert seq.coords.shape == (2, 3, 2, 18) and np.all(seq.coords == 0)
    assert parse_kinetics_clip({"data": []}).coords.shape[2] == 1


def test_missing_joints_are_all_zero():
    scores = [1.0] * 18
    scores[4] = 0.0
    seq = parse_kinetics_clip({"data": [{"frame_index": 0, "skeleton": [person([0.9] * 18, [0.8] * 18, scores)]}]})
    assert np.all(seq.coords[0, :, 0, 4] == 0)
    assert np.all(seq.coords[0, 0, 0, 5] == pytest.approx(0.4))


def test_joint_count_is_enforced():
    bad = {"data": [{"frame_index": 3, "skeleton": [uniform_person(0.5, 0.5, 1.0, n=17)]}]}
    with pytest.raises(ClipFormatError, match="frame 3"):
        parse_kinetics_clip(bad)


def test_malformed_person_names_frame():
    with pytest.raises(ClipFormatError, match="frame 2"):
        parse_kinetics_clip({"data": [{"frame_index": 2, "skeleton": [{"pose": [0.1]}]}]})
    with pytest.raises(ClipFormatError):
        parse_kinetics_clip({"nothing": 1})


def test_only_the_two_most_confident_people_are_kept():
    people = [uniform_person(0.1, 0.1, 0.2), uniform_person(0.2, 0.2, 0.9), uniform_person(0.3, 0.3, 0.5)]
    seq = parse_kinetics_clip({"data": [{"frame_index": 0, "skeleton": people}]})
    np.testing.assert_allclose(seq.coords[:, 2, 0, 0], [0.9, 0.5])
    np.testing.assert_allclose(seq.coords[:, 0, 0, 0], [0.2 - 0.5, 0.3 - 0.5])


def test_frames_are_placed_by_frame_index():
    frames = [{"frame_index": 12, "skeleton": [uniform_person(0.7, 0.7, 1.0)]},
              {"frame_index": 10, "skeleton": [uniform_person(0.6, 0.6, 1.0)]}]
    seq = parse_kinetics_clip({"data": frames})
    assert seq.frames == 3
    np.testing.assert_allclose(seq.coords[0, 0, :, 0], [0.1, 0.0, 0.2])
    assert np.all(seq.coords[0, 2, 1] == 0)


def test_clip_write_read_round_trip(tmp_path):
    data = generate_synthetic(2, 1, num_joints=18, frames=6, seed=3)
    seq = data.sequences[1]
    path = tmp_path / "s.json"
    write_kinetics_clip(seq, path)
    again = load_kinetics_clip(path, 18, max_persons=1)
    np.testing.assert_allclose(again.coords, seq.coords, atol=1e-6)
    assert again.label == seq.label


def test_manifest_round_trip(tmp_path):
    data = generate_synthetic(3, 2, num_joints=5, frames=6)
    (tmp_path / "clips").mkdir()
    entries = []
    for seq in data.sequences:
        path = tmp_path / "clips" / f"{seq.id}.json"
        write_kinetics_clip(seq, path)
        entries.append((path, seq.label))
    write_manifest(entries, tmp_path / "m.txt")
    assert (tmp_path / "m.txt").read_text().startswith("clips/")
    assert [label for _, label in read_manifest(tmp_path / "m.txt")] == [0, 0, 1, 1, 2, 2]
    loaded = load_manifest(tmp_path / "m.txt", num_joints=5, max_persons=1)
    assert len(loaded) == 6 and loaded[3].coords.shape == (1, 3, 6, 5)


def test_manifest_label_must_be_integer(tmp_path):
    (tmp_path / "m.txt").write_text("a.json one\n")
    with pytest.raises(ClipFormatError, match="m.txt:1"):
        read_manifest(tmp_path / "m.txt")


def test_offset_record_zero_is_exact_and_nonzero_moves_present_joints():
    scores = [1.0] * 18
    scores[0] = 0.0
    xs = [0.123456789012345] * 18
    record = {"data": [{"frame_index": 5, "skeleton": [uniform_person(0.2, 0.2, 0.1), person(xs, xs, scores)]}]}
    same = offset_record(record, np.zeros((2, 2, 1, 18)))
    assert same == record
    offsets = np.zeros((2, 2, 1, 18))
    offsets[0, 0, 0, :] = 0.01  # slot 0 is the second (more confident) person
    moved = offset_record(record, offsets)
    pose = moved["data"][0]["skeleton"][1]["pose"]
    assert pose[0] == xs[0]  # zero-confidence joint untouched
    assert pose[2] == pytest.approx(xs[1] + 0.01) and pose[3] == xs[1]
    assert moved["data"][0]["skeleton"][0] == record["data"][0]["skeleton"][0]


def test_clip_record_only_for_2d():
    with pytest.raises(ClipFormatError):
        clip_record(SkeletonSequence(np.zeros((1, 3, 2, 4)), 0, "xyz"))


# -- preprocessing ---------------------------------------------------------------------------

def test_fit_length_identity_loop_and_crop():
    x = np.arange(3, dtype=float).reshape(1, 1, 3, 1)
    assert np.array_equal(fit_length(x, 3), x)
    np.testing.assert_array_equal(fit_length(x, 6)[0, 0, :, 0], [0, 1, 2, 0, 1, 2])
    long = np.arange(10, dtype=float).reshape(1, 1, 10, 1)
    np.testing.assert_array_equal(fit_length(long, 4)[0, 0, :, 0], [3, 4, 5, 6])


def test_fit_length_train_mode_is_seeded():
    long = np.arange(50, dtype=float).reshape(1, 1, 50, 1)
    a = fit_length(long, 8, "train", np.random.default_rng(4))
    b = fit_length(long, 8, "train", np.random.default_rng(4))
    assert np.array_equal(a, b) and a.shape[2] == 8
    assert np.array_equal(np.diff(a[0, 0, :, 0]), np.ones(7))


def test_zero_ranges_are_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
    x[:, 2] = 1.0
    out = augment(x, AugmentParams(0, 0, 0), rng=np.random.default_rng(1))
    np.testing.assert_allclose(out, x, atol=1e-15)


def test_translation_preserves_distances():
    x = np.random.default_rng(0).normal(size=(1, 3, 2, 6))
    x[:, 2] = 1.0
    out = apply_transform(x, 0.0, 1.0, (0.3, -0.2))
    d_in = np.linalg.norm(x[0, :2, 0, :, None] - x[0, :2, 0, None, :], axis=0)
    d_out = np.linalg.norm(out[0, :2, 0, :, None] - out[0, :2, 0, None, :], axis=0)
    np.testing.assert_allclose(d_in, d_out, atol=1e-12)


def test_rotation_by_ninety_degrees():
    x = np.zeros((1, 3, 1, 1))
    x[0, :, 0, 0] = [1.0, 0.0, 0.8]
    out = apply_transform(x, 90.0, 1.0, (0.0, 0.0))
    np.testing.assert_allclose(out[0, :, 0, 0], [0.0, 1.0, 0.8], atol=1e-15)


def test_yaw_rotation_for_xyz():
    x = np.zeros((1, 3, 1, 1))
    x[0, :, 0, 0] = [1.0, 2.0, 0.0]
    out = apply_transform(x, 90.0, 1.0, (0, 0, 0), semantics="xyz")
    np.testing.assert_allclose(out[0, :, 0, 0], [0.0, 2.0, -1.0], atol=1e-15)


def test_augmentation_keeps_missing_joints_and_confidence():
    x = np.random.default_rng(0).uniform(size=(2, 3, 4, 5))
    x[:, :, :, 1] = 0.0
    out = augment(x, AugmentParams(), rng=np.random.default_rng(2))
    assert np.all(out[:, :, :, 1] == 0)
    assert np.array_equal(out[:, 2], x[:, 2])


def test_augment_params_validation():
    with pytest.raises(ValueError):
        AugmentParams(rotation=-1)
    with pytest.raises(ValueError):
        AugmentParams(scale=1.0)


# -- synthetic actions --------------------------------------------------------------------------

def test_synthetic_is_reproducible():
    a, b = generate_synthetic(4, 3, seed=11), generate_synthetic(4, 3, seed=11)
    assert all(np.array_equal(x.coords, y.coords) for x, y in zip(a.sequences, b.sequences))
    c = generate_synthetic(4, 3, seed=12)
    assert not np.array_equal(a.sequences[0].coords, c.sequences[0].coords)


def test_synthetic_frequency_increment():
    data = generate_synthetic(5, 2, frequency_step=0.5)
    assert data.frequencies[1] - data.frequencies[0] == pytest.approx(0.5)
    assert data.topology == "chain5"
    assert [s.label for s in data.sequences] == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]


def test_synthetic_dominant_frequency_matches_class():
    data = generate_synthetic(3, 1, frames=60, frequency_step=1.0, base_frequency=2.0, noise=0.0)
    for seq, f in zip(data.sequences, data.frequencies):
        spectrum = np.abs(np.fft.rfft(seq.coords[0, 0, :, -1]))
        assert np.argmax(spectrum) == round(f)


def test_nearest_centroid_baseline_beats_chance():
    train = generate_synthetic(5, 10, seed=0).sequences
    test = generate_synthetic(5, 10, seed=1).sequences
    assert nearest_centroid_accuracy(train, test) > 0.2


def test_synthetic_class_limit():
    with pytest.raises(ValueError):
        generate_synthetic(17, 1)
