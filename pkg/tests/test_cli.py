import hashlib
import json

import numpy as np
import pytest

from prgcn.cli import main

TOY = ["--set", "train.epochs=2", "--set", "train.batch_size=4", "--set", "train.augment=false"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def digest(folder):
    h = hashlib.sha256()
    for path in sorted(folder.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(folder)).encode() + path.read_bytes())
    return h.hexdigest()


@pytest.fixture
def synth(tmp_path, capsys):
    out = tmp_path / "syn"
    code, _, _ = run(capsys, "synth", "--out", out, "--set", "synth.per_class=2", "--set", "synth.classes=3")
    assert code == 0
    return out


@pytest.fixture
def trained(tmp_path, synth, capsys):
    ckpt = tmp_path / "m.ckpt"
    code, _, err = run(capsys, "train", "--config", synth / "config.txt", "--manifest", synth / "manifest.txt",
                       "--checkpoint", ckpt, *TOY)
    assert code == 0, err
    return ckpt


def test_synth_writes_dataset(synth):
    assert len(list((synth / "clips").glob("*.json"))) == 6
    assert len((synth / "manifest.txt").read_text().splitlines()) == 6
    config = (synth / "config.txt").read_text()
    assert "model.topology = chain5" in config and "model.num_classes = 3" in config


def test_synth_is_seeded(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "synth", "--out", tmp_path / name, "--seed", 5, "--set", "synth.per_class=1")[0] == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_synth_refuses_non_empty_folder(synth, capsys):
    code, _, err = run(capsys, "synth", "--out", synth)
    assert code == 2 and "empty" in err


def test_train_writes_checkpoint_and_log(tmp_path, trained, capsys):
    log = trained.with_name(trained.name + ".log.jsonl")
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.ckpt", "m.ckpt.log.jsonl", "syn"]


def test_train_does_not_touch_inputs(tmp_path, synth, capsys):
    before = digest(synth)
    run(capsys, "train", "--config", synth / "config.txt", "--manifest", synth / "manifest.txt",
        "--checkpoint", tmp_path / "x.ckpt", *TOY)
    assert digest(synth) == before


def test_missing_manifest_exits_2_without_outputs(tmp_path, synth, capsys):
    code, _, err = run(capsys, "train", "--config", synth / "config.txt", "--manifest", tmp_path / "nope.txt",
                       "--checkpoint", tmp_path / "out.ckpt")
    assert code == 2 and "manifest" in err
    assert sorted(p.name for p in tmp_path.iterdir()) == ["syn"]


@pytest.mark.parametrize("override", ["frames=301", "bogus=1", "model.fusion_mode=zigzag", "train.momentum=1.5",
                                      "nosection.x=1", "enable_prm=maybe", "justtext"])
def test_invalid_config_exits_2(override, capsys):
    code, _, err = run(capsys, "count", "--set", override)
    assert code == 2 and err.startswith("error:")


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert run(capsys, "count", "--config", tmp_path / "none.txt")[0] == 2


def test_unknown_command_exits_2(capsys):
    assert run(capsys, "fly")[0] == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_training_exits_3_without_outputs(tmp_path, synth, capsys):
    code, _, err = run(capsys, "train", "--config", synth / "config.txt", "--manifest", synth / "manifest.txt",
                       "--checkpoint", tmp_path / "bad.ckpt", *TOY, "--set", "base_lr=1e30")
    assert code == 3 and "non-finite" in err
    assert sorted(p.name for p in tmp_path.iterdir()) == ["syn"]


def test_count_default_and_ablation(capsys):
    code, out, _ = run(capsys, "count", "--json")
    full = json.loads(out)
    assert code == 0 and 450_000 <= full["params"]["total"] <= 600_000
    assert abs(full["flops"]["total"] / 1e9 - 1.7) <= 0.4 * 1.7
    _, out, _ = run(capsys, "count", "--json", "--set", "enable_prm=false", "--set", "model.enable_tam=false")
    base = json.loads(out)
    assert 250_000 <= base["params"]["total"] <= 350_000
    assert base["params"]["total"] < full["params"]["total"] and base["flops"]["total"] < full["flops"]["total"]


def test_count_hand_counted_toy(capsys):
    args = ["count", "--json", "--set", "topology=chain3", "--set", "num_classes=2", "--set", "frames=6",
            "--set", "persons=1", "--set", "pos_widths=4,4,4", "--set", "mot_width=4", "--set", "tconv_widths=8,8",
            "--set", "enable_prm=false", "--set", "enable_tam=false"]
    result = json.loads(run(capsys, *args)[1])
    assert result["params"]["total"] == 964 and result["flops"]["total"] == 17256


def test_count_table_output(capsys):
    code, out, _ = run(capsys, "count")
    assert code == 0 and out.splitlines()[0].split() == ["block", "params", "GFLOP"]
    assert out.splitlines()[-1].startswith("total")


def test_eval_and_infer(trained, synth, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", trained, "--manifest", synth / "manifest.txt", "--json")
    metrics = json.loads(out)
    assert code == 0 and metrics["clips"] == 6 and 0 <= metrics["top1"] <= metrics["top5"] <= 1
    clip = sorted((synth / "clips").glob("*.json"))[0]
    code, out, _ = run(capsys, "infer", "--checkpoint", trained, clip, "--json")
    top = json.loads(out)["top5"]
    assert code == 0 and len(top) == 3  # capped at the class count
    probs = [r["probability"] for r in top]
    assert probs == sorted(probs, reverse=True) and sum(probs) == pytest.approx(1, abs=1e-5)


def test_infer_missing_checkpoint(synth, tmp_path, capsys):
    clip = sorted((synth / "clips").glob("*.json"))[0]
    assert run(capsys, "infer", "--checkpoint", tmp_path / "none.ckpt", clip)[0] == 2


def test_refine_fresh_model_is_exact(tmp_path, synth, capsys):
    fresh = tmp_path / "fresh.ckpt"
    assert run(capsys, "train", "--config", synth / "config.txt", "--manifest", synth / "manifest.txt",
               "--checkpoint", fresh, "--set", "train.epochs=0")[0] == 0
    clip = sorted((synth / "clips").glob("*.json"))[0]
    out = tmp_path / "refined.json"
    code, _, _ = run(capsys, "refine", "--checkpoint", fresh, clip, "--out", out)
    assert code == 0
    assert json.loads(out.read_text()) == json.loads(clip.read_text())


def test_refine_after_training_moves_poses(tmp_path, synth, trained, capsys):
    clip = sorted((synth / "clips").glob("*.json"))[0]
    before = clip.read_bytes()
    out = tmp_path / "refined.json"
    code, text, _ = run(capsys, "refine", "--checkpoint", trained, clip, "--out", out, "--json")
    assert code == 0 and clip.read_bytes() == before
    src, dst = json.loads(before), json.loads(out.read_text())
    assert len(dst["data"]) == len(src["data"])
    a = np.array([p["pose"] for f in src["data"] for p in f["skeleton"]])
    b = np.array([p["pose"] for f in dst["data"] for p in f["skeleton"]])
    assert a.shape == b.shape == (30, 10)
    assert np.abs(a - b).max() > 0 and json.loads(text)["max_offset"] > 0
    assert [p["score"] for f in dst["data"] for p in f["skeleton"]] == \
        [p["score"] for f in src["data"] for p in f["skeleton"]]


def test_refine_joint_mismatch_exits_2(tmp_path, trained, capsys):
    clip = tmp_path / "k18.json"
    clip.write_text(json.dumps({"data": [{"frame_index": 0, "skeleton": [
        {"pose": [0.5] * 36, "score": [1.0] * 18}]}]}))
    code, _, err = run(capsys, "refine", "--checkpoint", trained, clip, "--out", tmp_path / "r.json")
    assert code == 2 and not (tmp_path / "r.json").exists()
