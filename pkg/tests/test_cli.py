import csv
import json

import numpy as np
import pytest

from vidlab.cli import run
from vidlab.core import Domain, VideoTensor, load_tensor, read_ppm, save_tensor
from vidlab.triplets import SceneSpec, gen_video


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "d.ivv"
    assert run(["gen-data", "--count", "6", "--seed", "3", "--out", str(data), "--frames", "3", "--size", "8"]) == 0
    config = root / "cfg.json"
    config.write_text(json.dumps({"steps": 50, "arch": {"base_channels": 4, "levels": 1, "groups": 2}}))
    ckpt = root / "m.ckpt"
    code = run(["train", "--data", str(data), "--out", str(ckpt), "--config", str(config),
                "--steps", "5", "--batch-size", "2", "--seed", "1"])
    assert code == 0
    return root, data, ckpt


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a.ivv", tmp_path / "b.ivv"
    assert run(["gen-data", "--count", "16", "--seed", "7", "--out", str(a)]) == 0
    assert run(["gen-data", "--count", "16", "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_writes_loss_log(trained):
    root, _, ckpt = trained
    with open(str(ckpt) + ".loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5  # the flag overrides the config's 50 steps
    steps = [int(r["step"]) for r in rows]
    assert steps == sorted(set(steps))
    for r in rows:
        total = float(r["loss_total"])
        assert total == pytest.approx(float(r["loss_sd"]) + 1e-3 * float(r["loss_fd"]), rel=1e-5)
    meta = json.loads((root / "m.ckpt.json").read_text())
    assert meta["arch"]["base_channels"] == 4 and meta["train"]["steps"] == 5


def test_edit_unit_scales_match_unguided(trained):
    root, data, ckpt = trained
    common = ["edit", "--ckpt", str(ckpt), "--data", str(data), "--index", "1", "--steps", "3", "--seed", "4"]
    assert run(common + ["--s-text", "1", "--s-video", "1", "--out", str(root / "g.vten")]) == 0
    assert run(common + ["--no-guidance", "--out", str(root / "u.vten")]) == 0
    g, u = load_tensor(root / "g.vten"), load_tensor(root / "u.vten")
    assert g.bit_equal(u)
    assert g.shape == (3, 3, 8, 8)
    assert read_ppm(root / "g.vten.frames" / "frame_0000.ppm").shape == (8, 8, 3)


def test_edit_with_text_instruction(trained, tmp_path):
    _, _, ckpt = trained
    video = VideoTensor(np.full((2, 3, 8, 8), 40.0, np.float32), Domain.PIXEL)
    save_tensor(video, tmp_path / "in.vten")
    args = ["edit", "--ckpt", str(ckpt), "--input", str(tmp_path / "in.vten"), "--steps", "2",
            "--out", str(tmp_path / "o.vten"), "--ppm-dir", str(tmp_path / "frames")]
    assert run(args + ["--instruction", "turn to sepia style"]) == 0
    assert len(list((tmp_path / "frames").iterdir())) == 2
    assert run(args + ["--instruction", "make it sparkle"]) == 1
    assert run(args) == 1  # no instruction for a raw video


def test_eval_static_video(tmp_path, capsys):
    save_tensor(gen_video(SceneSpec(velocity=(0, 0))), tmp_path / "s.vten")
    out = tmp_path / "r.json"
    assert run(["eval", "--video", str(tmp_path / "s.vten"), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["consistency"]["fd"] == 0.0
    assert rep["consistency"]["bm"] == 1.0
    assert run(["eval", "--video", str(tmp_path / "s.vten")]) == 0
    assert json.loads(capsys.readouterr().out)["consistency"]["of"] == 0.0


def test_unknown_flag_fails(capsys):
    assert run(["gen-data", "--count", "1", "--out", "x", "--bogus"]) != 0
    assert "unrecognized" in capsys.readouterr().err


def test_missing_file_fails(tmp_path, capsys):
    assert run(["eval", "--video", str(tmp_path / "nope.vten")]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("vidlab eval: error:") and "\n" not in err


def test_bad_config_fails(tmp_path, trained):
    _, data, _ = trained
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lamda": 0.1}))
    assert run(["train", "--data", str(data), "--out", str(tmp_path / "m"), "--config", str(cfg)]) == 1
    assert run(["train", "--data", str(data), "--out", str(tmp_path / "m"), "--lam", "-1"]) == 1
