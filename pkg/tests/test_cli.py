import json

import numpy as np
import pytest
from PIL import Image

from uwno.cli import run

TINY_FLAGS = ["--channels", "2", "--wavelet", "haar", "--level", "1", "--unet-depth", "1",
              "--wno-blocks", "1", "--size", "16"]


def out_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--n", "4", "--out", str(root / "data"), "--size", "16"]) == 0
    assert run(["train", "--data-dir", str(root / "data"), "--out", str(root / "run"), "--epochs", "2",
                "--batch-size", "2", "--val-fraction", "0.25", *TINY_FLAGS]) == 0
    return root


def test_train_outputs(trained):
    run_dir = trained / "run"
    for name in ("config.json", "metrics.jsonl", "timing.jsonl", "final.uwno", "best.uwno", "training_curves.png"):
        assert (run_dir / name).exists(), name
    config = json.loads((run_dir / "config.json").read_text())
    assert config["channels"] == 2 and config["epochs"] == 2 and config["lr"] == 1e-3
    assert len((run_dir / "metrics.jsonl").read_text().splitlines()) == 2


def test_eval_uses_config_beside_checkpoint(trained, capsys, tmp_path):
    assert run(["eval", "--checkpoint", str(trained / "run" / "final.uwno"),
                "--data-dir", str(trained / "data"), "--out", str(tmp_path)]) == 0
    summary = out_json(capsys)
    assert set(summary) == {"n", "mean_dice", "max_dice", "min_dice"} and summary["n"] == 4
    assert summary["min_dice"] <= summary["mean_dice"] <= summary["max_dice"]
    rows = (tmp_path / "dice.csv").read_text().splitlines()
    assert rows[0] == "id,dice" and len(rows) == 5
    assert (tmp_path / "dice_hist.png").exists()


def test_predict_writes_binary_mask_and_overlay(trained, capsys, tmp_path):
    mask_path, overlay_path = tmp_path / "m.png", tmp_path / "o.png"
    assert run(["predict", "--checkpoint", str(trained / "run" / "final.uwno"),
                "--input", str(trained / "data" / "images" / "synth_0.png"),
                "--out", str(mask_path), "--overlay", str(overlay_path)]) == 0
    with Image.open(mask_path) as im:
        assert im.size == (16, 16) and set(np.unique(np.asarray(im))) <= {0, 255}
    with Image.open(overlay_path) as im:
        assert im.mode == "RGB" and im.size == (16, 16)
    assert 0 <= out_json(capsys)["foreground_fraction"] <= 1


def test_predict_missing_checkpoint(tmp_path, capsys):
    missing = tmp_path / "nothing.uwno"
    code = run(["predict", "--checkpoint", str(missing), "--input", "x.png", "--out", str(tmp_path / "o.png"),
                *TINY_FLAGS])
    assert code == 1
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("offset, byte", [(0, b"Z"), (4, b"\x09")])
def test_corrupt_checkpoint_exits_1(trained, tmp_path, offset, byte, capsys):
    raw = bytearray((trained / "run" / "final.uwno").read_bytes())
    raw[offset:offset + 1] = byte
    bad = tmp_path / "bad.uwno"
    bad.write_bytes(bytes(raw))
    code = run(["eval", "--checkpoint", str(bad), "--data-dir", str(trained / "data"), *TINY_FLAGS])
    assert code == 1
    assert "offset" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert run(["train", "--bogus"]) == 2
    assert run([]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "learning-rate": 0.1}))
    assert run(["train", "--out", str(tmp_path / "r"), "--config", str(cfg)]) == 2
    cfg.write_text(json.dumps({"epochs": "many"}))
    assert run(["train", "--out", str(tmp_path / "r"), "--config", str(cfg)]) == 2
    assert run(["train", "--out", str(tmp_path / "r")]) == 2
    assert run(["synth", "--n", "0", "--out", str(tmp_path)]) == 2


def test_flags_override_config(trained, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 5, "data-dir": str(trained / "data"), "batch-size": 4, "size": 16,
                               "channels": 2, "wavelet": "haar", "level": 1, "unet-depth": 1,
                               "wno-blocks": 1, "val-fraction": 0.0}))
    assert run(["train", "--config", str(cfg), "--epochs", "1", "--out", str(tmp_path / "r")]) == 0
    written = json.loads((tmp_path / "r" / "config.json").read_text())
    assert written["epochs"] == 1 and written["batch-size"] == 4


def test_missing_data_dir_exits_1(tmp_path):
    assert run(["train", "--data-dir", str(tmp_path / "none"), "--out", str(tmp_path / "r"),
                "--epochs", "1", *TINY_FLAGS]) == 1


def test_synth(tmp_path, capsys):
    assert run(["synth", "--n", "3", "--seed", "5", "--size", "32", "--out", str(tmp_path)]) == 0
    assert out_json(capsys) == {"out": str(tmp_path), "n": 3}
    assert sorted(p.name for p in (tmp_path / "images").iterdir()) == ["synth_5.png", "synth_6.png", "synth_7.png"]
