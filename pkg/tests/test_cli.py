import csv

import numpy as np
import pytest

import main
from src.configuration import load_config
from src.radar_dsp import RadarConfig, RadarCube, serialize_radar_capture
from src.synthgen import RadarSceneSpec, synth_radar_frame


def run(capsys, command, *argv):
    """Run one CLI command quietly; returns (exit code, stdout, stderr)"""
    try:
        main.main(["--skip-check", command, "--quiet"] + list(argv))
        code = 0
    except SystemExit as e:
        code = e.code
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def desk_radar():
    return RadarConfig.from_dict(load_config(preset="desk")["radar"])


@pytest.fixture
def desk_capture(tmp_path, desk_radar):
    """Target at 5 m, standing still, in every frame"""
    frame = synth_radar_frame(RadarSceneSpec(target_range=5.0), desk_radar, seed=0)
    cube = RadarCube(np.stack([frame] * desk_radar.frames_per_capture), desk_radar)
    path = tmp_path / "capture.bin"
    path.write_bytes(serialize_radar_capture(cube))
    return path


def test_rd_map(capsys, tmp_path, desk_capture):
    out_dir = tmp_path / "out"
    code, out, _ = run(capsys, "rd-map", str(desk_capture), "--preset", "desk", "--frame", "3", "--cfar",
                       "--out-dir", str(out_dir))
    assert code == 0
    assert "doppler bin 16, range bin 26" in out
    for suffix in ("rd_map.csv", "rd_map.png", "detections.csv"):
        assert (out_dir / f"capture_frame0003_{suffix}").exists()
    with open(out_dir / "capture_frame0003_rd_map.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 33
    assert len(rows[0]) == 65


def test_rd_map_missing_capture(capsys, tmp_path):
    missing = tmp_path / "absent.bin"
    code, _, err = run(capsys, "rd-map", str(missing), "--out-dir", str(tmp_path))
    assert code == 5
    assert "error: io:" in err
    assert str(missing) in err


def test_rd_map_wrong_size(capsys, tmp_path, desk_capture):
    # full-size defaults expect a much larger capture
    code, _, err = run(capsys, "rd-map", str(desk_capture), "--out-dir", str(tmp_path))
    assert code == 3
    assert "error: size:" in err


def test_bad_frame_index(capsys, tmp_path, desk_capture):
    code, _, err = run(capsys, "rd-map", str(desk_capture), "--preset", "desk", "--frame", "8",
                       "--out-dir", str(tmp_path))
    assert code == 7
    assert "frame index 8" in err


def test_synth_needs_samples(capsys, tmp_path):
    code, _, err = run(capsys, "synth", "--n-per-class", "0", "--out-dir", str(tmp_path))
    assert code == 2
    assert "error: usage:" in err


def test_unknown_config_key(capsys, tmp_path):
    code, _, err = run(capsys, "synth", "--set", "synth.colour=red", "--out-dir", str(tmp_path))
    assert code == 2
    assert "synth.colour" in err


def test_argparse_usage_error(capsys):
    code, _, _ = run(capsys, "rd-map")
    assert code == 2


def test_gradcheck(capsys, tmp_path):
    report = tmp_path / "reports" / "gradcheck.txt"
    code, out, _ = run(capsys, "gradcheck", "--out", str(report))
    assert code == 0
    assert out.splitlines()[-1] == "all layers pass"
    assert report.read_text().splitlines() == out.splitlines()


def test_synth_train_eval(capsys, tmp_path):
    data = tmp_path / "data"
    code, out, _ = run(capsys, "synth", "--preset", "desk", "--n-per-class", "4", "--seed", "2",
                       "--out-dir", str(data))
    assert code == 0
    assert "(20 records)" in out

    manifest = data / "manifest.jsonl"
    train_dir = tmp_path / "train"
    code, out, _ = run(capsys, "train", str(manifest), "--preset", "desk", "--seed", "2",
                       "--set", "train.epochs=1", "--out-dir", str(train_dir))
    assert code == 0
    assert "Test metrics (5 samples)" in out
    for name in ("training_log.csv", "metrics.csv", "confusion.csv", "checkpoint/weights.bin"):
        assert (train_dir / name).exists()

    # the checkpoint carries its split and conditioning, so no preset is needed here
    code, out, _ = run(capsys, "eval", str(train_dir / "checkpoint"), str(manifest),
                       "--out-dir", str(tmp_path / "eval"))
    assert code == 0
    assert "(5 samples)" in out
    with open(train_dir / "metrics.csv", newline="") as f:
        trained = {row[0]: row[1] for row in csv.reader(f)}
    with open(tmp_path / "eval" / "metrics.csv", newline="") as f:
        evaluated = {row[0]: row[1] for row in csv.reader(f)}
    assert evaluated["detection_accuracy"] == trained["detection_accuracy"]

    code, out, _ = run(capsys, "info", str(train_dir / "checkpoint"))
    assert code == 0
    assert "modalities: Acoustic + Range-Doppler" in out


@pytest.mark.parametrize("command", ["train", "ablate"])
def test_help_lists_training_defaults(capsys, command):
    code, out, _ = run(capsys, command, "--help")
    assert code == 0
    text = " ".join(out.split())
    for flag, default in [("--epochs", "60"), ("--batch-size", "64"), ("--lr", "5e-05"),
                          ("--weight-decay", "0.4"), ("--dropout", "0.4"), ("--test-fraction", "0.15")]:
        assert flag in text
        assert f"(default: {default})" in text


def test_training_flags_override_config():
    args = main.build_parser().parse_args(["train", "data/manifest.jsonl", "--preset", "desk", "--lr", "0.01",
                                           "--set", "train.epochs=3", "--epochs", "5"])
    train = main.resolve_config(args)["train"]
    assert train["learning_rate"] == 0.01
    assert train["epochs"] == 5
    # unset flags leave the preset alone
    assert train["batch_size"] == 32
    assert train["dropout"] == 0.1
