import csv
import json

import numpy as np
import pytest

from fab import cli
from fab.config import SNAPSHOT_NAME, load_config
from fab.io import read_landmarks

TINY = ["--set", "train.epochs=1", "--set", "train.steps_per_epoch=2", "--set", "train.batch_size=4",
        "--set", "models.predictor=4", "--set", "models.deblur=4", "--set", "models.detector=4",
        "--set", "synthesis.subframes=4"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic data plus tiny pretrained checkpoints, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-synthetic", "--out", root / "data", "--n-sequences", 2, "--frames", 6, "--seed", 1) == 0
    ckpt = root / "ckpt"
    for stage in ("predictor", "deblur", "detector"):
        assert run("pretrain", "--stage", stage, "--data", root / "data", "--out", root / stage, *TINY) == 0
        ckpt.mkdir(exist_ok=True)
        name = cli.CHECKPOINTS[stage]
        (ckpt / name).write_bytes((root / stage / name).read_bytes())
    return root


def test_full_command_chain(workspace, tmp_path):
    seq = workspace / "data" / "seq_000" / "manifest.json"
    assert run("finetune", "--checkpoints", workspace / "ckpt", "--data", workspace / "data",
               "--out", tmp_path / "ft", *TINY) == 0
    with open(tmp_path / "ft" / "loss.csv") as fh:
        assert [r["epoch"] for r in csv.DictReader(fh)] == ["1"]
    assert run("track", "--sequence", seq, "--checkpoints", tmp_path / "ft", "--out", tmp_path / "trk",
               "--dump-boundaries") == 0
    doc = json.loads((tmp_path / "trk" / "manifest.json").read_text())
    assert doc["source_frames"] == [2, 3, 4, 5]
    assert len(list((tmp_path / "trk" / "boundaries").iterdir())) == 4
    assert run("eval", "--pred", tmp_path / "trk" / "manifest.json", "--gt", seq, "--ref", seq,
               "--out", tmp_path / "ev") == 0
    with open(tmp_path / "ev" / "summary.csv") as fh:
        summary = {r["metric"]: float(r["value"]) for r in csv.DictReader(fh)}
    assert summary["count"] == 4 and "auc@0.08" in summary and "failure@0.2" in summary
    with open(tmp_path / "ev" / "per_frame.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["psnr"]) > 0 for r in rows)
    for d in ("ft", "ev", "trk"):
        assert (tmp_path / d / SNAPSHOT_NAME).is_file()


def test_track_replay_is_byte_identical(workspace, tmp_path):
    seq = workspace / "data" / "seq_001" / "manifest.json"
    for name in ("a", "b"):
        assert run("track", "--sequence", seq, "--checkpoints", workspace / "ckpt", "--out", tmp_path / name) == 0
    for f in sorted((tmp_path / "a" / "landmarks").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "landmarks" / f.name).read_bytes()


def test_snapshot_reproduces_configuration(workspace):
    snap = workspace / "detector" / SNAPSHOT_NAME
    cfg = load_config(snap)
    assert cfg.models.detector == 4 and cfg.train.steps_per_epoch == 2 and cfg.subframes == 4


def test_synth_writes_blur_and_intensity(workspace, tmp_path):
    seq = workspace / "data" / "seq_000" / "manifest.json"
    assert run("synth", "--in", seq, "--out", tmp_path / "b", "--subframes", 4, "--window", 3) == 0
    doc = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert len(doc["frames"]) == 4 and doc["subframes"] == 4
    with open(tmp_path / "b" / "intensity.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["source_frame"] for r in rows] == ["1", "2", "3", "4"]


def test_render_boundary(workspace, tmp_path):
    pts = workspace / "data" / "seq_000" / "landmarks" / "000000.pts"
    assert run("render-boundary", "--landmarks", pts, "--out", tmp_path / "e.pgm", "--resolution", 32) == 0
    assert run("render-boundary", "--landmarks", pts, "--out", tmp_path / "e.pgm") == cli.EXIT_DATA
    assert run("render-boundary", "--landmarks", pts, "--out", tmp_path / "e.pgm", "--force") == 0
    assert read_landmarks(pts).points.shape == (68, 2)


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run("pretrain", "--stage", "everything", "--data", tmp_path, "--out", tmp_path / "o") == cli.EXIT_USAGE
    assert run("gen-synthetic") == cli.EXIT_USAGE
    assert run("gen-synthetic", "--out", tmp_path / "g", "--set", "nodot=1") == cli.EXIT_USAGE
    assert run("gen-synthetic", "--out", tmp_path / "g", "--set", "train.colour=red") == cli.EXIT_USAGE
    assert run("selftest", "--only", "grad.everything") == cli.EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_data_errors_exit_two(workspace, tmp_path):
    seq = workspace / "data" / "seq_000" / "manifest.json"
    assert run("track", "--sequence", seq, "--checkpoints", tmp_path / "none", "--out", tmp_path / "t") == cli.EXIT_DATA
    assert not (tmp_path / "t").exists()
    assert run("pretrain", "--stage", "predictor", "--data", tmp_path / "missing", "--out", tmp_path / "p") == 2
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    ck = tmp_path / "ck"
    ck.mkdir()
    for name in cli.CHECKPOINTS.values():
        (ck / name).write_bytes(bad.read_bytes())
    assert run("track", "--sequence", seq, "--checkpoints", ck, "--out", tmp_path / "t") == cli.EXIT_DATA
    assert run("pretrain", "--stage", "predictor", "--data", workspace / "data", "--out", tmp_path / "r",
               "--set", "models.resolution=64") == cli.EXIT_DATA


def test_output_ownership(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert run("gen-synthetic", "--out", out, "--n-sequences", 1, "--frames", 3) == cli.EXIT_DATA
    assert run("gen-synthetic", "--out", out, "--n-sequences", 1, "--frames", 3, "--force") == 0
    assert not (out / cli.LOCK_NAME).exists()
    locked = tmp_path / "locked"
    locked.mkdir()
    (locked / cli.LOCK_NAME).write_text("123\n")
    assert run("gen-synthetic", "--out", locked, "--n-sequences", 1, "--frames", 3) == cli.EXIT_DATA


def test_failed_track_leaves_no_partial_output(workspace, tmp_path, monkeypatch):
    seq = workspace / "data" / "seq_000" / "manifest.json"

    def boom(*a, **k):
        raise ValueError("disk full")

    monkeypatch.setattr(cli, "write_snapshot", boom)
    assert run("track", "--sequence", seq, "--checkpoints", workspace / "ckpt", "--out", tmp_path / "t") == 2
    assert list(tmp_path.iterdir()) == []


def test_selftest_passes_and_reports_injected_fault(monkeypatch, capsys):
    assert run("selftest", "--only", "warp.identity", "--only", "metrics.oracles") == 0
    from fab.autodiff import functional

    real = functional.conv2d

    def sign_flipped(x, w, b=None, stride=1, padding=0):
        out = real(x, w, b, stride, padding)
        backward = out._backward
        out._backward = lambda g: tuple(None if t is None else -t for t in backward(g))
        return out

    monkeypatch.setattr(functional, "conv2d", sign_flipped)
    assert run("selftest", "--only", "grad.conv2d") == cli.EXIT_CHECK
    assert "FAIL grad.conv2d" in capsys.readouterr().out


def test_log_level_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("FAB_LOG_LEVEL", "debug")
    assert run("gen-synthetic", "--out", tmp_path / "g", "--n-sequences", 1, "--frames", 3) == 0


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.build_parser().parse_args(["--version"])
    assert exc.value.code == 0 and "fab" in capsys.readouterr().out


def test_config_file_and_unknown_keys(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[train]\nlr = 0.01\nalignment_weight = 2\n[augment]\nenabled = false\n[flow]\nalpha = 5\n")
    cfg = load_config(ini)
    assert cfg.train.lr == 0.01 and cfg.train.loss_weights == (1.0, 1.0, 2.0)
    assert cfg.train.augment is None and cfg.flow.alpha == 5.0
    with pytest.raises(ValueError, match="section"):
        load_config(None, {"gpu": {"id": "0"}})
    with pytest.raises(ValueError, match="unknown key"):
        load_config(None, {"flow": {"beta": "1"}})
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.ini")
    assert np.isclose(load_config(None, {"synthesis": {"boundary_sigma": "2.5"}}).boundary_sigma, 2.5)
