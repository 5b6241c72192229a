import numpy as np
import pytest

from bevcontrast.cli import run
from bevcontrast.encoder import init_params, save_params
from bevcontrast.geometry import RigidTransform
from bevcontrast.io_kitti import PoseTrack, load_scan, save_poses, save_scan
from bevcontrast.io_kitti import PointCloud
from bevcontrast.trainer import read_metrics


@pytest.fixture
def pose_file(tmp_path):
    track = PoseTrack([RigidTransform.translation(float(k), 0.0, 0.0) for k in range(12)], np.arange(12) / 10.0)
    path = tmp_path / "poses.txt"
    save_poses(track, path)
    return path


def test_pairs_at_ten_hertz(pose_file, tmp_path, capsys):
    assert run(["pairs", "--poses", str(pose_file), "--dt", "0.7"]) == 0
    lines = capsys.readouterr().out.splitlines()
    rows = [ln.split(",") for ln in lines if not ln.startswith("#")][1:]
    assert [(int(a), int(b)) for a, b, _ in rows] == [(k, k + 7) for k in range(5)]
    assert "# by_time=0.7" in lines
    out = tmp_path / "pairs.csv"
    assert run(["pairs", "--poses", str(pose_file), "--dd", "3", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[3] == "0,3,3.000000"


def test_usage_errors(tmp_path, capsys):
    assert run([]) == 2
    assert run(["pairs", "--poses", str(tmp_path / "missing.txt"), "--dt", "0.7"]) == 2
    assert run(["pairs", "--poses", "x", "--dt", "1", "--dd", "1"]) == 2
    assert run(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_contract_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\0" * 10)
    ckpt = tmp_path / "enc.bin"
    save_params(init_params(0, 8, 4), ckpt)
    assert run(["pool", "--scan", str(bad), "--ckpt", str(ckpt), "--out", str(tmp_path / "g.csv")]) == 1
    assert "FormatError" in capsys.readouterr().err


def test_pool_writes_debug_csv(tmp_path):
    rng = np.random.default_rng(0)
    scan = tmp_path / "000000.bin"
    save_scan(PointCloud(np.column_stack([rng.uniform(-3, 3, (40, 3)), rng.random(40)])), scan)
    ckpt = tmp_path / "enc.bin"
    save_params(init_params(0, 8, 4), ckpt)
    out = tmp_path / "grid.csv"
    assert run(["pool", "--scan", str(scan), "--ckpt", str(ckpt), "--cell-size", "1", "--grid", "8",
                "--out", str(out)]) == 0
    text = out.read_text().splitlines()
    assert "# cell_size=1.0" in text and "# grid=8" in text
    body = [ln for ln in text if not ln.startswith("#")]
    assert body[0] == "i,j,count,feat_0,feat_1,feat_2,feat_3"
    assert sum(int(r.split(",")[2]) for r in body[1:]) == len(load_scan(scan))


def test_synth_pretrain_probe_pipeline(tmp_path, capsys):
    data = tmp_path / "data"
    assert run(["synth", "--seed", "2", "--out", str(data), "--scans", "10", "--points", "800"]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"cell_size": 0.5, "grid_size": 64, "n_samples": 64, "hidden": 8, "dim": 4}')
    out = tmp_path / "run"
    assert run(["pretrain", "--config", str(cfg), "--data", str(data), "--out", str(out), "--lr", "0.01",
                "--dt", "0.3"]) == 0
    metrics = read_metrics(out / "metrics.csv")
    assert len(metrics) == 7 and metrics[0]["lr"] == 0.01
    header = (out / "metrics.csv").read_text()
    assert "# lr_max=0.01" in header and "# delta_time=0.3" in header
    assert (out / "encoder.bin").exists() and (out / "ckpt_epoch000.bin").exists()
    capsys.readouterr()
    assert run(["probe", "--ckpt", str(out / "encoder.bin"), "--scene-seed", "7", "--scans", "1",
                "--points", "600"]) == 0
    lines = capsys.readouterr().out.splitlines()
    accs = dict(ln.split() for ln in lines if not ln.startswith("#"))
    assert 0 <= float(accs["pretrained"]) <= 1 and 0 <= float(accs["random_init"]) <= 1
    assert run(["pretrain", "--data", str(tmp_path / "nope"), "--out", str(out)]) == 2


def test_gradcheck_small(capsys):
    assert run(["gradcheck", "--seed", "0", "--mode", "3d", "--hidden", "8", "--dim", "4"]) == 0
    assert "max_rel_err=" in capsys.readouterr().out


@pytest.mark.slow
def test_gradcheck_default(capsys):
    assert run(["gradcheck", "--seed", "0"]) == 0
