import csv
import subprocess
import sys

import numpy as np
import pytest

from detailnet import runtime
from detailnet.apps import read_ply
from detailnet.cli import main
from detailnet.data import read_netpbm, write_meta, write_pgm16, write_ppm, CameraIntrinsics
from detailnet.errors import ConfigError

CFG = "synth_count=4\nsynth_height=16\nsynth_width=16\nsteps=3\nseed=5\nfx=20\nfy=20\ncx=7.5\ncy=7.5\n"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.cfg").write_text(CFG)
    assert main(["train", "--config", str(d / "run.cfg"), "--checkpoint", str(d / "w.ckpt"), "--deterministic"]) == 0
    write_ppm(d / "big.ppm", np.random.default_rng(0).random((240, 320, 3)))
    write_ppm(d / "small.ppm", np.random.default_rng(1).random((16, 16, 3)))
    return d


def _args(d, *rest):
    return ["--config", str(d / "run.cfg"), "--checkpoint", str(d / "w.ckpt"), *rest]


def test_no_arguments_prints_usage(capsys):
    assert main([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "detailnet"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage:" in proc.stderr


def test_train_writes_loss_csv(workdir):
    with open(workdir / "w.ckpt.loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "lr_dfe", "lr_dmg"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert float(rows[1][3]) == pytest.approx(1e-4)


def test_predict_half_and_resized(workdir):
    assert main(["predict", *_args(workdir, "--input", str(workdir / "big.ppm"), "--out", str(workdir / "d.pgm"))]) == 0
    half = read_netpbm(workdir / "d.pgm")
    assert half.shape == (120, 160) and half.dtype == np.uint16
    assert main(["predict", *_args(workdir, "--input", str(workdir / "big.ppm"), "--out", str(workdir / "f.pgm"),
                                   "--resize", "--colormap", str(workdir / "f.ppm"))]) == 0
    assert read_netpbm(workdir / "f.pgm").shape == (240, 320)
    assert read_netpbm(workdir / "f.ppm").shape == (240, 320, 3)


def test_deterministic_outputs_bitwise_repeatable(workdir):
    outs = []
    for k in range(2):
        out = workdir / f"rep{k}.pgm"
        assert main(["predict", *_args(workdir, "--input", str(workdir / "small.ppm"), "--out", str(out),
                                       "--deterministic")]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_eval_text_and_csv(workdir, capsys):
    assert main(["synth", "--config", str(workdir / "run.cfg"), "--out", str(workdir / "ds"), "--count", "2"]) == 0
    csv_path = workdir / "m.csv"
    for _ in range(2):
        assert main(["eval", *_args(workdir, "--data", str(workdir / "ds"), "--csv", str(csv_path))]) == 0
    text = capsys.readouterr().out
    assert "rel=" in text and "delta3=" in text and "pixel_count=512" in text
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("rel,") and len(lines) == 3


def test_pointcloud_and_bokeh(workdir):
    write_meta(workdir / "m.txt", CameraIntrinsics(20, 20, 7.5, 7.5))
    depth = np.full((16, 16), 2000)
    depth[0, 0] = 0
    write_pgm16(workdir / "d16.pgm", depth)
    common = ["--input", str(workdir / "small.ppm"), "--depth", str(workdir / "d16.pgm")]
    assert main(["pointcloud", "--meta", str(workdir / "m.txt"), *common, "--out", str(workdir / "c.ply")]) == 0
    cloud = read_ply(workdir / "c.ply")
    assert len(cloud) == 255 and np.allclose(cloud.points[:, 2], 2.0)
    assert main(["bokeh", *common, "--focus", "2.0", "--out", str(workdir / "b.ppm")]) == 0
    assert read_netpbm(workdir / "b.ppm").shape == (16, 16, 3)
    # predicted depth path with config intrinsics
    assert main(["pointcloud", *_args(workdir, "--input", str(workdir / "small.ppm"), "--out", str(workdir / "p.ply"))]) == 0


def test_gradcheck_verb(capsys):
    assert main(["gradcheck", "--instances", "1", "--skip-network"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 17


def test_validation_errors_exit_1(workdir, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("batch_size=zero\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert main(["predict", "--input", str(tmp_path / "missing.ppm"), "--checkpoint", "w", "--out", "o.pgm"]) == 1
    assert main(["bokeh", "--input", "a.ppm"]) == 1  # missing --focus
    assert main(["frobnicate"]) == 1
    truncated = tmp_path / "t.ckpt"
    truncated.write_bytes((workdir / "w.ckpt").read_bytes()[:100])
    assert main(["predict", "--checkpoint", str(truncated), "--input", str(workdir / "small.ppm"),
                 "--out", str(tmp_path / "o.pgm")]) == 1
    assert main(["pointcloud", "--input", str(workdir / "small.ppm"), "--depth", str(workdir / "d16.pgm"),
                 "--out", str(tmp_path / "c.ply")]) == 1  # no intrinsics anywhere


def test_runtime_errors_exit_2(workdir, tmp_path):
    blocked = tmp_path / "file"
    blocked.write_text("")
    out = blocked / "sub" / "d.pgm"  # parent is a regular file
    assert main(["predict", *_args(workdir, "--input", str(workdir / "small.ppm"), "--out", str(out))]) == 2


def test_thread_env(monkeypatch):
    assert runtime.thread_cap({}) is None
    assert runtime.thread_cap({"DETAILNET_THREADS": "2"}) == 2
    for bad in ("0", "abc", "-3"):
        with pytest.raises(ConfigError):
            runtime.thread_cap({"DETAILNET_THREADS": bad})
    monkeypatch.setenv("DETAILNET_THREADS", "abc")
    assert main(["synth", "--out", "/nonexistent/never", "--count", "1"]) == 1
