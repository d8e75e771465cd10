import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from qlens.harness.cli import main
from qlens.quant import dequantize, read_quantized
from qlens.tensor import Tensor, read_tensor, write_tensor


@pytest.fixture
def w(tmp_path):
    path = tmp_path / "w.qtns"
    assert main(["gen", "--dist", "normal:0,1", "--shape", "16,8", "--seed", "1", "--out", str(path)]) == 0
    return path


def test_gen_and_stats(w, capsys):
    capsys.readouterr()
    assert main(["stats", "--in", str(w)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["count"] == 128
    assert read_tensor(w).shape == (16, 8)


def test_quantize_writes_qtnq(w, capsys):
    assert main(["quantize", "--in", str(w), "--bits", "4", "--policy", "absmax", "--granularity", "per-channel:0"]) == 0
    out = capsys.readouterr().out
    assert "l2_delta=" in out and "clip_fraction=" in out
    q = read_quantized(w.with_suffix(".qtnq"))
    assert q.scheme.bits == 4 and q.n_groups == 16


def test_dequantize_and_fake_quant_agree(w, tmp_path):
    assert main(["quantize", "--in", str(w), "--bits", "6", "--transform", "signed-power"]) == 0
    assert main(["dequantize", "--in", str(w.with_suffix(".qtnq")), "--out", str(tmp_path / "d.qtns")]) == 0
    assert main(["fake-quant", "--in", str(w), "--bits", "6", "--transform", "signed-power", "--out", str(tmp_path / "f.qtns")]) == 0
    assert read_tensor(tmp_path / "d.qtns") == read_tensor(tmp_path / "f.qtns")
    assert read_tensor(tmp_path / "d.qtns") == dequantize(read_quantized(w.with_suffix(".qtnq")))


def test_perturb(w, tmp_path):
    out, dl = tmp_path / "p.qtns", tmp_path / "d.qtns"
    assert main(["perturb", "--in", str(w), "--kind", "mag-pos", "--seed", "3", "--out", str(out), "--delta-out", str(dl)]) == 0
    t, p, d = read_tensor(w).data, read_tensor(out).data, read_tensor(dl).data
    np.testing.assert_allclose(p, t - d, atol=1e-6)


def test_sweep_scale_csv(w, tmp_path, capsys):
    path = tmp_path / "s.csv"
    assert main(["sweep-scale", "--in", str(w), "--alphas", "0.25x,0.5x,1x,2x,4x", "--out", str(path)]) == 0
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    assert len(rows) == 5 and list(rows[0]) == ["alpha", "l2_delta", "clip_fraction"]
    capsys.readouterr()
    assert main(["sweep-scale", "--dist", "normal:0,1", "--shape", "1000", "--alphas", "1x,2x"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 3


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["quantize"],
        ["quantize", "--in", "x.qtns", "--bits", "eight"],
        ["experiment"],
        ["sweep-scale", "--alphas", "1x"],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1


def test_invalid_parameter_exit_1(w):
    assert main(["quantize", "--in", str(w), "--bits", "12"]) == 1
    assert main(["perturb", "--in", str(w), "--kind", "laplace", "--out", "x"]) == 1


def test_input_errors_exit_2(tmp_path, capsys):
    assert main(["stats", "--in", str(tmp_path / "missing.qtns")]) == 2
    bad = tmp_path / "bad.qtns"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert main(["stats", "--in", str(bad)]) == 2
    assert "bad magic" in capsys.readouterr().err
    assert main(["eval-toy", "--checkpoint", str(tmp_path)]) == 2


def test_numerical_error_exit_3(tmp_path):
    z = tmp_path / "z.qtns"
    write_tensor(z, Tensor(np.zeros(8)))
    code = main(["perturb", "--in", str(z), "--kind", "mag-pos", "--intensity", "fixed-l2:1", "--out", str(tmp_path / "p.qtns")])
    assert code == 3


def test_experiment_and_report(tmp_path, capsys):
    out = tmp_path / "res"
    assert main(["experiment", "--preset", "figure01", "--out", str(out)]) == 0
    cfg = tmp_path / "k.json"
    cfg.write_text(json.dumps({"schema_version": 1, "experiment_id": "k", "kind": "kernel-sweep",
                               "inputs": [{"dist": "normal:0,1", "shape": [32, 32]}], "schemes": [{"bits": 4}, {"bits": 8}]}))
    assert main(["experiment", "--config", str(cfg), "--out", str(out), "--parallelism", "2"]) == 0
    assert main(["report", "--in", str(out / "figure01.csv"), str(out / "k.csv"), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "summary.csv").exists()
    assert (tmp_path / "rep" / "kernel-sweep_l2_delta.dat").exists()
    cfg.write_text(json.dumps({"kind": "kernel-sweep", "bogus": 1}))
    assert main(["experiment", "--config", str(cfg)]) == 1


def test_toy_commands(tmp_path, capsys):
    ck = tmp_path / "ck"
    args = ["train-toy", "--layers", "1", "--d-model", "16", "--heads", "2", "--vocab", "16", "--context", "8", "--steps", "2", "--out", str(ck)]
    assert main(args) == 0
    capsys.readouterr()
    assert main(["eval-toy", "--checkpoint", str(ck), "--preset", "w4a8", "--non-uniform", "--batches", "1"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert set(res) == {"ce_loss", "perplexity", "accuracy"}
    assert main(["eval-toy", "--checkpoint", str(ck), "--perturb", "clip:3", "--outliers", "20", "--batches", "1"]) == 0


def test_console_script():
    proc = subprocess.run([sys.executable, "-m", "qlens.harness.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("gen", "stats", "quantize", "dequantize", "fake-quant", "perturb", "sweep-scale", "train-toy", "eval-toy", "experiment", "report"):
        assert sub in proc.stdout
