import json
import subprocess
import sys

import numpy as np
import pytest

from gmmda import cli
from gmmda.autodiff import Node
from gmmda.data import MultiLabelDataset, load_csv, save_csv
from gmmda.deepem import EBlock
from gmmda.nn import LinearLayer, Mlp
from gmmda.trainer import Model, save_model

SMALL = {"seed": 1, "n_per_domain": 120, "epochs": 1, "batch_size": 32}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture
def pair_paths(tmp_path, cfg_path):
    s, t = tmp_path / "s.csv", tmp_path / "t.csv"
    assert cli.run(["gen-data", "--config", str(cfg_path), "--out-src", str(s), "--out-tgt", str(t)]) == 0
    return s, t


def _layer(w, act):
    return LinearLayer(Node(np.asarray(w, float)), Node(np.zeros(len(w))), act)


def label_echo_model(C):
    """Features are the labels themselves; the network passes them through and sharpens."""
    f_g = Mlp([_layer(np.eye(64, C), "relu"), _layer(np.eye(32, 64), "relu")])
    head = _layer(60 * np.eye(C, 32), "identity")
    head.bias.value = np.full(C, -30.0)
    return Model(f_g, Mlp([head]), EBlock.create(0))


def test_gen_data_byte_identical(tmp_path, cfg_path, pair_paths):
    s2, t2 = tmp_path / "s2.csv", tmp_path / "t2.csv"
    cli.run(["gen-data", "--config", str(cfg_path), "--out-src", str(s2), "--out-tgt", str(t2)])
    assert s2.read_bytes() == pair_paths[0].read_bytes()
    assert t2.read_bytes() == pair_paths[1].read_bytes()


def test_train_eval_hist(tmp_path, cfg_path, pair_paths, capsys):
    s, t = pair_paths
    model, log = tmp_path / "m.bin", tmp_path / "log.jsonl"
    assert cli.run(["train", "--config", str(cfg_path), "--src", str(s), "--tgt", str(t),
                    "--out-model", str(model), "--log", str(log)]) == 0
    assert len(log.read_text().splitlines()) == 1
    capsys.readouterr()
    assert cli.run(["eval", "--model", str(model), "--data", str(t)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert list(report) == ["map", "cp", "cr", "cf1", "op", "or", "of1"]
    hist = tmp_path / "h.csv"
    assert cli.run(["hist", "--model", str(model), "--data", str(t), "--out", str(hist)]) == 0
    rows = hist.read_text().splitlines()
    assert len(rows) == 51 and sum(int(r.split(",")[2]) for r in rows[1:]) == 120 * 8


def test_eval_perfect_model(tmp_path, capsys):
    y = (np.random.default_rng(0).random((20, 4)) < 0.4).astype(float)
    y[:, 0] = np.maximum(y[:, 0], 1 - y.max(axis=1))  # no empty rows
    data = tmp_path / "d.csv"
    save_csv(MultiLabelDataset(y.copy(), y, "target"), data)
    save_model(label_echo_model(4), tmp_path / "m.bin")
    assert cli.run(["eval", "--model", str(tmp_path / "m.bin"), "--data", str(data)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert all(v == 1.0 for v in report.values()), report


def test_fit_gmm_em_six_points(tmp_path, capsys):
    p = tmp_path / "v.csv"
    p.write_text("value\n" + "\n".join(str(v) for v in [0.01, 0.02, 0.03, 0.97, 0.98, 0.99]) + "\n")
    assert cli.run(["fit-gmm", "--values", str(p), "--method", "em"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert abs(out["mu"][0] - 0.02) < 1e-3 and abs(out["mu"][1] - 0.98) < 1e-3


def test_fit_gmm_deepem(tmp_path, capsys):
    rng = np.random.default_rng(0)
    xs = np.r_[rng.normal(0.1, 0.04, 150), rng.normal(0.85, 0.05, 50)]
    p = tmp_path / "v.csv"
    p.write_text("\n".join(repr(float(v)) for v in xs))
    assert cli.run(["fit-gmm", "--values", str(p), "--method", "deepem", "--steps", "300"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert abs(out["mu"][0] - 0.1) < 0.05 and abs(out["mu"][1] - 0.85) < 0.05


def test_fit_gmm_legacy_flag_em_only(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text("0.1\n0.9\n0.2\n")
    assert cli.run(["fit-gmm", "--values", str(p), "--legacy-mstep"]) == 0
    assert cli.run(["fit-gmm", "--values", str(p), "--method", "deepem", "--legacy-mstep"]) == 1


def test_bench_em_csv(cfg_path, capsys):
    assert cli.run(["bench-em", "--config", str(cfg_path), "--batches", "10"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "method,rel_tol,mean_seconds,std_seconds,mean_iterations"
    assert [l.split(",")[0] for l in lines[1:]] == ["em", "deepem"]


def test_sweep_alpha(cfg_path, capsys):
    assert cli.run(["sweep-alpha", "--config", str(cfg_path), "--grid", "0.25:0.75:0.25"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "alpha_1,alpha_2,target_map"
    assert [l.split(",")[:2] for l in lines[1:]] == [["0.25", "0.75"], ["0.5", "0.5"], ["0.75", "0.25"]]


def test_missing_file_exit_one(tmp_path, capsys):
    missing = tmp_path / "nope.bin"
    assert cli.run(["eval", "--model", str(missing), "--data", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_malformed_config_names_field(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"epochz": 3}))
    assert cli.run(["gen-data", "--config", str(p), "--out-src", "a", "--out-tgt", "b"]) == 1
    assert "epochz" in capsys.readouterr().err


def test_usage_error_exit_two(capsys):
    assert cli.run(["train"]) == 2
    assert cli.run(["frobnicate"]) == 2
    assert cli.run(["sweep-alpha", "--grid", "bad"]) == 1


def test_console_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gmmda", "fit-gmm", "--values", str(tmp_path / "x")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "no such file" in proc.stderr
    assert proc.stdout == ""


def test_roundtrip_generated_csv(pair_paths):
    ds = load_csv(pair_paths[0])
    assert ds.n == 120 and ds.d == 16 and ds.num_classes == 8
