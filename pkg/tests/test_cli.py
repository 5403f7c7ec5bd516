"""End-to-end command-line pipeline: synth, train, sample, evaluate, gradcheck."""

import json

import numpy as np
import pytest

from flowfield import data as D
from flowfield.cli import (EXIT_CHECK_FAILED, EXIT_DIVERGED, EXIT_IO, EXIT_OK,
                           EXIT_USAGE, DEFAULT_SWEEP, load_run_config, main)


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def synth_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "synth.ffd"
    assert run(["synth", "--out", str(path), "--points", "16",
                "--grid", "5x4", "--seed", "1"]) == EXIT_OK
    return path


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, synth_file):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps({
        "preset": "synth-small",
        "model": {"points": 16, "embed_dim": 32, "hidden_dim": 32,
                  "num_blocks": 1, "num_heads": 2},
        "train": {"steps": 60, "batch_size": 8, "eval_every": 0,
                  "log_every": 20, "checkpoint_every": 50},
    }))
    assert run(["train", "--config", str(cfg), "--data", str(synth_file),
                "--out", str(out), "--quiet"]) == EXIT_OK
    return out


# -- synth ---------------------------------------------------------------------


def test_synth_writes_grid_product(synth_file):
    ds = D.load_dataset(synth_file)
    assert ds.num_samples == 20
    assert ds.num_points == 16


def test_synth_deterministic_bytes(tmp_path, synth_file):
    other = tmp_path / "again.ffd"
    assert run(["synth", "--out", str(other), "--points", "16",
                "--grid", "5x4", "--seed", "1"]) == EXIT_OK
    assert other.read_bytes() == synth_file.read_bytes()


def test_synth_zero_grid_is_usage_error(tmp_path):
    assert run(["synth", "--out", str(tmp_path / "x.ffd"),
                "--grid", "0x5"]) == EXIT_USAGE


def test_synth_unwritable_path_is_io_error():
    assert run(["synth", "--out", "/nonexistent-dir/x.ffd",
                "--grid", "5x4"]) == EXIT_IO


# -- train ---------------------------------------------------------------------


def test_train_writes_outputs(trained_dir):
    assert (trained_dir / "checkpoint_final.ffck").exists()
    assert (trained_dir / "checkpoint_00000050.ffck").exists()
    trace = (trained_dir / "loss_trace.csv").read_text().splitlines()
    assert trace[0] == "step,loss,lr,grad_norm"
    assert len(trace) > 2


def test_train_unknown_key_names_it(tmp_path, synth_file, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"preset": "synth-small",
                               "model": {"depth": 3}}))
    assert run(["train", "--config", str(cfg), "--data", str(synth_file),
                "--out", str(tmp_path)]) == EXIT_USAGE
    assert "depth" in capsys.readouterr().err


def test_train_missing_data_is_io_error(tmp_path):
    assert run(["train", "--preset", "synth-small",
                "--data", str(tmp_path / "missing.ffd"),
                "--out", str(tmp_path)]) == EXIT_IO


def test_run_config_unknown_section_rejected(tmp_path):
    from flowfield.errors import ConfigError
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"models": {}}))
    with pytest.raises(ConfigError, match="models"):
        load_run_config(str(cfg), None)


def test_default_sweep_has_seven_scales():
    assert [float(s) for s in DEFAULT_SWEEP.split(",")] == \
        [1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 6.0]


# -- sample ---------------------------------------------------------------------


def test_sample_deterministic_and_guidance_endpoints(tmp_path, trained_dir):
    conds = tmp_path / "conds.csv"
    conds.write_text("c1,c2\n0.25,0.5\n0.75,-0.5\n")
    ckpt = str(trained_dir / "checkpoint_final.ffck")
    a, b = tmp_path / "a.ffd", tmp_path / "b.ffd"
    base = ["sample", "--checkpoint", ckpt, "--conditions", str(conds),
            "--steps", "20", "--seed", "3"]
    assert run(base + ["--guidance", "1.0", "--out", str(a)]) == EXIT_OK
    assert run(base + ["--guidance", "1.0", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.ffd"
    assert run(base + ["--guidance", "0.0", "--out", str(c)]) == EXIT_OK
    assert c.read_bytes() != a.read_bytes()
    out = D.load_dataset(a)
    assert out.fields.shape == (2, 1, 16)


def test_sample_condition_dim_mismatch(tmp_path, trained_dir):
    conds = tmp_path / "conds3.csv"
    conds.write_text("c1,c2,c3\n0.1,0.2,0.3\n")
    assert run(["sample", "--checkpoint",
                str(trained_dir / "checkpoint_final.ffck"),
                "--conditions", str(conds), "--steps", "5",
                "--out", str(tmp_path / "x.ffd")]) == EXIT_USAGE


def test_sample_zero_steps_usage_error(tmp_path, trained_dir):
    conds = tmp_path / "c.csv"
    conds.write_text("c1,c2\n0.1,0.2\n")
    assert run(["sample", "--checkpoint",
                str(trained_dir / "checkpoint_final.ffck"),
                "--conditions", str(conds), "--steps", "0",
                "--out", str(tmp_path / "x.ffd")]) == EXIT_USAGE


# -- evaluate ---------------------------------------------------------------------


def test_evaluate_writes_reports(tmp_path, trained_dir, synth_file):
    out = tmp_path / "eval"
    assert run(["evaluate", "--checkpoint",
                str(trained_dir / "checkpoint_final.ffck"),
                "--data", str(synth_file), "--split", "test",
                "--guidance-sweep", "1,2", "--steps", "10",
                "--out", str(out)]) == EXIT_OK
    for tag in ("1", "2"):
        doc = json.loads((out / f"metrics_s{tag}.json").read_text())
        assert "relative_l2" in doc and "r2" in doc
        scatter = (out / f"scatter_s{tag}.csv").read_text().splitlines()
        assert scatter[0] == "true,predicted,residual"
        assert len(scatter) > 1


def test_evaluate_deterministic_outputs(tmp_path, trained_dir, synth_file):
    a, b = tmp_path / "e1", tmp_path / "e2"
    args = ["evaluate", "--checkpoint",
            str(trained_dir / "checkpoint_final.ffck"),
            "--data", str(synth_file), "--split", "val",
            "--guidance-sweep", "2", "--steps", "8"]
    assert run(args + ["--out", str(a)]) == EXIT_OK
    assert run(args + ["--out", str(b)]) == EXIT_OK
    assert (a / "metrics_s2.json").read_bytes() == (b / "metrics_s2.json").read_bytes()
    assert (a / "scatter_s2.csv").read_bytes() == (b / "scatter_s2.csv").read_bytes()


def test_evaluate_threaded_matches_serial(tmp_path, trained_dir, synth_file,
                                          monkeypatch):
    a, b = tmp_path / "serial", tmp_path / "threaded"
    args = ["evaluate", "--checkpoint",
            str(trained_dir / "checkpoint_final.ffck"),
            "--data", str(synth_file), "--split", "test",
            "--guidance-sweep", "2", "--steps", "8"]
    monkeypatch.setenv("FLOWFIELD_THREADS", "1")
    assert run(args + ["--out", str(a)]) == EXIT_OK
    monkeypatch.setenv("FLOWFIELD_THREADS", "3")
    assert run(args + ["--out", str(b)]) == EXIT_OK
    assert (a / "metrics_s2.json").read_bytes() == (b / "metrics_s2.json").read_bytes()


def test_evaluate_weighted_r2_with_aoa_column(tmp_path, trained_dir, synth_file):
    out = tmp_path / "eval_w"
    assert run(["evaluate", "--checkpoint",
                str(trained_dir / "checkpoint_final.ffck"),
                "--data", str(synth_file), "--split", "test",
                "--guidance-sweep", "2", "--steps", "8",
                "--aoa-column", "1", "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "metrics_s2.json").read_text())
    # synthetic c2 values lie inside [-10, 10]: all weights 1, so the
    # weighted value coincides with the plain one
    assert doc["weighted_r2"] == pytest.approx(doc["r2"], rel=1e-6)


def test_evaluate_bad_split_flag(tmp_path, trained_dir, synth_file):
    with pytest.raises(SystemExit) as exc:
        run(["evaluate", "--checkpoint",
             str(trained_dir / "checkpoint_final.ffck"),
             "--data", str(synth_file), "--split", "nope",
             "--out", str(tmp_path / "x")])
    assert exc.value.code == 2


# -- gradcheck ---------------------------------------------------------------------


def test_gradcheck_unknown_preset():
    assert run(["gradcheck", "--preset", "nope"]) == EXIT_USAGE


def test_gradcheck_impossible_tolerance():
    assert run(["gradcheck", "--preset", "synth-dit",
                "--tolerance", "1e-12"]) == EXIT_CHECK_FAILED
