import json

import numpy as np
import pytest

from mixer_dsr import datagen
from mixer_dsr.cli import main
from mixer_dsr.config import RunConfig, dump_config, load_config, parse_config
from mixer_dsr.errors import ConfigError

FAST = """
benchmark = odebench-2
width = 16
outer_iters = 2
inner_iters_theta = 2
inner_iters_xi = 2
gate_period = 2
substeps = 1
checkpoint_every = 1
adapt_steps = 3
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["generate", "odebench-2", "--seed", "0", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def run(tmp_path_factory, dataset):
    root = tmp_path_factory.mktemp("runs")
    cfg = root / "fast.txt"
    cfg.write_text(FAST)
    out = root / "m2"
    code = main(["train", "--config", str(cfg), "--dataset", str(dataset / "dataset.mxd"), "--out", str(out)])
    assert code == 0
    return out


# ---- config ------------------------------------------------------------------------


def test_config_round_trip():
    cfg = parse_config(FAST)
    assert cfg.width == 16 and cfg.substeps == 1 and cfg.split_contexts is True
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("text", ["widht = 3", "width = 3\nwidth = 4", "width = three", "width",
                                  "split_contexts = maybe", "experts = 3", "benchmark = odebench-3",
                                  "backbone = siren", "lr_theta = -1"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_comments_and_overrides(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# a comment\nexperts = 1  # trailing\n")
    cfg = load_config(p, {"seed": 7, "out": None})
    assert cfg.experts == 1 and cfg.seed == 7 and cfg.out == RunConfig().out
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.txt")


# ---- generate ----------------------------------------------------------------------


def test_generate_is_idempotent(tmp_path, dataset):
    assert main(["generate", "odebench-2", "--seed", "0", "--out", str(tmp_path)]) == 0
    for name in ("dataset.mxd", "manifest.txt"):
        assert (tmp_path / name).read_bytes() == (dataset / name).read_bytes()
    assert "train environments: 10" in (tmp_path / "manifest.txt").read_text()


def test_unknown_benchmark_exits_2(capsys):
    assert main(["generate", "odebench-3"]) == 2
    assert "usage" in capsys.readouterr().err


def test_generation_failure_exits_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise datagen.GenerationError("family x failed")

    monkeypatch.setattr(datagen, "generate", boom)
    assert main(["generate", "odebench-2", "--out", str(tmp_path)]) == 3


# ---- train / eval / adapt / plot ---------------------------------------------------


def test_train_writes_run_directory(run):
    for name in ("config.txt", "metrics.csv", "report.json", "train.log", "dataset.mxd",
                 "checkpoints/last.ckpt", "checkpoints/iter_00001.ckpt", "checkpoints/iter_00002.ckpt",
                 "gating/gating_logits.csv", "gating/gating_histogram.csv", "gating/gating_heatmap.svg"):
        assert (run / name).is_file(), name
    report = json.loads((run / "report.json").read_text())
    assert {"train_relmse", "test_relmse", "tprmse", "purity", "routing"} <= report.keys()
    rows = (run / "metrics.csv").read_text().splitlines()
    assert rows[0] == "iter,train_mse,val_relmse,routing" and len(rows) == 3
    assert len(rows[1].split(",")[3].split()) == 10


def test_eval_reproduces_report(run):
    assert main(["eval", str(run)]) == 0
    a = json.loads((run / "report.json").read_text())
    b = json.loads((run / "eval.json").read_text())
    for k in ("train_relmse", "test_relmse", "tprmse"):
        assert b[k] == pytest.approx(a[k], rel=1e-12, abs=0)
    np.testing.assert_allclose(b["per_env_test_relmse"], a["per_env_test_relmse"], rtol=1e-12)
    assert b["routing"] == a["routing"]


def test_single_expert_report_has_no_purity(tmp_path, dataset):
    cfg = tmp_path / "c.txt"
    cfg.write_text(FAST + "experts = 1\nctx_dim = 2\n")
    code = main(["train", "--config", str(cfg), "--dataset", str(dataset / "dataset.mxd"),
                 "--out", str(tmp_path / "m1"), "--outer-iters", "1"])
    assert code == 0
    assert "purity" not in json.loads((tmp_path / "m1" / "report.json").read_text())


def test_resume_reproduces_metrics(tmp_path, run):
    out = tmp_path / "resumed"
    code = main(["train", "--resume", str(run / "checkpoints" / "iter_00001.ckpt"), "--out", str(out)])
    assert code == 0
    assert (out / "metrics.csv").read_text() == (run / "metrics.csv").read_text()
    assert (out / "config.txt").read_text().replace(str(out), "X") == (run / "config.txt").read_text().replace(str(run), "X")


def test_rerun_is_byte_identical_outside_the_log(tmp_path, dataset, run):
    cfg = tmp_path / "fast.txt"
    cfg.write_text(FAST)
    out = tmp_path / "again"
    assert main(["train", "--config", str(cfg), "--dataset", str(dataset / "dataset.mxd"), "--out", str(out)]) == 0
    for name in ("metrics.csv", "report.json", "gating/gating_logits.csv", "gating/gating_heatmap.svg"):
        assert (out / name).read_bytes() == (run / name).read_bytes(), name


def test_adapt_keeps_model_frozen(run, capsys):
    assert main(["adapt", str(run), "--split", "adapt"]) == 0
    assert "frozen: ok" in capsys.readouterr().out
    rep = json.loads((run / "adapt_adapt.json").read_text())
    assert rep["frozen"] and rep["checksum_before"] == rep["checksum_after"]
    assert len(rep["contexts"]) == 8 and rep["steps"] == 3


def test_adapt_zero_steps_records_zero_contexts(run):
    assert main(["adapt", str(run), "--split", "train", "--steps", "0"]) == 0
    rep = json.loads((run / "adapt_train.json").read_text())
    assert np.all(np.array(rep["contexts"]) == 0)


def test_plot_artifacts(run):
    assert main(["plot", str(run)]) == 0
    plots = run / "plots"
    assert sorted(p.name for p in plots.glob("*.svg")) == [
        "gating_heatmap.svg", "gating_histogram.svg", "trajectory_family_25.svg", "trajectory_family_35.svg"]


def test_missing_or_corrupt_checkpoint_exits_2(tmp_path, run):
    assert main(["eval", str(tmp_path)]) == 2
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "config.txt").write_text((run / "config.txt").read_text())
    assert main(["eval", str(broken)]) == 2
    (broken / "checkpoints").mkdir()
    (broken / "checkpoints" / "last.ckpt").write_bytes(b"MXDR\x01\x00\x00\x00\xff")
    assert main(["eval", str(broken)]) == 2
    assert main(["train", "--resume", str(tmp_path / "nope.ckpt")]) == 2


def test_missing_dataset_exits_3(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(FAST)
    code = main(["train", "--config", str(cfg), "--dataset", str(tmp_path / "none.mxd"), "--out", str(tmp_path / "r")])
    assert code == 3


def test_training_abort_exits_4(tmp_path, dataset, monkeypatch):
    from mixer_dsr import cli
    from mixer_dsr.errors import TrainingAborted

    def abort(*a, **k):
        raise TrainingAborted("3 consecutive non-finite outer iterations")

    monkeypatch.setattr(cli, "train", abort)
    cfg = tmp_path / "c.txt"
    cfg.write_text(FAST)
    code = main(["train", "--config", str(cfg), "--dataset", str(dataset / "dataset.mxd"), "--out", str(tmp_path / "r")])
    assert code == 4


def test_thread_env_var(monkeypatch, tmp_path, dataset):
    monkeypatch.setenv("MIXER_DSR_THREADS", "1")
    assert main(["generate", "odebench-2", "--out", str(tmp_path)]) == 0
    monkeypatch.setenv("MIXER_DSR_THREADS", "many")
    assert main(["generate", "odebench-2", "--out", str(tmp_path)]) == 2
