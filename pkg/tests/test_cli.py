import csv
import json

import numpy as np
import pytest
import yaml

from jsdlab.cli import main
from jsdlab.config import ConfigError, ExperimentConfig

SMALL = {
    "data": {"n_points": 256},
    "model": {"hidden": 16, "time_dim": 8, "class_dim": 4},
    "training": {"epochs": 2, "samples": 20},
}


def write_config(path, body):
    path.write_text(yaml.safe_dump(body))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture()
def small_config(tmp_path):
    return write_config(tmp_path / "small.yaml", SMALL)


@pytest.fixture(scope="module")
def checkpoint(model, sched, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.npz"
    model.save(path, {"schedule": sched.params()})
    return str(path)


def test_sweep_outputs(tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert rows[0] == ["a", "kl", "jd", "jsd", "gjsd", "approx"]
    assert len(rows) == 101 and all(len(r) == 6 for r in rows)
    assert rows[1][1] == rows[1][2] == rows[-1][1] == "inf"
    assert (out / "sweep.svg").exists()
    assert sorted(manifest(out)["files"]) == ["sweep.csv", "sweep.svg"]


def test_train_one_epoch(tmp_path, small_config):
    out = tmp_path / "train"
    assert main(["train", "--config", small_config, "--epochs", "1", "--out", str(out)]) == 0
    assert read_csv(out / "loss.csv")[0] == ["epoch", "mean_loss"]
    assert len(read_csv(out / "loss.csv")) == 2
    files = manifest(out)["files"]
    for name in ("model.npz", "loss.csv", "samples.csv", "dataset.csv", "samples.svg", "loss.svg", "config.yaml"):
        assert name in files and (out / name).exists()
    assert sorted(p.name for p in out.iterdir()) == sorted(files + ["manifest.json"])


def test_train_rerun_is_byte_identical(tmp_path, small_config):
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert main(["train", "--config", small_config, "--out", str(o)]) == 0
    for name in ("loss.csv", "samples.csv", "dataset.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_resume_from_corrupted_checkpoint(tmp_path, small_config, capsys):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"garbage")
    out = tmp_path / "train"
    assert main(["train", "--config", small_config, "--resume", str(bad), "--out", str(out)]) == 2
    assert "bad.npz" in capsys.readouterr().err
    assert not out.exists()


def test_resume_continues_training(tmp_path, small_config):
    first = tmp_path / "first"
    assert main(["train", "--config", small_config, "--epochs", "1", "--out", str(first)]) == 0
    second = tmp_path / "second"
    args = ["train", "--config", small_config, "--epochs", "1", "--resume", str(first / "model.npz")]
    assert main(args + ["--out", str(second)]) == 0
    assert len(read_csv(second / "loss.csv")) == 2


def test_refuses_existing_output(tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--out", str(out), "--no-plot"]) == 0
    assert main(["sweep", "--out", str(out), "--no-plot"]) == 2
    assert main(["sweep", "--out", str(out), "--force"]) == 0
    assert sorted(manifest(out)["files"]) == ["sweep.csv", "sweep.svg"]
    foreign = tmp_path / "foreign"
    foreign.mkdir()
    (foreign / "keep.txt").write_text("x")
    assert main(["sweep", "--out", str(foreign), "--force"]) == 2
    assert (foreign / "keep.txt").exists()


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("JSDLAB_OUT", str(tmp_path / "root"))
    assert main(["sweep", "--no-plot"]) == 0
    assert (tmp_path / "root" / "sweep" / "sweep.csv").exists()


def test_invalid_config_names_field(tmp_path):
    path = write_config(tmp_path / "bad.yaml", {"training": {"epochs": 0}})
    with pytest.raises(ConfigError, match="training.epochs"):
        ExperimentConfig.load(path)
    with pytest.raises(ConfigError, match="model.width"):
        ExperimentConfig.from_dict({"model": {"width": 3}})
    with pytest.raises(ConfigError, match="distillation.t_min"):
        ExperimentConfig.from_dict({"distillation": {"t_min": 5}})
    assert main(["sweep", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(SMALL)
    cfg.dump(tmp_path / "c.yaml")
    back = ExperimentConfig.load(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict() and back.digest() == cfg.digest()
    assert ExperimentConfig.from_dict({}).training.epochs == 1000


def test_distill_counts_files(tmp_path, checkpoint):
    out = tmp_path / "d"
    assert main(["distill", "--checkpoint", checkpoint, "--seeds", "10", "--method", "both",
                 "--start", "1,1", "--out", str(out)]) == 0
    files = sorted((out / "trajectories").glob("*.jsonl"))
    assert len(files) == 20
    assert files[0].name == "jsd_start_1_1_seed_00000.jsonl"
    rows = read_csv(out / "trajectories.csv")
    assert len(rows) == 1 + 20 * 10
    assert len(read_csv(out / "terminals.csv")) == 21
    assert len(manifest(out)["files"]) == 23


def test_distill_rejects_schedule_mismatch(tmp_path, checkpoint):
    cfg = write_config(tmp_path / "c.yaml", {"schedule": {"beta_end": 0.03}})
    out = tmp_path / "d"
    assert main(["distill", "--config", cfg, "--checkpoint", checkpoint, "--seeds", "2", "--out", str(out)]) == 2
    assert not out.exists()


def test_distill_rerun_is_byte_identical(tmp_path, checkpoint):
    outs = [tmp_path / "a", tmp_path / "b"]
    for o, w in zip(outs, ("1", "2")):
        assert main(["distill", "--checkpoint", checkpoint, "--seeds", "30", "--workers", w,
                     "--out", str(o)]) == 0
    for name in ("trajectories.csv", "terminals.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_analyze_artifacts(tmp_path, checkpoint):
    src = tmp_path / "d"
    assert main(["distill", "--checkpoint", checkpoint, "--seeds", "5", "--start", "1,1",
                 "--start=-1,1", "--out", str(src)]) == 0
    assert main(["analyze", str(src)]) == 0
    out = src / "analysis"
    for name in ("correlation.csv", "correlation_summary.csv", "mode_coverage.csv",
                 "scatter_sds.svg", "scatter_jsd.svg", "trajectories_jsd_start_-1_1.svg"):
        assert (out / name).exists()
    assert len(read_csv(out / "correlation.csv")) == 1 + 20
    summary = read_csv(out / "correlation_summary.csv")
    assert [r[0] for r in summary[1:]] == ["jsd", "sds", "jsd_minus_sds"]
    first = {n: (out / n).read_bytes() for n in ("correlation.csv", "mode_coverage.csv")}
    assert main(["analyze", str(src), "--out", str(tmp_path / "again")]) == 0
    for n, blob in first.items():
        assert (tmp_path / "again" / n).read_bytes() == blob


def test_analyze_single_method(tmp_path, checkpoint):
    src = tmp_path / "d"
    assert main(["distill", "--checkpoint", checkpoint, "--seeds", "3", "--method", "sds", "--out", str(src)]) == 0
    assert main(["analyze", str(src)]) == 0
    summary = read_csv(src / "analysis" / "correlation_summary.csv")
    assert summary[-1][:2] == ["jsd_minus_sds", "unavailable"]


def test_analyze_empty_corpus(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["analyze", str(tmp_path / "empty")]) == 2
    assert "no trajectory files" in capsys.readouterr().err


def test_sample_command(tmp_path, checkpoint):
    out = tmp_path / "s"
    assert main(["sample", "--checkpoint", checkpoint, "--n", "50", "--label", "2", "--scale", "3",
                 "--out", str(out)]) == 0
    rows = read_csv(out / "samples.csv")
    assert len(rows) == 51
    modes = np.array([int(r[2]) for r in rows[1:]])
    assert np.mean(modes == 2) >= 0.9
