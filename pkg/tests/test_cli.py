import csv
import json

import pytest
import yaml

from bdann.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    ConfigError,
    default_config,
    load_config,
    main,
    settings_from_config,
)
from bdann.pipeline import PipelineSettings

TINY_STAGE = {"max_epochs": 4, "patience": 2, "batch_size": 16, "lr": 3e-3}
TINY = {
    "dataset": {"ablation": 40},
    "model": {"extractor_hidden": [8, 8], "head_hidden": [4], "classifier_hidden": [8]},
    "stage1": TINY_STAGE, "stage2": dict(TINY_STAGE, lr=5e-5), "stage3": TINY_STAGE,
    "scratch": TINY_STAGE, "direct": TINY_STAGE,
    "bayes": {"mc_samples": 10, "val_mc_samples": 2},
    "ensemble": {"n_runs": 2},
    "hpo": {"phase1_budget": 2, "phase2_budget": 2, "warm_random": 1},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def _run(*args):
    return main([str(a) for a in args])


def _metrics(run):
    return json.loads((run / "metrics.json").read_text())


class TestConfig:
    def test_defaults_match_pipeline(self):
        assert settings_from_config(load_config(None)) == PipelineSettings()

    def test_unknown_field_path(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("stage2:\n  lrr: 1.0\n")
        with pytest.raises(ConfigError, match=r"^stage2\.lrr: unknown field"):
            load_config(p)

    def test_out_of_bounds_path(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("lambda_schedule:\n  lambda_min_fraction: 1.5\n")
        with pytest.raises(ConfigError, match=r"^lambda_schedule\.lambda_min_fraction"):
            load_config(p)

    def test_missing_csv(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("dataset:\n  kind: csv\n  source_csv: nope.csv\n  target_csv: nope.csv\n")
        with pytest.raises(ConfigError, match=r"^dataset\.source_csv"):
            load_config(p)

    def test_default_schema_complete(self):
        cfg = default_config()
        assert cfg["ensemble"]["n_runs"] == 20 and cfg["dataset"]["n_source"] == 7000


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text("seed: -1\n")
        assert _run("train", "--config", p, "--out", tmp_path / "r") == EXIT_CONFIG
        assert "seed" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert _run("train", "--config", tmp_path / "none.yaml") == EXIT_CONFIG

    def test_bad_worker_env(self, tmp_path, monkeypatch, cfg_path):
        monkeypatch.setenv("BDANN_WORKERS", "many")
        assert _run("generate", "--config", cfg_path, "--out", tmp_path / "g") == EXIT_CONFIG

    def test_runtime_error(self, tmp_path, cfg_path, monkeypatch):
        import bdann.cli as cli

        def boom(*a, **k):
            raise RuntimeError("diverged")
        monkeypatch.setattr(cli, "train_strategy", boom)
        assert _run("train", "--config", cfg_path, "--out", tmp_path / "r") == EXIT_RUNTIME

    def test_evaluate_needs_model(self, tmp_path, cfg_path):
        assert _run("evaluate", "--config", cfg_path, "--out", tmp_path / "e") == EXIT_CONFIG


def test_generate_idempotent(tmp_path, cfg_path):
    assert _run("generate", "--config", cfg_path, "--ablation", 75, "--out", tmp_path / "a") == 0
    assert _run("generate", "--config", cfg_path, "--ablation", 75, "--out", tmp_path / "b") == 0
    for name in ("source.csv", "target.csv", "target_train_75.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with open(tmp_path / "a" / "target_train_75.csv") as fh:
        assert sum(1 for _ in fh) == 76


def test_output_root_env(tmp_path, cfg_path, monkeypatch, capsys):
    monkeypatch.setenv("BDANN_OUTPUT_ROOT", str(tmp_path / "root"))
    assert _run("generate", "--config", cfg_path) == EXIT_OK
    run = capsys.readouterr().out.strip()
    assert run.startswith(str(tmp_path / "root"))


def test_train_evaluate_calibrate(tmp_path, cfg_path):
    run = tmp_path / "train"
    assert _run("train", "--config", cfg_path, "--out", run, "--seed", 3) == EXIT_OK
    for name in ("config.yaml", "run.json", "model.json", "metrics.json", "summary.csv",
                 "epochs_stage1.csv", "epochs_stage2.csv", "epochs_stage3.csv",
                 "calibration.csv", "calibration.json", "rstd_histogram.csv", "pca_test.csv"):
        assert (run / name).exists(), name
    info = json.loads((run / "run.json").read_text())
    assert info["seed"] == 3 and len(info["config_hash"]) == 64 and "numpy" in info["versions"]

    ev = tmp_path / "eval"
    assert _run("evaluate", "--config", run / "config.yaml", "--model", run, "--out", ev) == 0
    assert _metrics(ev)["metrics"] == _metrics(run)["metrics"]

    cal = tmp_path / "cal"
    assert _run("calibrate", "--config", run / "config.yaml", "--model", run, "--out", cal) == 0
    with open(cal / "calibration.csv") as fh:
        sources = {r["source"] for r in csv.DictReader(fh)}
    assert sources == {"epistemic", "aleatoric", "total"}
    assert _metrics(cal)["miscalibration_area"] == _metrics(run)["miscalibration_area"]


def test_rerun_from_copied_config_reproduces(tmp_path, cfg_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("train", "--config", cfg_path, "--out", a) == 0
    assert _run("train", "--config", a / "config.yaml", "--out", b) == 0
    ma, mb = _metrics(a), _metrics(b)
    for k, v in ma["metrics"].items():
        if isinstance(v, float):
            assert abs(v - mb["metrics"][k]) <= 1e-12
    assert (a / "model.json").read_text() == (b / "model.json").read_text()
    assert json.loads((a / "run.json").read_text())["config_hash"] == \
        json.loads((b / "run.json").read_text())["config_hash"]


def test_ensemble_summary_table(tmp_path, cfg_path):
    run = tmp_path / "ens"
    assert _run("ensemble", "--config", cfg_path, "--strategy", "all", "--out", run) == 0
    with open(run / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["strategy"] for r in rows] == ["from_scratch", "direct_transfer", "staged_bdann"]
    for r in rows:
        assert r["n_runs"] == "2" and r["n_target"] == "40"
        for m in ("mu_error_pct", "max_error_pct", "std_error_pct", "rrmse_pct",
                  "p_over_10_pct", "r2"):
            float(r[m]), float(r[m + "_ci95"])


def test_hpo(tmp_path, cfg_path):
    run = tmp_path / "hpo"
    assert _run("hpo", "--config", cfg_path, "--strategy", "direct_transfer", "--out", run) == 0
    res = json.loads((run / "hpo.json").read_text())
    assert len(res["phase1"]["history"]) == 2 and len(res["phase2"]["history"]) == 2
    assert (run / "search_space.json").exists()


def test_hybrid_synthetic(tmp_path, cfg_path):
    run = tmp_path / "hy"
    assert _run("hybrid", "--config", cfg_path, "--out", run) == 0
    m = _metrics(run)
    assert {"base_model", "staged_bdann", "from_scratch"} <= set(m)
    assert (run / "predictions_staged_bdann.csv").exists()


def test_hybrid_csv(tmp_path):
    import numpy as np
    rng = np.random.default_rng(0)
    units = {"D": "mm", "L": "m", "P": "MPa", "G": "kg/m2/s", "dh_sub": "kJ/kg",
             "q_cr": "kW/m2", "q_base": "kW/m2"}
    for name, shift, n in (("src.csv", 0.0, 300), ("tgt.csv", 0.2, 120)):
        lines = ["D,L,P,G,dh_sub,q_cr,q_base"]
        for _ in range(n):
            x = rng.uniform(1, 3, 5)
            q = 1000 * (1 + 0.2 * x[0] + 0.1 * x[2] + shift * x[3])
            lines.append(",".join(repr(float(v)) for v in list(x) + [q, 0.9 * q]))
        (tmp_path / name).write_text("\n".join(lines) + "\n")
        (tmp_path / (name + ".json")).write_text(json.dumps({"units": units}))
    cfg = dict(TINY, dataset={"kind": "csv", "source_csv": "src.csv", "target_csv": "tgt.csv"})
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(cfg))
    assert _run("hybrid", "--config", p, "--out", tmp_path / "run") == 0
    assert _run("train", "--config", p, "--strategy", "direct_transfer",
                "--out", tmp_path / "run2") == 0
