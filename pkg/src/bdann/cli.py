"""Command-line front end: ``bdann <command> --config run.yaml``.

Every command writes a self-describing run directory holding the resolved
config, its hash, the seed and library versions next to the results.
Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__, hpo
from .adversarial import LambdaSchedule
from .bayes import BetaSchedule
from .hybrid import (
    BaseModel,
    SchemaError,
    TabularSchema,
    ingest_csv,
    pretrain_corrector_base,
    run_corrector_ensemble,
    synthetic_hybrid_task,
    write_predictions_csv,
)
from .metrics import (
    MetricsReport,
    calibration,
    error_metrics,
    hull_membership,
    pca_2d,
    rstd_distribution,
    write_calibration_csv,
    write_histogram_csv,
    write_json,
)
from .nn import OptimizerConfig
from .pipeline import (
    DIRECT_MODES,
    STRATEGIES,
    Architecture,
    PipelineSettings,
    StageConfig,
    evaluate,
    model_from_dict,
    model_to_dict,
    pretrain_base,
    run_seed_ensemble,
    train_strategy,
)
from .synthetic import DomainData, make_benchmark, write_benchmark

log = logging.getLogger("bdann")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
ENV_OUT = "BDANN_OUTPUT_ROOT"
ENV_WORKERS = "BDANN_WORKERS"
COMMANDS = ("generate", "train", "ensemble", "evaluate", "calibrate", "hpo", "hybrid")
STAGES = ("stage1", "stage2", "stage3", "scratch", "direct")
METRIC_COLUMNS = ("mu_error_pct", "max_error_pct", "std_error_pct", "rrmse_pct",
                  "p_over_10_pct", "r2")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


# ---------------------------------------------------------------- configuration

def default_config() -> dict:
    """The full schema with defaults; user files override any subset."""
    s = PipelineSettings()
    a = s.arch

    def stage(cfg: StageConfig) -> dict:
        return {"max_epochs": cfg.max_epochs, "patience": cfg.patience,
                "batch_size": cfg.batch_size, "lr": cfg.optimizer.initial_learning_rate,
                "l2_penalty": cfg.optimizer.l2_penalty}

    lam = s.lambda_schedule
    return {
        "strategy": "staged_bdann",
        "seed": 0,
        "dataset": {"kind": "synthetic", "ablation": 500, "n_source": 7000, "n_target": 1000,
                    "identical_domains": False, "source_csv": None, "target_csv": None},
        "model": {"extractor_hidden": list(a.extractor_hidden), "head_hidden": list(a.head_hidden),
                  "activation": a.activation, "classifier_hidden": list(a.classifier_hidden),
                  "classifier_dropout": a.classifier_dropout},
        **{name: stage(getattr(s, name)) for name in STAGES},
        "lambda_schedule": {"lambda_max": lam.lambda_max,
                            "lambda_min_fraction": lam.lambda_min_fraction,
                            "ramp_k": lam.ramp_k, "warmup_epochs": lam.warmup_epochs},
        "beta_schedule": {"beta_max": s.beta_schedule.beta_max},
        "bayes": {"init_std": s.init_std, "prior_std": s.prior_std, "mc_samples": s.mc_samples,
                  "val_mc_samples": s.val_mc_samples},
        "gamma": s.gamma,
        "domain_val_fraction": s.domain_val_fraction,
        "direct_mode": s.direct_mode,
        "partial_k": s.partial_k,
        "ensemble": {"n_runs": 20, "base_seed": 0},
        "hpo": {"phase1_budget": 40, "phase2_budget": 40, "warm_random": 20},
        "hybrid": {"bias": 0.9, "base_tag": "q_base",
                   "strategies": ["staged_bdann", "from_scratch"]},
    }


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        where = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected a mapping")
            out[key] = _merge(defaults[key], val, where + ".")
        else:
            out[key] = val
    return out


def _check(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg: dict, base_dir: Path | None = None) -> None:
    _check(cfg["strategy"] in STRATEGIES + ("all",), "strategy",
           f"must be one of {list(STRATEGIES) + ['all']}")
    _check(_is_int(cfg["seed"]) and cfg["seed"] >= 0, "seed", "must be a nonnegative integer")
    ds = cfg["dataset"]
    _check(ds["kind"] in ("synthetic", "csv"), "dataset.kind", "must be 'synthetic' or 'csv'")
    if ds["kind"] == "synthetic":
        for k in ("ablation", "n_source", "n_target"):
            _check(_is_int(ds[k]) and ds[k] >= 1, f"dataset.{k}", "must be a positive integer")
        _check(ds["ablation"] <= ds["n_target"] - 500, "dataset.ablation",
               f"must be at most {ds['n_target'] - 500}")
        _check(ds["n_source"] == 7000, "dataset.n_source",
               "the source partition is fixed at 5000/1000/1000")
    else:
        for k in ("source_csv", "target_csv"):
            p = ds[k]
            _check(isinstance(p, str), f"dataset.{k}", "path required for csv datasets")
            full = Path(p) if base_dir is None else (base_dir / p)
            _check(full.exists(), f"dataset.{k}", f"file {full} does not exist")
    m = cfg["model"]
    for k in ("extractor_hidden", "head_hidden", "classifier_hidden"):
        _check(isinstance(m[k], list) and m[k] and all(_is_int(w) and w >= 1 for w in m[k]),
               f"model.{k}", "must be a nonempty list of positive integers")
    _check(m["activation"] in ("relu", "tanh", "sigmoid"), "model.activation",
           "must be relu, tanh or sigmoid")
    _check(_is_num(m["classifier_dropout"]) and 0 <= m["classifier_dropout"] < 1,
           "model.classifier_dropout", "must lie in [0, 1)")
    for name in STAGES:
        st = cfg[name]
        for k in ("max_epochs", "patience"):
            _check(_is_int(st[k]) and st[k] >= 0, f"{name}.{k}", "must be a nonnegative integer")
        _check(_is_int(st["batch_size"]) and st["batch_size"] >= 1, f"{name}.batch_size",
               "must be a positive integer")
        _check(_is_num(st["lr"]) and st["lr"] > 0, f"{name}.lr", "must be positive")
        _check(_is_num(st["l2_penalty"]) and st["l2_penalty"] >= 0, f"{name}.l2_penalty",
               "must be nonnegative")
    lam = cfg["lambda_schedule"]
    _check(_is_num(lam["lambda_max"]) and lam["lambda_max"] >= 0, "lambda_schedule.lambda_max",
           "must be nonnegative")
    _check(_is_num(lam["lambda_min_fraction"]) and 0 <= lam["lambda_min_fraction"] <= 1,
           "lambda_schedule.lambda_min_fraction", "must lie in [0, 1]")
    _check(_is_num(lam["ramp_k"]) and lam["ramp_k"] > 0, "lambda_schedule.ramp_k",
           "must be positive")
    _check(_is_int(lam["warmup_epochs"]) and lam["warmup_epochs"] >= 0,
           "lambda_schedule.warmup_epochs", "must be a nonnegative integer")
    _check(_is_num(cfg["beta_schedule"]["beta_max"]) and cfg["beta_schedule"]["beta_max"] >= 0,
           "beta_schedule.beta_max", "must be nonnegative")
    b = cfg["bayes"]
    for k in ("init_std", "prior_std"):
        _check(_is_num(b[k]) and b[k] > 0, f"bayes.{k}", "must be positive")
    for k in ("mc_samples", "val_mc_samples"):
        _check(_is_int(b[k]) and b[k] >= 1, f"bayes.{k}", "must be a positive integer")
    _check(_is_num(cfg["gamma"]) and cfg["gamma"] >= 0, "gamma", "must be nonnegative")
    _check(_is_num(cfg["domain_val_fraction"]) and 0 < cfg["domain_val_fraction"] < 1,
           "domain_val_fraction", "must lie in (0, 1)")
    _check(cfg["direct_mode"] in DIRECT_MODES, "direct_mode", f"must be one of {list(DIRECT_MODES)}")
    _check(_is_int(cfg["partial_k"]) and cfg["partial_k"] >= 1, "partial_k",
           "must be a positive integer")
    e = cfg["ensemble"]
    _check(_is_int(e["n_runs"]) and e["n_runs"] >= 2, "ensemble.n_runs", "must be at least 2")
    _check(_is_int(e["base_seed"]) and e["base_seed"] >= 0, "ensemble.base_seed",
           "must be a nonnegative integer")
    h = cfg["hpo"]
    for k in ("phase1_budget", "phase2_budget", "warm_random"):
        _check(_is_int(h[k]) and h[k] >= 1, f"hpo.{k}", "must be a positive integer")
    hy = cfg["hybrid"]
    _check(_is_num(hy["bias"]) and hy["bias"] > 0, "hybrid.bias", "must be positive")
    _check(isinstance(hy["strategies"], list) and hy["strategies"]
           and all(s in STRATEGIES for s in hy["strategies"]), "hybrid.strategies",
           f"must be a nonempty list drawn from {list(STRATEGIES)}")


def load_config(path: str | Path | None, overrides: dict | None = None) -> dict:
    user = {}
    base_dir = None
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config: file {path} does not exist")
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config: not valid YAML ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError("config: top level must be a mapping")
        base_dir = path.parent
    cfg = _merge(default_config(), user)
    for dotted, val in (overrides or {}).items():
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = val
    if cfg["dataset"]["kind"] == "csv" and base_dir is not None:
        for k in ("source_csv", "target_csv"):
            p = cfg["dataset"][k]
            if isinstance(p, str) and not Path(p).is_absolute():
                cfg["dataset"][k] = str((base_dir / p).resolve())
    validate(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def settings_from_config(cfg: dict) -> PipelineSettings:
    m = cfg["model"]
    arch = Architecture(n_features=5, extractor_hidden=tuple(m["extractor_hidden"]),
                        head_hidden=tuple(m["head_hidden"]), activation=m["activation"],
                        classifier_hidden=tuple(m["classifier_hidden"]),
                        classifier_dropout=float(m["classifier_dropout"]))

    def stage(name):
        st = cfg[name]
        return StageConfig(st["max_epochs"], st["patience"], st["batch_size"],
                           OptimizerConfig(initial_learning_rate=float(st["lr"]),
                                           l2_penalty=float(st["l2_penalty"])))

    lam = cfg["lambda_schedule"]
    b = cfg["bayes"]
    return PipelineSettings(
        arch=arch, **{name: stage(name) for name in STAGES},
        lambda_schedule=LambdaSchedule(float(lam["lambda_max"]), float(lam["lambda_min_fraction"]),
                                       float(lam["ramp_k"]), lam["warmup_epochs"]),
        beta_schedule=BetaSchedule(float(cfg["beta_schedule"]["beta_max"])),
        gamma=float(cfg["gamma"]), domain_val_fraction=float(cfg["domain_val_fraction"]),
        init_std=float(b["init_std"]), prior_std=float(b["prior_std"]),
        mc_samples=b["mc_samples"], val_mc_samples=b["val_mc_samples"],
        direct_mode=cfg["direct_mode"], partial_k=cfg["partial_k"])


# ---------------------------------------------------------------- data

def _csv_domain(path: str, seed: int, domain: str, base_column: str | None) -> DomainData:
    schema = TabularSchema(base_column=base_column)
    res = ingest_csv(path, schema, seed, domain)
    for line, why in res.rejected:
        log.warning("%s line %d rejected: %s", path, line, why)
    return res.domain_data()


def load_domains(cfg: dict, base_column: str | None = None) -> tuple[DomainData, DomainData]:
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        bench = make_benchmark(cfg["seed"], ds["ablation"], ds["n_source"], ds["n_target"],
                               identical_domains=ds["identical_domains"])
        return bench.source, bench.target
    return (_csv_domain(ds["source_csv"], cfg["seed"], "source", base_column),
            _csv_domain(ds["target_csv"], cfg["seed"], "target", base_column))


# ---------------------------------------------------------------- run directory

def versions() -> dict:
    return {"bdann": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pyyaml": yaml.__version__,
            "platform": platform.platform()}


def prepare_run_dir(command: str, cfg: dict, out: str | None) -> Path:
    h = config_hash(cfg)
    if out:
        run = Path(out)
    else:
        root = Path(os.environ.get(ENV_OUT, "runs"))
        run = root / f"{command}-{cfg['strategy']}-seed{cfg['seed']}-{h[:10]}"
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    write_json(run / "run.json", {"command": command, "seed": cfg["seed"], "config_hash": h,
                                  "versions": versions()})
    return run


def write_history(run: Path, history: dict[str, list[dict]], prefix: str = "") -> None:
    for stage, rows in history.items():
        if not rows:
            continue
        keys = list(rows[0])
        with (run / f"{prefix}epochs_{stage}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for r in rows:
                w.writerow([repr(r.get(k)) if isinstance(r.get(k), float) else r.get(k)
                            for k in keys])


def write_summary(path: Path, rows: list[tuple[str, int, MetricsReport]]) -> None:
    """Ensemble table: one row per (strategy, target size), mean and 95% CI per metric."""
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["strategy", "n_target", "n_runs"]
        for m in METRIC_COLUMNS:
            header += [m, f"{m}_ci95"]
        w.writerow(header)
        for strategy, n_target, rep in rows:
            row = [strategy, n_target, rep.n_runs]
            for m in METRIC_COLUMNS:
                ci = rep.ci_half_width[m] if rep.ci_half_width else 0.0
                row += [repr(float(getattr(rep, m))), repr(float(ci))]
            w.writerow(row)


def write_uncertainty(run: Path, model, target: DomainData) -> dict:
    """Calibration curves, rStd histogram and PCA hull flags for a Bayesian model."""
    summary = model.predict_summary(target.test.X)
    y = target.test.y
    curves = [calibration(y, summary, src) for src in ("epistemic", "aleatoric", "total")]
    write_calibration_csv(run / "calibration.csv", curves)
    write_json(run / "calibration.json", {c.source: c.to_dict() for c in curves})
    dist = rstd_distribution(summary)
    write_histogram_csv(run / "rstd_histogram.csv", dist)
    write_json(run / "rstd.json", dist.summary())
    pca = pca_2d(target.train.X)
    hull = hull_membership(pca.project(target.train.X), pca.project(target.test.X))
    proj = pca.project(target.test.X)
    with (run / "pca_test.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pc1", "pc2", "inside_hull", "y", "mean", "total_std", "rstd_pct"])
        for (p1, p2), ins, yy, mu, sd in zip(proj, hull.inside, y, summary.mean,
                                             summary.total_std):
            w.writerow([repr(float(p1)), repr(float(p2)), int(ins), repr(float(yy)),
                        repr(float(mu)), repr(float(sd)), repr(float(sd / abs(mu) * 100.0))])
    return {c.source: c.miscalibration_area for c in curves}


# ---------------------------------------------------------------- commands

def cmd_generate(cfg: dict, run: Path, workers: int) -> dict:
    ds = cfg["dataset"]
    if ds["kind"] != "synthetic":
        raise ConfigError("dataset.kind: generate only supports synthetic datasets")
    bench = make_benchmark(cfg["seed"], ds["ablation"], ds["n_source"], ds["n_target"],
                           identical_domains=ds["identical_domains"])
    paths = write_benchmark(bench, run)
    return {"files": {k: p.name for k, p in paths.items()}}


def _train_one(cfg: dict, run: Path, strategy: str) -> dict:
    source, target = load_domains(cfg)
    settings = settings_from_config(cfg)
    model = train_strategy(strategy, source, target, settings, cfg["seed"])
    (run / "model.json").write_text(json.dumps(model_to_dict(model)) + "\n")
    write_history(run, model.history)
    report = evaluate(model, target.test)
    out = {"strategy": strategy, "metrics": report.as_dict(), "info": model.info}
    if model.is_bayesian:
        out["miscalibration_area"] = write_uncertainty(run, model, target)
    write_json(run / "metrics.json", out)
    write_summary(run / "summary.csv", [(strategy, len(target.train), report)])
    return out


def _strategies(cfg: dict) -> list[str]:
    return list(STRATEGIES) if cfg["strategy"] == "all" else [cfg["strategy"]]


def cmd_train(cfg: dict, run: Path, workers: int) -> dict:
    out = {}
    for strategy in _strategies(cfg):
        sub = run / strategy if cfg["strategy"] == "all" else run
        sub.mkdir(exist_ok=True)
        out[strategy] = _train_one(cfg, sub, strategy)
    return out


def cmd_ensemble(cfg: dict, run: Path, workers: int) -> dict:
    source, target = load_domains(cfg)
    settings = settings_from_config(cfg)
    e = cfg["ensemble"]
    strategies = _strategies(cfg)
    base = None
    if any(s != "from_scratch" for s in strategies):
        base = pretrain_base(source, target, settings, e["base_seed"])
    rows, out = [], {}
    for strategy in strategies:
        res = run_seed_ensemble(strategy, source, target, settings, e["n_runs"], e["base_seed"],
                                base=None if strategy == "from_scratch" else base,
                                workers=workers)
        rows.append((strategy, len(target.train), res.aggregate))
        out[strategy] = {"aggregate": res.aggregate.as_dict(),
                         "runs": {r.seed: r.report.as_dict() for r in res.runs},
                         "failures": res.failures}
    write_json(run / "metrics.json", out)
    write_summary(run / "summary.csv", rows)
    return out


def _load_model(model_dir: Path):
    path = model_dir / "model.json"
    if not path.exists():
        raise ConfigError(f"--model: {path} does not exist")
    return model_from_dict(json.loads(path.read_text()))


def cmd_evaluate(cfg: dict, run: Path, workers: int, model_dir: Path | None = None) -> dict:
    if model_dir is None:
        raise ConfigError("--model: evaluate needs the run directory of a trained model")
    model = _load_model(model_dir)
    _, target = load_domains(cfg)
    report = evaluate(model, target.test)
    out = {"strategy": model.strategy, "model": str(model_dir), "metrics": report.as_dict()}
    write_json(run / "metrics.json", out)
    write_summary(run / "summary.csv", [(model.strategy, len(target.train), report)])
    return out


def cmd_calibrate(cfg: dict, run: Path, workers: int, model_dir: Path | None = None) -> dict:
    source, target = load_domains(cfg)
    if model_dir is not None:
        model = _load_model(model_dir)
    else:
        model = train_strategy("staged_bdann", source, target, settings_from_config(cfg),
                               cfg["seed"])
        write_history(run, model.history)
    if not model.is_bayesian:
        raise ConfigError("strategy: calibration needs a Bayesian (staged_bdann) model")
    areas = write_uncertainty(run, model, target)
    write_json(run / "metrics.json", {"miscalibration_area": areas})
    return areas


def cmd_hpo(cfg: dict, run: Path, workers: int) -> dict:
    source, target = load_domains(cfg)
    settings = settings_from_config(cfg)
    h = cfg["hpo"]
    strategy = "staged_bdann" if cfg["strategy"] == "all" else cfg["strategy"]
    arch_space, train_space = hpo.architecture_space(), hpo.training_space()
    res = hpo.staged_search(arch_space, train_space,
                            hpo.validation_mse_objective(source, target, settings, strategy),
                            (h["phase1_budget"], h["phase2_budget"]), h["warm_random"],
                            cfg["seed"], workers)
    write_json(run / "search_space.json", {"architecture": arch_space.to_json(),
                                           "training": train_space.to_json()})
    write_json(run / "hpo.json", res.to_json())
    best = {"architecture": res.architecture, "training": res.training,
            "phase1_best_mse": res.phase1.best.objective,
            "phase2_best_mse": res.phase2.best.objective}
    write_json(run / "metrics.json", best)
    return best


def cmd_hybrid(cfg: dict, run: Path, workers: int) -> dict:
    hy = cfg["hybrid"]
    if cfg["dataset"]["kind"] == "synthetic":
        source, target, base = synthetic_hybrid_task(cfg["seed"], cfg["dataset"]["ablation"],
                                                     hy["bias"])
    else:
        source, target = load_domains(cfg, hy["base_tag"])
        base = BaseModel.from_column(hy["base_tag"])
    settings = settings_from_config(cfg)
    e = cfg["ensemble"]
    pretrained = None
    if any(s != "from_scratch" for s in hy["strategies"]):
        pretrained = pretrain_corrector_base(source, target, base, settings, e["base_seed"])
    rows, out = [], {}
    out["base_model"] = error_metrics(target.test.y, base.predict(target.test)).as_dict()
    for strategy in hy["strategies"]:
        res = run_corrector_ensemble(strategy, target, base, settings, e["n_runs"], e["base_seed"],
                                     source, pretrained)
        rows.append((f"hybrid_{strategy}", len(target.train), res.aggregate))
        out[strategy] = {"aggregate": res.aggregate.as_dict(),
                         "runs": dict(zip(res.seeds, (r.as_dict() for r in res.reports))),
                         "failures": res.failures}
        write_predictions_csv(run / f"predictions_{strategy}.csv", res.first)
    write_json(run / "metrics.json", out)
    write_summary(run / "summary.csv", rows)
    return out


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "ensemble": cmd_ensemble,
            "evaluate": cmd_evaluate, "calibrate": cmd_calibrate, "hpo": cmd_hpo,
            "hybrid": cmd_hybrid}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdann", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="run directory (default: $%s/<auto name>)" % ENV_OUT)
        sp.add_argument("--workers", type=int, help="parallel workers (default: $%s or 1)"
                        % ENV_WORKERS)
        sp.add_argument("--ablation", type=int, help="target training set size")
        sp.add_argument("--strategy", choices=STRATEGIES + ("all",))
        sp.add_argument("--n-runs", type=int, help="ensemble size")
        if name in ("evaluate", "calibrate"):
            sp.add_argument("--model", help="run directory of a trained model")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.ablation is not None:
        overrides["dataset.ablation"] = args.ablation
    if args.strategy is not None:
        overrides["strategy"] = args.strategy
    if args.n_runs is not None:
        overrides["ensemble.n_runs"] = args.n_runs
    try:
        cfg = load_config(args.config, overrides)
        workers = args.workers
        if workers is None:
            env = os.environ.get(ENV_WORKERS, "1")
            if not env.isdigit():
                raise ConfigError(f"{ENV_WORKERS}: must be a positive integer, got {env!r}")
            workers = int(env)
        if workers < 1:
            raise ConfigError("workers: must be at least 1")
        model_dir = Path(args.model) if getattr(args, "model", None) else None
        run = prepare_run_dir(args.command, cfg, args.out)
        handler = HANDLERS[args.command]
        if args.command in ("evaluate", "calibrate"):
            result = handler(cfg, run, workers, model_dir)
        else:
            result = handler(cfg, run, workers)
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # every other failure is a failed run
        log.debug("run failed", exc_info=True)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("result: %s", json.dumps(result, sort_keys=True, default=str))
    print(run)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
