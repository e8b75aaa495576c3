"""Residual-correction hybrid models: a low-fidelity base prediction plus a
learned correction, with CSV ingestion for CHF-style tabular data."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .bayes import PredictiveSummary
from .metrics import MetricsReport, aggregate_reports, error_metrics
from .nn import NumericError
from .pipeline import (
    PipelineSettings,
    TrainedModel,
    TrainingDivergedError,
    pretrain_base,
    train_strategy,
)
from .synthetic import DataSplit, DomainData, ZScoreScaler

log = logging.getLogger(__name__)


class SchemaError(ValueError):
    """A CSV file or its unit manifest does not match the declared schema."""


class ConfigurationError(ValueError):
    """A corrector was paired with a base model it was not trained against."""


@dataclass(frozen=True)
class Column:
    name: str
    unit: str
    allow_nonpositive: bool = False


CHF_INPUTS = (
    Column("D", "mm"),
    Column("L", "m"),
    Column("P", "MPa"),
    Column("G", "kg/m2/s"),
    Column("dh_sub", "kJ/kg", allow_nonpositive=True),
)
CHF_TARGET = Column("q_cr", "kW/m2")


@dataclass(frozen=True)
class TabularSchema:
    """Input columns, the target column and an optional base-prediction column."""

    inputs: tuple[Column, ...] = CHF_INPUTS
    target: Column = CHF_TARGET
    base_column: str | None = "q_base"

    @property
    def input_names(self) -> list[str]:
        return [c.name for c in self.inputs]

    def units(self) -> dict[str, str]:
        units = {c.name: c.unit for c in self.inputs}
        units[self.target.name] = self.target.unit
        if self.base_column:
            units[self.base_column] = self.target.unit
        return units

    def check_units(self, declared: dict[str, str]) -> None:
        for name, unit in self.units().items():
            if name not in declared:
                if name == self.base_column:
                    continue
                raise SchemaError(f"unit manifest does not declare column {name!r}")
            if declared[name] != unit:
                raise SchemaError(f"column {name!r}: expected unit {unit!r}, "
                                  f"manifest says {declared[name]!r}")


@dataclass(frozen=True)
class BaseModel:
    """Low-fidelity predictor identified by ``tag``.

    ``fn`` maps an (N, d) feature array to N predictions. Without ``fn`` the
    predictions are read from each split's base column.
    """

    tag: str
    fn: Callable[[np.ndarray], np.ndarray] | None = None

    @classmethod
    def from_column(cls, tag: str) -> "BaseModel":
        return cls(tag, None)

    def predict(self, split: DataSplit) -> np.ndarray:
        if self.fn is None:
            if split.base is None:
                raise ConfigurationError(f"base model {self.tag!r} reads a data column "
                                         "but the split has none")
            return split.base
        return self._evaluate(split._X)

    def _evaluate(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        try:
            out = np.asarray(self.fn(X), dtype=np.float64).ravel()
            if out.shape == (len(X),):
                return out
        except (ValueError, ArithmeticError):
            pass
        # fall back to one row at a time so a single bad row does not sink the batch
        out = np.empty(len(X))
        for i, row in enumerate(X):
            try:
                out[i] = float(np.asarray(self.fn(row[None, :])).ravel()[0])
            except (ValueError, ArithmeticError):
                out[i] = np.nan
        return out


def residual_targets(split: DataSplit, base: BaseModel) -> tuple[DataSplit, np.ndarray]:
    """Replace targets by ``y - base(x)`` and attach the base predictions.

    Rows where the base model fails (raises or returns a non-finite value)
    are dropped and their indices returned.
    """
    pred = base.predict(split)
    bad = np.flatnonzero(~np.isfinite(pred))
    for i in bad:
        log.warning("base model %s failed on row %d; row excluded", base.tag, i)
    keep = np.flatnonzero(np.isfinite(pred))
    y = split._y[keep]
    out = DataSplit(split._X[keep], y - pred[keep], split.domain, split.partition, split.seed,
                    base=pred[keep])
    return out, bad


@dataclass
class HybridModel:
    """A residual corrector bound to the base model it was trained against."""

    corrector: TrainedModel
    residual_scaler: ZScoreScaler
    base_tag: str

    def residual_summary(self, X) -> PredictiveSummary | None:
        if not self.corrector.is_bayesian:
            return None
        s = self.corrector.predict_summary(X)
        k = float(self.residual_scaler.std[0])
        mean = self.residual_scaler.invert(s.mean[:, None])[:, 0]
        return PredictiveSummary(mean, s.epistemic_std * k, s.aleatoric_std * k,
                                 s.total_std * k, s.n_samples)

    def predict_residual(self, X) -> np.ndarray:
        if self.corrector.is_bayesian:
            return self.residual_summary(X).mean
        z = self.corrector.predict(X)
        return self.residual_scaler.invert(z[:, None])[:, 0]


@dataclass
class HybridPrediction:
    mean: np.ndarray
    base: np.ndarray
    residual: np.ndarray
    summary: PredictiveSummary | None = None


def hybrid_predict(split: DataSplit, base: BaseModel, model: HybridModel) -> HybridPrediction:
    """Base prediction plus the predicted residual.

    For a Bayesian corrector the residual uncertainty carries over unchanged
    (the base model is treated as exact). The sum recomposes the truth
    exactly when the residual is exact and base and truth are within a
    factor of two of each other, since ``y - b`` is then representable.
    """
    if model.base_tag != base.tag:
        raise ConfigurationError(f"corrector was trained on residuals of {model.base_tag!r}, "
                                 f"not {base.tag!r}")
    b = base.predict(split)
    summary = model.residual_summary(split._X)
    r = summary.mean if summary is not None else model.predict_residual(split._X)
    mean = b + r
    return HybridPrediction(mean, b, r, summary.shifted(b) if summary is not None else None)


def compose(base_pred, residual) -> np.ndarray:
    return np.asarray(base_pred, dtype=np.float64) + np.asarray(residual, dtype=np.float64)


def _residual_domain(data: DomainData, base: BaseModel) -> DomainData:
    parts = {}
    for name, split in data.splits().items():
        parts[name], bad = residual_targets(split, base)
        if bad.size:
            log.warning("%s/%s: %d row(s) dropped by the base model", split.domain, name, bad.size)
    return DomainData(**parts)


def _standardized(data: DomainData, scaler: ZScoreScaler) -> DomainData:
    def z(s: DataSplit) -> DataSplit:
        return s.with_data(y=scaler.apply(s._y[:, None])[:, 0])
    return DomainData(z(data.train), z(data.val), z(data.test))


def fit_residual_scaler(target_train: DataSplit, policy: str,
                        source_train: DataSplit | None = None) -> ZScoreScaler:
    r = target_train._y
    if policy == "joint":
        if source_train is None:
            raise ValueError("the joint policy needs source residuals")
        r = np.concatenate([source_train._y, r])
    return ZScoreScaler.fit(r[:, None], policy)


def train_corrector(strategy: str, target: DomainData, base: BaseModel,
                    settings: PipelineSettings, seed: int, source: DomainData | None = None,
                    pretrained: TrainedModel | None = None) -> HybridModel:
    """Train a residual corrector with one of the three strategies.

    Residuals are z-scored like the features: target-only for a
    from-scratch corrector, jointly with source residuals for transfer.
    ``pretrained`` is a source model fitted to standardized source residuals
    (see :func:`pretrain_corrector_base`).
    """
    t_res = _residual_domain(target, base)
    if strategy == "from_scratch":
        scaler = fit_residual_scaler(t_res.train, "target_only")
        s_std = None
    else:
        if source is None:
            raise ValueError(f"strategy {strategy!r} needs source data")
        s_res = _residual_domain(source, base)
        scaler = fit_residual_scaler(t_res.train, "joint", s_res.train)
        s_std = _standardized(s_res, scaler)
    model = train_strategy(strategy, s_std, _standardized(t_res, scaler), settings, seed,
                           pretrained)
    return HybridModel(model, scaler, base.tag)


def pretrain_corrector_base(source: DomainData, target: DomainData, base: BaseModel,
                            settings: PipelineSettings, seed: int) -> TrainedModel:
    """Shared source-residual model for the transfer-learning correctors."""
    s_res, t_res = _residual_domain(source, base), _residual_domain(target, base)
    scaler = fit_residual_scaler(t_res.train, "joint", s_res.train)
    return pretrain_base(_standardized(s_res, scaler), _standardized(t_res, scaler),
                         settings, seed)


@dataclass
class CorrectorEnsemble:
    strategy: str
    seeds: list[int]
    reports: list[MetricsReport]
    aggregate: MetricsReport
    failures: dict[int, str] = field(default_factory=dict)
    first: HybridPrediction | None = None


def run_corrector_ensemble(strategy: str, target: DomainData, base: BaseModel,
                           settings: PipelineSettings, n_runs: int = 20, base_seed: int = 0,
                           source: DomainData | None = None,
                           pretrained: TrainedModel | None = None) -> CorrectorEnsemble:
    """Seed ensemble of hybrid models scored on the target test split in output units.

    Transfer strategies share one source-residual model, trained with
    ``base_seed`` unless supplied.
    """
    if n_runs < 2:
        raise ValueError("an ensemble needs at least two runs")
    if strategy != "from_scratch" and pretrained is None:
        if source is None:
            raise ValueError(f"strategy {strategy!r} needs source data")
        pretrained = pretrain_corrector_base(source, target, base, settings, base_seed)
    seeds, reports, failures, first = [], [], {}, None
    for seed in range(base_seed, base_seed + n_runs):
        try:
            model = train_corrector(strategy, target, base, settings, seed, source, pretrained)
        except (TrainingDivergedError, NumericError, FloatingPointError) as exc:
            failures[seed] = str(exc)
            log.warning("corrector seed %d failed and was excluded: %s", seed, exc)
            continue
        pred = hybrid_predict(target.test, base, model)
        first = first or pred
        seeds.append(seed)
        reports.append(error_metrics(target.test.y, pred.mean))
    if len(reports) < 2:
        raise RuntimeError(f"only {len(reports)} corrector run(s) survived; cannot aggregate")
    return CorrectorEnsemble(strategy, seeds, reports, aggregate_reports(reports), failures, first)


# ---------------------------------------------------------------- CSV ingestion

@dataclass
class IngestResult:
    train: DataSplit
    val: DataSplit
    test: DataSplit
    rejected: list[tuple[int, str]] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def domain_data(self) -> DomainData:
        return DomainData(self.train, self.val, self.test)


def split_sizes(n: int, fractions=(0.8, 0.05, 0.15)) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


def manifest_path(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.name + ".json")


def ingest_csv(path: str | Path, schema: TabularSchema = TabularSchema(), seed: int = 0,
               domain: str = "target", fractions=(0.8, 0.05, 0.15),
               units_manifest: str | Path | None = None) -> IngestResult:
    """Load, validate and split a tabular dataset.

    Units come from a sidecar JSON (``<file>.json`` unless given) with a
    ``units`` mapping. Malformed rows are rejected with their 1-based line
    number; missing columns and unit mismatches reject the whole file.
    """
    path = Path(path)
    mpath = Path(units_manifest) if units_manifest else manifest_path(path)
    if not mpath.exists():
        raise SchemaError(f"{path}: unit manifest {mpath} not found")
    manifest = json.loads(mpath.read_text())
    schema.check_units(manifest.get("units", {}))

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        wanted = schema.input_names + [schema.target.name]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise SchemaError(f"{path}, line 1: missing column(s) {missing}")
        cols = [header.index(c) for c in wanted]
        base_idx = (header.index(schema.base_column)
                    if schema.base_column and schema.base_column in header else None)
        checks = list(schema.inputs) + [schema.target]
        rows, bases, rejected = [], [], []
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                vals = [float(rec[i]) for i in cols]
                b = float(rec[base_idx]) if base_idx is not None else None
            except (ValueError, IndexError):
                rejected.append((line, "unparseable or missing cell"))
                continue
            reason = None
            for c, v in zip(checks, vals):
                if not math.isfinite(v):
                    reason = f"non-finite value in {c.name}"
                elif v <= 0 and not c.allow_nonpositive:
                    reason = f"{c.name} must be positive"
                if reason:
                    break
            if reason is None and b is not None and not math.isfinite(b):
                reason = f"non-finite value in {schema.base_column}"
            if reason:
                rejected.append((line, reason))
                continue
            rows.append(vals)
            bases.append(b)
    for line, reason in rejected:
        log.warning("%s, line %d rejected: %s", path, line, reason)
    if not rows:
        raise SchemaError(f"{path}: no valid rows")

    data = np.array(rows)
    base = np.array(bases, dtype=np.float64) if base_idx is not None else None
    n_tr, n_va, _ = split_sizes(len(data), fractions)
    perm = np.random.default_rng(seed).permutation(len(data))
    parts = {}
    for name, idx in (("train", perm[:n_tr]), ("val", perm[n_tr:n_tr + n_va]),
                      ("test", perm[n_tr + n_va:])):
        idx = np.sort(idx)
        parts[name] = DataSplit(data[idx, :-1], data[idx, -1], domain, name, seed,
                                None if base is None else base[idx])
    return IngestResult(parts["train"], parts["val"], parts["test"], rejected, manifest)


def write_tabular_csv(path: str | Path, split: DataSplit,
                      schema: TabularSchema = TabularSchema()) -> None:
    """Write rows in the schema's column order plus the sidecar unit manifest."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = schema.input_names + [schema.target.name]
        with_base = split.base is not None and schema.base_column
        if with_base:
            header.append(schema.base_column)
        w.writerow(header)
        for i, (row, y) in enumerate(zip(split._X, split._y)):
            rec = [repr(float(v)) for v in row] + [repr(float(y))]
            if with_base:
                rec.append(repr(float(split.base[i])))
            w.writerow(rec)
    manifest_path(path).write_text(json.dumps({"units": schema.units()}, indent=2) + "\n")


def write_predictions_csv(path: str | Path, pred: HybridPrediction) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mean", "base", "residual", "epistemic_std", "aleatoric_std", "total_std"])
        s = pred.summary
        zeros = np.zeros_like(pred.mean)
        ep, al, tot = ((s.epistemic_std, s.aleatoric_std, s.total_std) if s is not None
                       else (zeros, zeros, zeros))
        for row in zip(pred.mean, pred.base, pred.residual, ep, al, tot):
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------- synthetic task

def smooth_base_model(output_scaler, params=None, bias: float = 0.9,
                      tag: str = "smooth_trend") -> BaseModel:
    """A low-fidelity model keeping only the non-oscillatory terms of the
    source response, scaled by ``bias`` and mapped to output units."""
    from .synthetic import SOURCE_PARAMS

    p = params or SOURCE_PARAMS
    a = p.a

    def fn(X):
        X = np.asarray(X, dtype=np.float64)
        x2, x3, x4, x5 = X[:, 1], X[:, 2], X[:, 3], X[:, 4]
        trend = p.kappa * (a[0] + a[3] * np.log(1.0 + x2 ** 2) + a[4] * x3
                           + a[5] * x4 ** 2 + a[6] * x5)
        return bias * output_scaler.apply(trend)

    return BaseModel(tag, fn)


def synthetic_hybrid_task(seed: int = 0, ablation_size: int = 250, bias: float = 0.9):
    """Source/target benchmark data plus a shared biased base model."""
    from .synthetic import make_benchmark

    bench = make_benchmark(seed, ablation_size)
    return bench.source, bench.target, smooth_base_model(bench.output_scaler, bias=bias)
