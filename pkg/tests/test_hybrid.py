import json

import numpy as np
import pytest

from bdann.hybrid import (
    BaseModel,
    ConfigurationError,
    HybridModel,
    SchemaError,
    TabularSchema,
    compose,
    hybrid_predict,
    ingest_csv,
    residual_targets,
    split_sizes,
    train_corrector,
    write_predictions_csv,
    write_tabular_csv,
)
from bdann.metrics import error_metrics
from bdann.nn import OptimizerConfig
from bdann.pipeline import Architecture, PipelineSettings, StageConfig
from bdann.synthetic import DataSplit, DomainData, ZScoreScaler

HEADER = "D,L,P,G,dh_sub,q_cr"
UNITS = {"D": "mm", "L": "m", "P": "MPa", "G": "kg/m2/s", "dh_sub": "kJ/kg", "q_cr": "kW/m2"}


def _write(tmp_path, rows, header=HEADER, units=UNITS, name="chf.csv"):
    p = tmp_path / name
    p.write_text("\n".join([header] + rows) + "\n")
    (tmp_path / (name + ".json")).write_text(json.dumps({"units": units}))
    return p


def _rows(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        d, l, p, g = rng.uniform(2, 15), rng.uniform(0.1, 3), rng.uniform(0.1, 20), rng.uniform(50, 8000)
        dh = rng.uniform(-50, 1500)
        out.append(f"{d},{l},{p},{g},{dh},{rng.uniform(100, 9000)}")
    return out


class _ConstantCorrector:
    """Stands in for a trained model with a fixed residual prediction."""

    is_bayesian = False

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def predict(self, X):
        return self.values


def _identity_scaler():
    return ZScoreScaler(np.zeros(1), np.ones(1))


class TestResiduals:
    def test_arithmetic(self):
        split = DataSplit(np.ones((1, 5)), [120.0], "target")
        res, bad = residual_targets(split, BaseModel("b", lambda X: np.full(len(X), 100.0)))
        assert res.y[0] == 20.0 and bad.size == 0
        assert res.base[0] == 100.0

    def test_perfect_base(self):
        X = np.random.default_rng(0).uniform(1, 2, size=(20, 5))
        y = X.sum(axis=1)
        res, _ = residual_targets(DataSplit(X, y, "target"), BaseModel("sum", lambda X: X.sum(axis=1)))
        assert np.all(res.y == 0.0)

    def test_failing_rows_excluded(self):
        def fn(X):
            return np.where(X[:, 0] > 1.5, np.nan, 1.0)
        X = np.array([[1.0] * 5, [2.0] * 5, [1.2] * 5])
        res, bad = residual_targets(DataSplit(X, [2.0, 3.0, 4.0], "target"), BaseModel("b", fn))
        assert bad.tolist() == [1] and len(res) == 2

    def test_raising_base_falls_back_per_row(self):
        def fn(X):
            if np.any(X[:, 0] > 1.5):
                raise ValueError("out of range")
            return np.ones(len(X))
        X = np.array([[1.0] * 5, [2.0] * 5])
        res, bad = residual_targets(DataSplit(X, [2.0, 3.0], "target"), BaseModel("b", fn))
        assert bad.tolist() == [1] and res.y.tolist() == [1.0]

    def test_column_base(self):
        split = DataSplit(np.ones((2, 5)), [5.0, 6.0], "target", base=[4.0, 4.5])
        res, _ = residual_targets(split, BaseModel.from_column("corr"))
        assert res.y.tolist() == [1.0, 1.5]
        with pytest.raises(ConfigurationError):
            residual_targets(DataSplit(np.ones((1, 5)), [1.0], "target"), BaseModel.from_column("x"))


class TestComposition:
    def _split(self, n=200, seed=0):
        rng = np.random.default_rng(seed)
        y = rng.uniform(100, 9000, n)
        base = y * rng.uniform(0.55, 1.9, n)
        return DataSplit(rng.uniform(1, 2, (n, 5)), y, "target", base=base)

    def test_zero_corrector_is_base(self):
        split = self._split()
        model = HybridModel(_ConstantCorrector(np.zeros(len(split))), _identity_scaler(), "corr")
        pred = hybrid_predict(split, BaseModel.from_column("corr"), model)
        assert np.array_equal(pred.mean, split.base)

    def test_perfect_corrector_recomposes_truth_bitwise(self):
        split = self._split()
        res, _ = residual_targets(split, BaseModel.from_column("corr"))
        model = HybridModel(_ConstantCorrector(res.y), _identity_scaler(), "corr")
        pred = hybrid_predict(split, BaseModel.from_column("corr"), model)
        assert np.array_equal(pred.mean, split.y)
        assert np.array_equal(compose(split.base, res.y), split.y)

    def test_tag_mismatch(self):
        split = self._split(5)
        model = HybridModel(_ConstantCorrector(np.zeros(5)), _identity_scaler(), "biasi")
        with pytest.raises(ConfigurationError):
            hybrid_predict(split, BaseModel.from_column("bowring"), model)


ARCH = Architecture(extractor_hidden=(16, 16), head_hidden=(8,), activation="tanh")
FAST = StageConfig(max_epochs=150, patience=15, batch_size=16,
                   optimizer=OptimizerConfig(initial_learning_rate=3e-3))


def _biased_task(n_train=300, seed=0):
    rng = np.random.default_rng(seed)
    w = np.array([0.8, -0.5, 0.3, 0.6, 0.2])

    def truth(X):
        return 10.0 + X @ w + 0.5 * np.sin(2 * X[:, 0])

    parts = []
    for size, name in ((n_train, "train"), (60, "val"), (100, "test")):
        X = rng.uniform(1, 3, size=(size, 5))
        parts.append(DataSplit(X, truth(X), "target", name))
    return DomainData(*parts), BaseModel("scaled", lambda X: 0.9 * truth(X))


def test_recovers_constructed_bias():
    target, base = _biased_task()
    settings = PipelineSettings(arch=ARCH, scratch=FAST)
    model = train_corrector("from_scratch", target, base, settings, 0)
    pred = hybrid_predict(target.test, base, model)
    assert error_metrics(target.test.y, pred.mean).mu_error_pct < 2.0


def test_bayesian_corrector_uncertainty_carries_over(tmp_path):
    target, base = _biased_task(120, 1)
    settings = PipelineSettings(
        arch=ARCH, stage1=FAST, stage3=StageConfig(max_epochs=20, patience=5, batch_size=16,
                                                   optimizer=OptimizerConfig(3e-3)),
        stage2=StageConfig(max_epochs=3, patience=2, batch_size=16,
                           optimizer=OptimizerConfig(5e-5)), mc_samples=20, val_mc_samples=2)
    source, _ = _biased_task(400, 2)
    model = train_corrector("staged_bdann", target, base, settings, 0, source=source)
    pred = hybrid_predict(target.test, base, model)
    r = model.residual_summary(target.test.X)
    np.testing.assert_array_equal(pred.summary.total_std, r.total_std)
    np.testing.assert_allclose(pred.summary.mean, pred.mean, rtol=0, atol=1e-12)
    write_predictions_csv(tmp_path / "p.csv", pred)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "mean,base,residual,epistemic_std,aleatoric_std,total_std"
    assert len(lines) == len(target.test) + 1


class TestIngest:
    def test_split_sizes(self):
        assert split_sizes(400) == (320, 20, 60)

    def test_loads_and_splits(self, tmp_path):
        res = ingest_csv(_write(tmp_path, _rows(400)), seed=3)
        assert (len(res.train), len(res.val), len(res.test)) == (320, 20, 60)
        rows = [set(map(tuple, s.X)) for s in (res.train, res.val, res.test)]
        assert not (rows[0] & rows[1] or rows[0] & rows[2] or rows[1] & rows[2])

    def test_deterministic(self, tmp_path):
        p = _write(tmp_path, _rows(50))
        a, b = ingest_csv(p, seed=1), ingest_csv(p, seed=1)
        assert np.array_equal(a.test.X, b.test.X)

    def test_malformed_row_rejected_with_line(self, tmp_path):
        rows = _rows(10)
        rows[3] = "1.0,2.0,abc,4.0,5.0,6.0"
        rows[6] = "1.0,2.0,3.0,4.0,5.0,nan"
        rows[8] = "-1.0,2.0,3.0,4.0,5.0,6.0"
        res = ingest_csv(_write(tmp_path, rows))
        assert [line for line, _ in res.rejected] == [5, 8, 10]
        assert len(res.train) + len(res.val) + len(res.test) == 7

    def test_negative_subcooling_allowed(self, tmp_path):
        res = ingest_csv(_write(tmp_path, ["5,1,7,2000,-30,1500"] * 20))
        assert not res.rejected

    def test_missing_column(self, tmp_path):
        with pytest.raises(SchemaError, match="dh_sub"):
            ingest_csv(_write(tmp_path, ["1,2,3,4,5"], header="D,L,P,G,q_cr"))

    def test_unit_mismatch(self, tmp_path):
        units = dict(UNITS, P="bar")
        with pytest.raises(SchemaError, match="'P'"):
            ingest_csv(_write(tmp_path, _rows(5), units=units))

    def test_missing_manifest(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text(HEADER + "\n" + _rows(1)[0] + "\n")
        with pytest.raises(SchemaError):
            ingest_csv(p)

    def test_round_trip(self, tmp_path):
        res = ingest_csv(_write(tmp_path, _rows(40)))
        split = DataSplit(res.train.X, res.train.y, "target", base=res.train.y * 0.9)
        write_tabular_csv(tmp_path / "out.csv", split)
        back = ingest_csv(tmp_path / "out.csv", fractions=(1.0, 0.0, 0.0))
        order = np.lexsort(split.X.T)
        border = np.lexsort(back.train.X.T)
        assert np.array_equal(back.train.X[border], split.X[order])
        assert np.array_equal(back.train.base[border], split.base[order])

    def test_schema_units(self):
        assert TabularSchema().units()["q_base"] == "kW/m2"
