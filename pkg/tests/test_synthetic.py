import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdann.synthetic import (
    SOURCE_PARAMS,
    TARGET_PARAMS,
    DomainParams,
    QuantileSigmoidScaler,
    ZeroVarianceError,
    base_function,
    fit_zscore,
    generate_domain,
    make_benchmark,
    read_split_csv,
    target_warp,
    write_benchmark,
)

from .oracles import base_function_straight, warp_straight

# frozen from tests/oracles.py before the generator existed
GOLDEN_SOURCE_AT_2 = 9.126835453638275
GOLDEN_WARP_AT_1 = [2.6562698225006316, 1.028294880667081, 1.2152068272698568, 1.0, 1.0]


class TestGenerator:
    def test_golden_values(self):
        assert base_function([2.0] * 5, SOURCE_PARAMS) == pytest.approx(GOLDEN_SOURCE_AT_2, abs=1e-12)
        np.testing.assert_allclose(target_warp([1.0] * 5), GOLDEN_WARP_AT_1, rtol=0, atol=1e-12)

    def test_degenerate_coefficients(self):
        zero = DomainParams((0.0,) * 10, (1.0,) * 6)
        assert base_function([1.3, 2, 2.5, 1, 3], zero) == 0.0
        const = DomainParams((1.0,) + (0.0,) * 9, (1.0,) * 6)
        assert base_function([1.3, 2, 2.5, 1, 3], const) == 2.0

    def test_warp_passthrough_and_zero_crossing(self):
        x = np.array([math.pi / 1.3, 2.0, 1.5, 1.7, 2.9])
        g = target_warp(x)
        assert g[0] == pytest.approx(1.5, abs=1e-15)
        assert g[3] == 1.7 and g[4] == 2.9

    def test_matches_oracle_on_random_points(self):
        X = np.random.default_rng(0).uniform(1, 3, size=(10_000, 5))
        for params in (SOURCE_PARAMS, TARGET_PARAMS):
            got = base_function(X, params)
            want = [base_function_straight(x, params.a, params.omega, params.kappa) for x in X]
            assert np.max(np.abs(got - want)) <= 1e-12
        want = np.array([warp_straight(x) for x in X])
        assert np.max(np.abs(target_warp(X) - want)) <= 1e-12

    def test_noise_free_outputs(self):
        s = generate_domain(50, "source", 1, noise_std=0.0)
        np.testing.assert_array_equal(s.y, base_function(s.X, SOURCE_PARAMS))
        t = generate_domain(50, "target", 1, noise_std=0.0)
        np.testing.assert_array_equal(t.y, base_function(t.X, TARGET_PARAMS))

    def test_target_features_are_warped(self):
        t = generate_domain(2000, "target", 3)
        lo, hi = 1.2 * -1 + 1.5, 1.2 + 1.5
        assert t.X[:, 0].min() >= lo and t.X[:, 0].max() <= hi
        assert t.X[:, 0].min() < 1.0

    def test_uniform_input_means(self):
        s = generate_domain(100_000, "source", 7)
        np.testing.assert_allclose(s.X.mean(axis=0), 2.0, atol=0.01)
        assert s.X.min() >= 1.0 and s.X.max() <= 3.0

    def test_output_range_sanity_band(self):
        s = generate_domain(7000, "source", 1)
        t = generate_domain(1000, "target", 2)
        y = np.concatenate([s.y, t.y])
        assert -14 < y.min() < -7 and 20 < y.max() < 30

    def test_seed_determinism(self):
        a, b = generate_domain(100, "target", 5), generate_domain(100, "target", 5)
        assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)

    def test_conditional_shift_present(self):
        X = np.random.default_rng(1).uniform(1, 3, size=(1000, 5))
        gap = np.abs(base_function(X, SOURCE_PARAMS) - base_function(target_warp(X), TARGET_PARAMS))
        assert gap.mean() > 0


class TestQuantileSigmoid:
    scaler = QuantileSigmoidScaler(-5.0, 20.0)

    def test_midpoint_and_quantiles(self):
        assert float(self.scaler.apply(7.5)) == pytest.approx(3.0, abs=1e-15)
        assert float(self.scaler.apply(20.0)) == pytest.approx(4.9, abs=1e-12)
        assert float(self.scaler.apply(-5.0)) == pytest.approx(1.1, abs=1e-12)

    def test_round_trip(self):
        y = np.random.default_rng(0).uniform(-30, 50, size=1000)
        assert np.max(np.abs(self.scaler.invert(self.scaler.apply(y)) - y)) < 1e-10

    def test_monotone(self):
        y = np.sort(np.random.default_rng(1).uniform(-40, 60, size=5000))
        assert np.all(np.diff(self.scaler.apply(y)) > 0)

    def test_c1_at_joins(self):
        h = 1e-6
        for q in (self.scaler.q05, self.scaler.q95):
            left = (self.scaler.apply(q) - self.scaler.apply(q - h)) / h
            right = (self.scaler.apply(q + h) - self.scaler.apply(q)) / h
            assert abs(left - right) < 1e-5
            assert abs(self.scaler.apply(q + 1e-12) - self.scaler.apply(q - 1e-12)) < 1e-10

    def test_fit_and_degenerate(self):
        s = QuantileSigmoidScaler.fit(np.arange(101.0))
        assert (s.q05, s.q95) == (5.0, 95.0)
        with pytest.raises(ValueError):
            QuantileSigmoidScaler.fit(np.ones(50))
        with pytest.raises(ValueError):
            QuantileSigmoidScaler.fit(np.arange(5.0))

    @settings(max_examples=50)
    @given(st.floats(-1e3, 1e3))
    def test_round_trip_property(self, y):
        assert float(self.scaler.invert(self.scaler.apply(y))) == pytest.approx(y, abs=1e-9)


class TestZScore:
    def test_two_points(self):
        sc = fit_zscore(np.array([[0.0], [2.0]]))
        assert sc.mean[0] == 1.0 and sc.std[0] == 1.0
        np.testing.assert_array_equal(sc.apply([[0.0], [2.0]]).ravel(), [-1.0, 1.0])

    def test_train_columns_centred(self):
        X = np.random.default_rng(0).normal(3, 2, size=(200, 5))
        np.testing.assert_allclose(fit_zscore(X).apply(X).mean(axis=0), 0.0, atol=1e-12)

    def test_zero_variance(self):
        X = np.ones((10, 2))
        X[:, 0] = np.arange(10)
        with pytest.raises(ZeroVarianceError):
            fit_zscore(X)

    def test_joint_differs_from_target_only(self):
        tgt = np.random.default_rng(0).uniform(0, 1, size=(50, 2))
        src = np.random.default_rng(1).uniform(5, 6, size=(50, 2))
        joint = fit_zscore(tgt, "joint", src)
        alone = fit_zscore(tgt, "target_only")
        assert np.all(joint.mean != alone.mean)


class TestBenchmark:
    def test_sizes(self):
        b = make_benchmark(0, 500)
        assert [len(s) for s in b.source.splits().values()] == [5000, 1000, 1000]
        assert [len(s) for s in b.target.splits().values()] == [500, 250, 250]

    def test_nested_ablations_share_eval_rows(self):
        benches = {n: make_benchmark(3, n) for n in (75, 150, 250, 500)}
        rows = {n: {tuple(r) for r in b.target.train.X} for n, b in benches.items()}
        assert rows[75] <= rows[150] <= rows[250] <= rows[500]
        for b in benches.values():
            assert np.array_equal(b.target.test.X, benches[500].target.test.X)
            assert np.array_equal(b.target.val.y, benches[500].target.val.y)

    def test_no_shared_rows(self):
        b = make_benchmark(1, 500)
        parts = [{tuple(r) for r in s.X} for s in b.target.splits().values()]
        assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])

    def test_scaled_outputs(self):
        b = make_benchmark(0, 500)
        y = np.concatenate([s.y for s in b.source.splits().values()])
        assert 0.5 < y.min() and y.max() < 5.5
        assert np.mean((y > 1) & (y < 5)) > 0.95

    def test_deterministic(self):
        a, b = make_benchmark(4, 150), make_benchmark(4, 150)
        assert np.array_equal(a.target.train.X, b.target.train.X)
        assert a.manifest == b.manifest

    def test_rejects_oversized_ablation(self):
        with pytest.raises(ValueError):
            make_benchmark(0, 501)

    def test_csv_round_trip(self, tmp_path):
        b = make_benchmark(0, 75)
        paths = write_benchmark(b, tmp_path)
        back = read_split_csv(paths["target_train"])[("target", "train")]
        assert np.array_equal(back.X, b.target.train.X) and np.array_equal(back.y, b.target.train.y)
        header = paths["source"].read_text().splitlines()[0]
        assert header == "x1,x2,x3,x4,x5,y,domain,partition"
