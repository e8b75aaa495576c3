"""Synthetic source/target regression benchmark with a controlled conditional shift."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

INPUT_LOW, INPUT_HIGH = 1.0, 3.0
N_FEATURES = 5
ABLATION_SIZES = (75, 150, 250, 500)


@dataclass(frozen=True)
class DomainParams:
    a: tuple[float, ...]
    omega: tuple[float, ...]
    kappa: float = 2.0
    noise_std: float = 0.05

    def __post_init__(self):
        if len(self.a) != 10 or len(self.omega) != 6:
            raise ValueError("expected 10 coefficients and 6 frequencies")


SOURCE_PARAMS = DomainParams(
    a=(2.0, 5.0, 0.8, 1.0, -0.5, 0.4, -0.2, 0.6, 0.5, 0.3),
    omega=(2.0, 1.2, 1.8, 1.5, 2.2, 1.7),
)
TARGET_PARAMS = DomainParams(
    a=(2.0, 5.0, 0.8, 1.0, -0.4, 0.35, -0.3, 0.6, 0.5, 0.3),
    omega=(2.2, 1.0, 2.0, 1.8, 2.0, 1.9),
)


def base_function(x, params: DomainParams):
    """Noise-free response; ``x`` is a 5-vector or an (N, 5) array."""
    x = np.asarray(x, dtype=np.float64)
    x1, x2, x3, x4, x5 = np.moveaxis(x, -1, 0)
    a, w = params.a, params.omega
    core = (a[0]
            + a[1] * np.sin(w[0] * x1 + w[1] * x2)
            + a[2] * np.cos(w[2] * x1 * x2)
            + a[3] * np.log(1.0 + x2 ** 2)
            + a[4] * x3
            + a[5] * x4 ** 2
            + a[6] * x5
            + a[7] * np.sin(w[3] * x1 * x3)
            + a[8] * np.cos(w[4] * x3 * x4)
            + a[9] * np.sin(w[5] * (x1 + x5) * x3))
    return params.kappa * core


def target_warp(x):
    """Deterministic input warp applied before evaluating the target response."""
    x = np.asarray(x, dtype=np.float64)
    x1, x2, x3, x4, x5 = np.moveaxis(x, -1, 0)
    return np.stack([
        1.2 * np.sin(1.3 * x1) + 1.5,
        x2 + 0.4 * np.cos(1.5 * x3),
        x3 + 0.3 * np.sin(0.8 * x1 * x2),
        x4,
        x5,
    ], axis=-1)


Partition = Literal["train", "val", "test", "all"]


class DataSplit:
    """Feature matrix, targets and provenance for one partition of one domain.

    Reads of ``X``/``y`` are counted so tests can prove a partition was never
    touched during training.
    """

    def __init__(self, X, y, domain: str, partition: str = "all", seed: int | None = None,
                 base=None):
        self._X = np.asarray(X, dtype=np.float64)
        self._y = np.asarray(y, dtype=np.float64).ravel()
        if self._X.ndim != 2 or self._X.shape[0] != self._y.shape[0]:
            raise ValueError(f"inconsistent shapes X{self._X.shape} y{self._y.shape}")
        self._base = None if base is None else np.asarray(base, dtype=np.float64).ravel()
        self.domain = domain
        self.partition = partition
        self.seed = seed
        self.reads = 0

    @property
    def X(self) -> np.ndarray:
        self.reads += 1
        return self._X

    @property
    def y(self) -> np.ndarray:
        self.reads += 1
        return self._y

    @property
    def base(self) -> np.ndarray | None:
        """Optional low-fidelity base predictions aligned with the rows."""
        return self._base

    def __len__(self) -> int:
        return self._X.shape[0]

    def subset(self, idx, partition: str | None = None) -> "DataSplit":
        idx = np.asarray(idx)
        return DataSplit(self._X[idx], self._y[idx], self.domain, partition or self.partition,
                         self.seed, None if self._base is None else self._base[idx])

    def with_data(self, X=None, y=None) -> "DataSplit":
        return DataSplit(self._X if X is None else X, self._y if y is None else y, self.domain,
                         self.partition, self.seed, self._base)


@dataclass
class DomainData:
    """train/val/test partitions of one domain."""

    train: DataSplit
    val: DataSplit
    test: DataSplit

    def splits(self) -> dict[str, DataSplit]:
        return {"train": self.train, "val": self.val, "test": self.test}


def generate_domain(n: int, domain: str, seed: int, params: DomainParams | None = None,
                    noise_std: float | None = None) -> DataSplit:
    """Draw ``n`` rows with Gaussian output noise.

    Raw inputs are uniform on [1, 3]^5. Target rows are passed through
    :func:`target_warp` and the warped coordinates are the features the
    models see, so the domains differ in input distribution as well as in
    response parameters.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if domain not in ("source", "target"):
        raise ValueError("domain must be 'source' or 'target'")
    params = params or (SOURCE_PARAMS if domain == "source" else TARGET_PARAMS)
    noise = params.noise_std if noise_std is None else noise_std
    rng = np.random.default_rng(seed)
    X = rng.uniform(INPUT_LOW, INPUT_HIGH, size=(n, N_FEATURES))
    if domain == "target":
        X = target_warp(X)
    y = base_function(X, params) + rng.normal(0.0, 1.0, size=n) * noise
    return DataSplit(X, y, domain, "all", seed)


# ---------------------------------------------------------------- scalers

@dataclass
class QuantileSigmoidScaler:
    """Smooth monotone map of outputs into roughly [1, 5].

    Inside [q05, q95]: ``1 + 4 * sigmoid(alpha * (y - c))`` with c the
    quantile midpoint and alpha chosen so q95 maps to ``5 - delta``.
    Outside: the tangent line at the nearer quantile, so the map is C1.
    """

    q05: float
    q95: float
    delta: float = 0.1
    kind: str = field(default="quantile_sigmoid", init=False)

    def __post_init__(self):
        if not self.q05 < self.q95:
            raise ValueError("degenerate spread: q05 must be below q95")
        if not 0.0 < self.delta < 2.0:
            raise ValueError("delta must lie in (0, 2)")

    @classmethod
    def fit(cls, y, delta: float = 0.1) -> "QuantileSigmoidScaler":
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.size < 20:
            raise ValueError("need at least 20 values to estimate the quantiles")
        q05, q95 = np.quantile(y, [0.05, 0.95])  # linear interpolation
        return cls(float(q05), float(q95), delta)

    @property
    def center(self) -> float:
        return 0.5 * (self.q05 + self.q95)

    @property
    def alpha(self) -> float:
        # 1 + 4 s = 5 - delta at q95  =>  s = 1 - delta / 4
        s = 1.0 - self.delta / 4.0
        return math.log(s / (1.0 - s)) / (0.5 * (self.q95 - self.q05))

    def _edge(self, q: float) -> tuple[float, float]:
        s = 1.0 / (1.0 + math.exp(-self.alpha * (q - self.center)))
        return 1.0 + 4.0 * s, 4.0 * self.alpha * s * (1.0 - s)

    def apply(self, y):
        y = np.asarray(y, dtype=np.float64)
        out = 1.0 + 4.0 / (1.0 + np.exp(-self.alpha * (y - self.center)))
        lo_v, lo_s = self._edge(self.q05)
        hi_v, hi_s = self._edge(self.q95)
        out = np.where(y < self.q05, lo_v + lo_s * (y - self.q05), out)
        out = np.where(y > self.q95, hi_v + hi_s * (y - self.q95), out)
        return out

    def invert(self, s):
        s = np.asarray(s, dtype=np.float64)
        lo_v, lo_s = self._edge(self.q05)
        hi_v, hi_s = self._edge(self.q95)
        u = np.clip((s - 1.0) / 4.0, 1e-300, 1.0 - 1e-16)
        inner = self.center + np.log(u / (1.0 - u)) / self.alpha
        out = np.where(s < lo_v, self.q05 + (s - lo_v) / lo_s, inner)
        out = np.where(s > hi_v, self.q95 + (s - hi_v) / hi_s, out)
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "q05": self.q05, "q95": self.q95, "delta": self.delta,
                "alpha": self.alpha, "center": self.center}


class ZeroVarianceError(ValueError):
    """A feature column is constant and cannot be standardized."""


@dataclass
class ZScoreScaler:
    mean: np.ndarray
    std: np.ndarray
    policy: str = "target_only"
    kind: str = field(default="zscore", init=False)

    @classmethod
    def fit(cls, X, policy: str = "target_only") -> "ZScoreScaler":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        std = X.std(axis=0)
        bad = np.flatnonzero(~(std > 0))
        if bad.size:
            raise ZeroVarianceError(f"zero-variance feature column(s) {bad.tolist()}")
        return cls(X.mean(axis=0), std, policy)

    def apply(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def invert(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"kind": self.kind, "policy": self.policy, "mean": self.mean.tolist(),
                "std": self.std.tolist()}


def fit_zscore(target_train_X, policy: str = "target_only", source_train_X=None) -> ZScoreScaler:
    """Feature scaler fit on target training rows, or jointly with source training rows."""
    if policy == "target_only":
        return ZScoreScaler.fit(target_train_X, policy)
    if policy == "joint":
        if source_train_X is None:
            raise ValueError("the joint policy needs source training rows")
        return ZScoreScaler.fit(np.vstack([source_train_X, target_train_X]), policy)
    raise ValueError(f"unknown scaling policy {policy!r}")


def fit_quantile_sigmoid(y_all, delta: float = 0.1) -> QuantileSigmoidScaler:
    return QuantileSigmoidScaler.fit(y_all, delta)


# ---------------------------------------------------------------- benchmark

@dataclass
class Benchmark:
    source: DomainData
    target: DomainData
    target_pool: DataSplit
    output_scaler: QuantileSigmoidScaler
    seed: int
    ablation_size: int
    manifest: dict


def make_benchmark(seed: int = 0, ablation_size: int = 500, n_source: int = 7000,
                   n_target: int = 1000, source_sizes=(5000, 1000, 1000),
                   target_eval_sizes=(250, 250), identical_domains: bool = False,
                   noise_std: float | None = None) -> Benchmark:
    """Generate, output-scale and partition both domains.

    The target training pool holds the first ``n_target - val - test`` rows
    (500 by default); ablation sets are its leading rows, so smaller sets
    nest inside larger ones and val/test are identical for every size.
    ``identical_domains`` draws the target from the source generator
    (no-shift control).
    """
    n_val_t, n_test_t = target_eval_sizes
    pool_size = n_target - n_val_t - n_test_t
    if not 1 <= ablation_size <= pool_size:
        raise ValueError(f"ablation_size must lie in [1, {pool_size}]")
    if sum(source_sizes) != n_source:
        raise ValueError("source partition sizes must add up to n_source")

    ss = np.random.SeedSequence(seed)
    s_src, s_tgt, s_perm = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    src = generate_domain(n_source, "source", s_src, noise_std=noise_std)
    if identical_domains:
        tgt = generate_domain(n_target, "source", s_tgt, noise_std=noise_std)
        tgt.domain = "target"
    else:
        tgt = generate_domain(n_target, "target", s_tgt, noise_std=noise_std)

    scaler = fit_quantile_sigmoid(np.concatenate([src._y, tgt._y]))
    src = src.with_data(y=scaler.apply(src._y))
    tgt = tgt.with_data(y=scaler.apply(tgt._y))

    a, b = source_sizes[0], source_sizes[0] + source_sizes[1]
    source = DomainData(src.subset(np.arange(a), "train"), src.subset(np.arange(a, b), "val"),
                        src.subset(np.arange(b, n_source), "test"))
    pool = tgt.subset(np.arange(pool_size), "train")
    # shuffle the training rows; nesting is by draw order, not by the shuffle
    perm = np.random.default_rng(s_perm).permutation(ablation_size)
    target = DomainData(
        pool.subset(perm, "train"),
        tgt.subset(np.arange(pool_size, pool_size + n_val_t), "val"),
        tgt.subset(np.arange(pool_size + n_val_t, n_target), "test"),
    )
    manifest = {
        "seed": seed,
        "ablation_size": ablation_size,
        "identical_domains": identical_domains,
        "sizes": {"source": list(source_sizes), "target": [ablation_size, n_val_t, n_test_t],
                  "target_pool": pool_size},
        "source_params": asdict(SOURCE_PARAMS),
        "target_params": asdict(SOURCE_PARAMS if identical_domains else TARGET_PARAMS),
        "noise_std": SOURCE_PARAMS.noise_std if noise_std is None else noise_std,
        "input_range": [INPUT_LOW, INPUT_HIGH],
        "output_scaler": scaler.to_dict(),
    }
    return Benchmark(source, target, pool, scaler, seed, ablation_size, manifest)


def write_split_csv(path: str | Path, splits: list[DataSplit]) -> None:
    """CSV with header x1..xk,y,domain,partition."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        k = splits[0]._X.shape[1]
        w.writerow([f"x{i + 1}" for i in range(k)] + ["y", "domain", "partition"])
        for s in splits:
            for row, y in zip(s._X, s._y):
                w.writerow([repr(float(v)) for v in row] + [repr(float(y)), s.domain, s.partition])


def read_split_csv(path: str | Path) -> dict[tuple[str, str], DataSplit]:
    """Inverse of :func:`write_split_csv`, keyed by (domain, partition)."""
    rows: dict[tuple[str, str], list] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        k = header.index("y")
        for rec in reader:
            rows.setdefault((rec[k + 1], rec[k + 2]), []).append([float(v) for v in rec[:k + 1]])
    out = {}
    for (domain, part), vals in rows.items():
        arr = np.array(vals)
        out[(domain, part)] = DataSplit(arr[:, :-1], arr[:, -1], domain, part)
    return out


def write_benchmark(bench: Benchmark, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"source": out_dir / "source.csv", "target": out_dir / "target.csv",
             "target_train": out_dir / f"target_train_{bench.ablation_size}.csv",
             "manifest": out_dir / "manifest.json"}
    write_split_csv(paths["source"], list(bench.source.splits().values()))
    pool_rest = [bench.target_pool, bench.target.val, bench.target.test]
    write_split_csv(paths["target"], pool_rest)
    write_split_csv(paths["target_train"], [bench.target.train])
    paths["manifest"].write_text(json.dumps(bench.manifest, indent=2, sort_keys=True) + "\n")
    return paths
