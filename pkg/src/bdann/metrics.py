"""Error metrics, uncertainty calibration, rStd diagnostics and
PCA / convex-hull extrapolation checks."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.special import ndtri
from scipy.stats import skew

METRIC_NAMES = ("mu_error_pct", "max_error_pct", "std_error_pct", "rrmse_pct",
                "p_over_10_pct", "r2")
CALIBRATION_LEVELS = np.linspace(0.005, 0.995, 101)


class ZeroTargetError(ValueError):
    """Relative errors are undefined for a zero ground-truth value."""


@dataclass
class MetricsReport:
    mu_error_pct: float
    max_error_pct: float
    std_error_pct: float
    rrmse_pct: float
    p_over_10_pct: float
    r2: float
    ci_half_width: dict[str, float] | None = None
    std: dict[str, float] | None = None
    n_runs: int = 1

    def as_dict(self) -> dict:
        return asdict(self)

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def relative_errors(y_true, y_pred) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("empty input")
    zero = np.flatnonzero(y_true == 0)
    if zero.size:
        raise ZeroTargetError(f"true value is zero at row {int(zero[0])}")
    return np.abs(y_true - y_pred) / np.abs(y_true) * 100.0


def error_metrics(y_true, y_pred) -> MetricsReport:
    eps = relative_errors(y_true, y_pred)
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    ss_res = np.sum((y_true - y_pred) ** 2)
    ss_tot = np.sum((y_true - y_true.mean()) ** 2)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -np.inf)
    return MetricsReport(
        mu_error_pct=float(eps.mean()),
        max_error_pct=float(eps.max()),
        std_error_pct=float(eps.std()),
        rrmse_pct=float(np.sqrt(np.mean(eps ** 2))),
        p_over_10_pct=float(np.mean(eps > 10.0) * 100.0),
        r2=float(r2),
    )


def aggregate_reports(reports: Sequence[MetricsReport], z: float = 1.96) -> MetricsReport:
    """Ensemble mean with 95% CI half-width ``z * std / sqrt(n)`` (sample std)."""
    if len(reports) < 2:
        raise ValueError("need at least two runs to aggregate")
    n = len(reports)
    # sort each metric so the result does not depend on run order
    cols = {k: np.sort([getattr(r, k) for r in reports]) for k in METRIC_NAMES}
    means = {k: float(np.mean(v)) for k, v in cols.items()}
    stds = {k: float(np.std(v, ddof=1)) for k, v in cols.items()}
    ci = {k: float(z * stds[k] / np.sqrt(n)) for k in METRIC_NAMES}
    return MetricsReport(**means, ci_half_width=ci, std=stds, n_runs=n)


# ---------------------------------------------------------------- calibration

@dataclass
class CalibrationResult:
    expected: np.ndarray
    observed: np.ndarray
    miscalibration_area: float
    source: str
    n_used: int
    n_excluded: int = 0

    def to_dict(self) -> dict:
        return {"source": self.source, "miscalibration_area": self.miscalibration_area,
                "n_used": self.n_used, "n_excluded": self.n_excluded,
                "expected": self.expected.tolist(), "observed": self.observed.tolist()}


def calibration_curve(y_true, mean, std, levels=CALIBRATION_LEVELS) -> CalibrationResult:
    """Empirical CDF of normalized residuals at standard-normal quantiles.

    For each level p the observed value is the fraction of
    ``(y - mean) / std`` at or below ``Phi^-1(p)``. The miscalibration area is
    the trapezoid integral of ``|observed - p|`` over the levels, normalized
    by the level span.
    """
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    mean = np.asarray(mean, dtype=np.float64).ravel()
    std = np.asarray(std, dtype=np.float64).ravel()
    ok = std > 0
    if not ok.any():
        raise ValueError("every row has zero predicted std")
    z = np.sort((y_true[ok] - mean[ok]) / std[ok])
    levels = np.asarray(levels, dtype=np.float64)
    observed = np.searchsorted(z, ndtri(levels), side="right") / z.size
    gap = np.abs(observed - levels)
    area = float(np.sum(0.5 * (gap[1:] + gap[:-1]) * np.diff(levels)) / (levels[-1] - levels[0]))
    return CalibrationResult(levels, observed, area, "", int(ok.sum()), int((~ok).sum()))


def calibration(y_true, summary, source: str = "total",
                levels=CALIBRATION_LEVELS) -> CalibrationResult:
    """Calibration of one uncertainty component of a :class:`PredictiveSummary`."""
    res = calibration_curve(y_true, summary.mean, summary.std(source), levels)
    res.source = source
    return res


# ---------------------------------------------------------------- rStd

@dataclass
class RStdDistribution:
    values: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray
    min: float
    max: float
    mean: float
    skewness: float
    n_excluded: int = 0

    def summary(self) -> dict:
        return {"min": self.min, "max": self.max, "mean": self.mean,
                "skewness": self.skewness, "n": int(self.values.size),
                "n_excluded": self.n_excluded}


def rstd_distribution(summary, bins: int = 30) -> RStdDistribution:
    """Relative total std in percent with histogram and moments."""
    mean = np.asarray(summary.mean, dtype=np.float64)
    ok = mean != 0
    r = summary.total_std[ok] / np.abs(mean[ok]) * 100.0
    if r.size == 0:
        raise ValueError("no rows with a nonzero predicted mean")
    counts, edges = np.histogram(r, bins=bins)
    sk = float(skew(r)) if np.ptp(r) > 0 else 0.0
    return RStdDistribution(r, edges, counts, float(r.min()), float(r.max()), float(r.mean()),
                            sk, int((~ok).sum()))


# ---------------------------------------------------------------- PCA / hull

@dataclass
class PCA2D:
    mean: np.ndarray
    components: np.ndarray  # (2, d), orthonormal rows
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    def project(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.mean) @ self.components.T


def pca_2d(train_X) -> PCA2D:
    X = np.asarray(train_X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3 or X.shape[1] < 2:
        raise ValueError("need at least 3 rows and 2 features")
    mu = X.mean(axis=0)
    cov = np.cov(X - mu, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    if np.linalg.matrix_rank(X - mu) < 2:
        raise ValueError("training data have rank < 2")
    comps = vecs[:, :2].T.copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1.0
    total = vals.clip(min=0).sum()
    return PCA2D(mu, comps, vals[:2].copy(), vals[:2] / total)


@dataclass
class HullResult:
    inside: np.ndarray
    degenerate: bool
    rank: int

    @property
    def n_outside(self) -> int:
        return int((~self.inside).sum())


def hull_membership(train_X, query_points, tol: float = 1e-9) -> HullResult:
    """Is each query a convex combination of the training rows?

    Solved as an LP feasibility problem per query:
    find w >= 0 with sum(w) = 1 and train_X.T @ w = q. Rank-deficient
    training sets are flagged; membership is then decided within their
    affine hull (queries off that hull come out as outside).
    """
    P = np.asarray(train_X, dtype=np.float64)
    Q = np.atleast_2d(np.asarray(query_points, dtype=np.float64))
    if P.ndim != 2 or Q.shape[1] != P.shape[1]:
        raise ValueError("training and query dimensions disagree")
    n, d = P.shape
    rank = int(np.linalg.matrix_rank(P - P.mean(axis=0))) if n > 1 else 0
    scale = max(1.0, float(np.abs(P).max()))
    A_eq = np.vstack([P.T / scale, np.ones((1, n))])
    inside = np.zeros(len(Q), dtype=bool)
    for i, q in enumerate(Q):
        # minimize total slack; zero slack <=> q in the hull
        A = np.hstack([A_eq, np.eye(d + 1), -np.eye(d + 1)])
        b = np.concatenate([q / scale, [1.0]])
        c = np.concatenate([np.zeros(n), np.ones(2 * (d + 1))])
        res = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method="highs")
        inside[i] = res.status == 0 and res.fun <= tol
    return HullResult(inside, rank < d, rank)


# ---------------------------------------------------------------- export

def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_calibration_csv(path: str | Path, results: Sequence[CalibrationResult]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "expected", "observed"])
        for r in results:
            for e, o in zip(r.expected, r.observed):
                w.writerow([r.source, repr(float(e)), repr(float(o))])


def write_histogram_csv(path: str | Path, dist: RStdDistribution) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(dist.bin_edges[:-1], dist.bin_edges[1:], dist.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
