"""Independent reference implementations used as test oracles.

Written with plain loops on purpose; none of this imports the code under test.
"""
import itertools
import math

import numpy as np


def central_diff(f, theta, h=1e-5):
    theta = np.array(theta, dtype=np.float64)
    g = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def max_rel_error(a, b, floor=1e-6):
    """max |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def auc_pairs(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def metrics_brute(y, yhat):
    eps = [abs(a - b) / abs(a) * 100 for a, b in zip(y, yhat)]
    n = len(eps)
    mu = sum(eps) / n
    var = sum((e - mu) ** 2 for e in eps) / n
    ybar = sum(y) / n
    ss_res = sum((a - b) ** 2 for a, b in zip(y, yhat))
    ss_tot = sum((a - ybar) ** 2 for a in y)
    return {
        "mu_error_pct": mu,
        "max_error_pct": max(eps),
        "std_error_pct": math.sqrt(var),
        "rrmse_pct": math.sqrt(sum(e * e for e in eps) / n),
        "p_over_10_pct": 100.0 * sum(1 for e in eps if e > 10) / n,
        "r2": 1 - ss_res / ss_tot,
    }


def normal_ppf(p):
    from statistics import NormalDist
    return NormalDist().inv_cdf(p)


def calibration_area_brute(y, mean, std, levels):
    z = [(a - m) / s for a, m, s in zip(y, mean, std)]
    gaps = []
    for p in levels:
        q = normal_ppf(p)
        frac = sum(1 for v in z if v <= q) / len(z)
        gaps.append(abs(frac - p))
    area = 0.0
    for i in range(1, len(levels)):
        area += 0.5 * (gaps[i] + gaps[i - 1]) * (levels[i] - levels[i - 1])
    return area / (levels[-1] - levels[0])


def base_function_straight(x, a, w, kappa):
    x1, x2, x3, x4, x5 = x
    return kappa * (
        a[0] + a[1] * math.sin(w[0] * x1 + w[1] * x2) + a[2] * math.cos(w[2] * x1 * x2)
        + a[3] * math.log(1 + x2 * x2) + a[4] * x3 + a[5] * x4 * x4 + a[6] * x5
        + a[7] * math.sin(w[3] * x1 * x3) + a[8] * math.cos(w[4] * x3 * x4)
        + a[9] * math.sin(w[5] * (x1 + x5) * x3)
    )


def warp_straight(x):
    x1, x2, x3, x4, x5 = x
    return [1.2 * math.sin(1.3 * x1) + 1.5, x2 + 0.4 * math.cos(1.5 * x3),
            x3 + 0.3 * math.sin(0.8 * x1 * x2), x4, x5]


def cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def hull_2d(points):
    """Andrew's monotone chain; counter-clockwise hull vertices."""
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return pts
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def inside_hull_2d(hull, q, tol=1e-12):
    for i in range(len(hull)):
        if cross(hull[i], hull[(i + 1) % len(hull)], q) < -tol:
            return False
    return True


def all_label_vectors(n):
    return [list(v) for v in itertools.product([0, 1], repeat=n) if 0 < sum(v) < n]


def _act(name, v):
    if name == "relu":
        return max(v, 0.0)
    if name == "tanh":
        return math.tanh(v)
    if name == "sigmoid":
        return 1.0 / (1.0 + math.exp(-v))
    return v


def _softplus(v):
    return math.log1p(math.exp(-abs(v))) + max(v, 0.0)


def elbo_straight(X, y, means, rhos, prior_means, prior_stds, eps, activations, n_total, beta):
    """Negative ELBO with the weight draw ``mean + softplus(rho) * eps`` given explicitly.

    Parameter lists alternate W, b per layer; W has shape (n_in, n_out).
    """
    draws = []
    for m, r, e in zip(means, rhos, eps):
        flat = [mv + _softplus(rv) * ev for mv, rv, ev in
                zip(np.ravel(m), np.ravel(r), np.ravel(e))]
        draws.append(np.array(flat).reshape(np.shape(m)))
    nll = 0.0
    for row, target in zip(X, y):
        h = list(row)
        for layer, act in enumerate(activations):
            W, b = draws[2 * layer], draws[2 * layer + 1]
            h = [_act(act, b[j] + sum(h[i] * W[i][j] for i in range(len(h))))
                 for j in range(len(b))]
        var = _softplus(h[1]) + 1e-6
        nll += 0.5 * math.log(2 * math.pi * var) + (target - h[0]) ** 2 / (2 * var)
    nll /= len(X)
    kl = 0.0
    for m, r, pm, ps in zip(means, rhos, prior_means, prior_stds):
        for mv, rv, pmv, psv in zip(np.ravel(m), np.ravel(r), np.ravel(pm), np.ravel(ps)):
            s = _softplus(rv)
            kl += math.log(psv / s) + (s * s + (mv - pmv) ** 2) / (2 * psv * psv) - 0.5
    return nll + beta / n_total * kl
