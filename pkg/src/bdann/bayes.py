"""Mean-field Gaussian variational networks, the annealed ELBO and MC prediction."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import (
    NetworkSpec,
    NetworkState,
    ShapeError,
    backward_loss,
    check_finite,
    forward_batch,
    head_variance,
    init_network,
    sigmoid,
    softplus,
)


def std_to_rho(std):
    """Inverse of softplus, so that ``softplus(std_to_rho(s)) == s``."""
    std = np.asarray(std, dtype=np.float64)
    # log(expm1(s)) rewritten to stay accurate for large s
    return std + np.log(-np.expm1(-std))


@dataclass
class VariationalState:
    """Posterior ``N(mean, softplus(rho)^2)`` and prior ``N(prior_mean, prior_std^2)`` per parameter.

    All lists follow the ``NetworkState.params()`` ordering (W0, b0, W1, b1, ...).
    The last layer has two outputs: predictive mean and raw variance.
    """

    spec: NetworkSpec
    mean: list[np.ndarray]
    rho: list[np.ndarray]
    prior_mean: list[np.ndarray]
    prior_std: list[np.ndarray]

    def __post_init__(self):
        shapes = [p.shape for p in NetworkState(self.spec, self.mean[0::2], self.mean[1::2]).params()]
        for name, arrs in (("rho", self.rho), ("prior_mean", self.prior_mean),
                           ("prior_std", self.prior_std)):
            if [a.shape for a in arrs] != shapes:
                raise ShapeError(f"{name} shapes do not mirror the network")
        if any(np.any(s <= 0) for s in self.prior_std):
            raise ValueError("prior stds must be positive")
        if self.spec.n_out != 2:
            raise ShapeError("a variational regression network must emit (mean, raw variance)")

    @property
    def std(self) -> list[np.ndarray]:
        return [softplus(r) for r in self.rho]

    def params(self) -> list[np.ndarray]:
        return self.mean + self.rho

    def param_names(self) -> list[str]:
        base = NetworkState(self.spec, self.mean[0::2], self.mean[1::2]).param_names()
        return [f"mu.{n}" for n in base] + [f"rho.{n}" for n in base]

    def with_params(self, params: Sequence[np.ndarray]) -> "VariationalState":
        k = len(self.mean)
        return VariationalState(self.spec, list(params[:k]), list(params[k:]),
                                self.prior_mean, self.prior_std)

    def mean_network(self) -> NetworkState:
        return NetworkState(self.spec, self.mean[0::2], self.mean[1::2])

    def sample(self, rng: np.random.Generator) -> tuple[NetworkState, list[np.ndarray]]:
        """One reparameterized weight draw; returns the network and the noise used."""
        eps = [rng.standard_normal(m.shape) for m in self.mean]
        w = [m + softplus(r) * e for m, r, e in zip(self.mean, self.rho, eps)]
        return NetworkState(self.spec, w[0::2], w[1::2]), eps

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())


def init_from_deterministic(det: NetworkState, init_std: float = 0.1,
                            seed: int | np.random.Generator = 0,
                            prior_std: float = 1.0) -> VariationalState:
    """Build a variational network whose posterior means are the deterministic weights.

    ``det`` is the full deterministic regressor (extractor + head) with one
    output. The Bayesian copy gains a second output column for the raw
    variance; that column has no deterministic counterpart and is freshly
    initialized with a standard-normal prior. Transferred parameters get a
    prior centred on their deterministic value with std ``prior_std``.
    """
    if init_std <= 0:
        raise ValueError("init_std must be positive")
    if det.spec.n_out != 1:
        raise ShapeError("expected a single-output deterministic network")
    if not det.is_finite():
        raise ValueError("deterministic weights are not finite")
    sizes = det.spec.layer_sizes[:-1] + (2,)
    spec = NetworkSpec(sizes, det.spec.activations, det.spec.dropout_rates)
    fresh = init_network(NetworkSpec(sizes[-2:], ("identity",)), seed)

    means, prior_means, prior_stds = [], [], []
    for p in det.params()[:-2]:
        means.append(p.copy())
        prior_means.append(p.copy())
        prior_stds.append(np.full(p.shape, float(prior_std)))
    w_last, b_last = det.weights[-1], det.biases[-1]
    w = np.concatenate([w_last, fresh.weights[0][:, 1:]], axis=1)
    b = np.concatenate([b_last, fresh.biases[0][1:]])
    means += [w, b]
    # transferred column keeps its informative prior, variance column gets N(0, 1)
    prior_means += [np.concatenate([w_last, np.zeros((w.shape[0], 1))], axis=1),
                    np.concatenate([b_last, np.zeros(1)])]
    prior_stds += [np.concatenate([np.full(w_last.shape, float(prior_std)),
                                   np.ones((w.shape[0], 1))], axis=1),
                   np.array([float(prior_std), 1.0])]
    rho0 = float(std_to_rho(init_std))
    rho = [np.full(m.shape, rho0) for m in means]
    return VariationalState(spec, means, rho, prior_means, prior_stds)


def kl_gaussian(q_mean, q_std, p_mean, p_std) -> float:
    """Sum of KL(N(q_mean, q_std^2) || N(p_mean, p_std^2)) over all entries."""
    q_mean, q_std, p_mean, p_std = (np.asarray(a, dtype=np.float64)
                                    for a in (q_mean, q_std, p_mean, p_std))
    if np.any(q_std <= 0) or np.any(p_std <= 0):
        raise ValueError("standard deviations must be positive")
    kl = (np.log(p_std / q_std)
          + (q_std ** 2 + (q_mean - p_mean) ** 2) / (2.0 * p_std ** 2) - 0.5)
    return float(np.sum(kl))


def kl_divergence(vstate: VariationalState) -> float:
    return sum(kl_gaussian(m, s, pm, ps) for m, s, pm, ps in
               zip(vstate.mean, vstate.std, vstate.prior_mean, vstate.prior_std))


def kl_gradients(vstate: VariationalState) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """dKL/d(mean) and dKL/d(rho)."""
    g_mu, g_rho = [], []
    for m, r, pm, ps in zip(vstate.mean, vstate.rho, vstate.prior_mean, vstate.prior_std):
        s = softplus(r)
        g_mu.append((m - pm) / ps ** 2)
        g_rho.append((-1.0 / s + s / ps ** 2) * sigmoid(r))
    return g_mu, g_rho


@dataclass(frozen=True)
class BetaSchedule:
    beta_max: float = 1.0
    total_epochs: int = 400

    def __post_init__(self):
        if self.beta_max < 0:
            raise ValueError("beta_max must be nonnegative")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")

    def progress(self, epoch: int) -> float:
        return min(1.0, max(0.0, epoch / self.total_epochs))


def beta_at(p: float, sched: BetaSchedule) -> float:
    """KL weight ``beta_max * (2 / (1 + exp(-10 p)) - 1)``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    return sched.beta_max * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)


def elbo_loss_and_grad(X, y, vstate: VariationalState, beta: float, n_total: int,
                       rng: np.random.Generator) -> tuple[float, list[np.ndarray]]:
    """Minibatch negative ELBO and its gradient w.r.t. ``vstate.params()``.

    loss = mean Gaussian NLL over the batch + (beta / n_total) * KL(q || p),
    with one reparameterized weight draw shared by the whole batch.
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    net, eps = vstate.sample(rng)
    out, cache = forward_batch(net, X)
    nll, g_w, _ = backward_loss(net, cache, out, y, "gaussian_nll")
    g_mu_kl, g_rho_kl = kl_gradients(vstate)
    scale = beta / n_total
    g_mu = [gw + scale * gk for gw, gk in zip(g_w, g_mu_kl)]
    g_rho = [gw * e * sigmoid(r) + scale * gk
             for gw, e, r, gk in zip(g_w, eps, vstate.rho, g_rho_kl)]
    value = nll + (scale * kl_divergence(vstate) if scale else 0.0)
    grads = g_mu + g_rho
    check_finite(grads, vstate.param_names())
    return value, grads


def elbo_loss(X, y, vstate: VariationalState, beta: float, rng: np.random.Generator,
              n_total: int | None = None) -> float:
    """Negative ELBO for one reparameterized draw; ``n_total`` defaults to the batch size."""
    n_total = len(np.asarray(X)) if n_total is None else n_total
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    net, _ = vstate.sample(rng)
    out, _ = forward_batch(net, X)
    y = np.asarray(y, dtype=np.float64).ravel()
    var = head_variance(out[:, 1])
    r = y - out[:, 0]
    nll = float(np.mean(0.5 * np.log(2.0 * np.pi * var) + r * r / (2.0 * var)))
    return nll + (beta / n_total * kl_divergence(vstate) if beta else 0.0)


@dataclass(frozen=True)
class PredictiveSummary:
    """Per-row MC predictive statistics (arrays of equal length)."""

    mean: np.ndarray
    epistemic_std: np.ndarray
    aleatoric_std: np.ndarray
    total_std: np.ndarray
    n_samples: int

    def std(self, source: str) -> np.ndarray:
        return {"epistemic": self.epistemic_std, "aleatoric": self.aleatoric_std,
                "total": self.total_std}[source]

    def __len__(self):
        return len(self.mean)

    def shifted(self, offset) -> "PredictiveSummary":
        """Same uncertainty, mean moved by a deterministic offset."""
        return PredictiveSummary(self.mean + np.asarray(offset, dtype=np.float64),
                                 self.epistemic_std, self.aleatoric_std, self.total_std,
                                 self.n_samples)


def predict_mc(vstate: VariationalState, X, n_samples: int = 200,
               rng: np.random.Generator | int = 0) -> PredictiveSummary:
    """Monte-Carlo predictive mean with epistemic/aleatoric decomposition.

    epistemic = population std of sampled means (0 for a single sample),
    aleatoric = sqrt of the averaged predicted variances,
    total = sqrt(epistemic^2 + aleatoric^2).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(rng)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    means = np.empty((n_samples, X.shape[0]))
    variances = np.empty_like(means)
    for s in range(n_samples):
        net, _ = vstate.sample(rng)
        out, _ = forward_batch(net, X)
        means[s] = out[:, 0]
        variances[s] = head_variance(out[:, 1])
    epistemic = means.std(axis=0)
    aleatoric = np.sqrt(variances.mean(axis=0))
    total = np.sqrt(epistemic ** 2 + aleatoric ** 2)
    return PredictiveSummary(means.mean(axis=0), epistemic, aleatoric, total, n_samples)
