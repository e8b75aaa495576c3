"""Dense feedforward engine with hand-written reverse-mode gradients.

Everything is float64. Weight matrices are stored as ``(n_in, n_out)`` so a
batch ``X`` of shape ``(N, n_in)`` maps to ``X @ W + b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
LOSSES = ("mse", "bce", "gaussian_nll")

BCE_CLAMP = 1e-7
VARIANCE_FLOOR = 1e-6


class ShapeError(ValueError):
    """Input or parameter shapes disagree with the network topology."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in a forward or backward pass."""


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple[int, ...]
    activations: tuple[str, ...]
    dropout_rates: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        object.__setattr__(self, "activations", tuple(self.activations))
        rates = tuple(float(r) for r in self.dropout_rates) or (0.0,) * (len(self.layer_sizes) - 1)
        object.__setattr__(self, "dropout_rates", rates)
        if len(self.layer_sizes) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if any(n < 1 for n in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {self.layer_sizes}")
        if len(self.activations) != self.n_layers:
            raise ValueError(
                f"expected {self.n_layers} activations, got {len(self.activations)}"
            )
        bad = [a for a in self.activations if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown activations {bad}; choose from {ACTIVATIONS}")
        if len(self.dropout_rates) != self.n_layers:
            raise ValueError(f"expected {self.n_layers} dropout rates")
        if any(not 0.0 <= r <= 0.5 for r in self.dropout_rates):
            raise ValueError("dropout rates must lie in [0, 0.5]")
        if self.dropout_rates[-1] != 0.0:
            raise ValueError("the output layer cannot use dropout")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @classmethod
    def mlp(cls, sizes: Sequence[int], hidden: str = "relu", output: str = "identity",
            dropout: float = 0.0) -> "NetworkSpec":
        n = len(sizes) - 1
        return cls(tuple(sizes), (hidden,) * (n - 1) + (output,),
                   (dropout,) * (n - 1) + (0.0,))

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activations": list(self.activations),
                "dropout_rates": list(self.dropout_rates)}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["layer_sizes"]), tuple(d["activations"]),
                   tuple(d.get("dropout_rates", ())))


@dataclass
class NetworkState:
    """Weights and biases of one dense stack."""

    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int | None = None

    def __post_init__(self):
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ShapeError("parameter count does not match the spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            n_in, n_out = self.spec.layer_sizes[i], self.spec.layer_sizes[i + 1]
            if w.shape != (n_in, n_out) or b.shape != (n_out,):
                raise ShapeError(
                    f"layer {i}: expected W{(n_in, n_out)} b{(n_out,)}, got W{w.shape} b{b.shape}"
                )

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def param_names(self, prefix: str = "") -> list[str]:
        names = []
        for i in range(self.spec.n_layers):
            names += [f"{prefix}W{i}", f"{prefix}b{i}"]
        return names

    def with_params(self, params: Sequence[np.ndarray]) -> "NetworkState":
        return NetworkState(self.spec, list(params[0::2]), list(params[1::2]), self.seed)

    def copy(self) -> "NetworkState":
        return self.with_params([p.copy() for p in self.params()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())

    def equals(self, other: "NetworkState") -> bool:
        """Bitwise parameter equality."""
        return self.spec == other.spec and all(
            np.array_equal(a, b) for a, b in zip(self.params(), other.params())
        )


def init_network(spec: NetworkSpec, seed: int | np.random.Generator) -> NetworkState:
    """Scaled-uniform fan-in init: W ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), b = 0."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = math.sqrt(6.0 / n_in)
        weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return NetworkState(spec, weights, biases, seed if isinstance(seed, int) else None)


def stack(first: NetworkState, second: NetworkState) -> NetworkState:
    """Compose two stacks into one network (first feeds second)."""
    if first.spec.n_out != second.spec.n_in:
        raise ShapeError("stacks do not connect")
    spec = NetworkSpec(
        first.spec.layer_sizes + second.spec.layer_sizes[1:],
        first.spec.activations + second.spec.activations,
        first.spec.dropout_rates + second.spec.dropout_rates,
    )
    return NetworkState(spec, first.weights + second.weights, first.biases + second.biases,
                        first.seed)


# ---------------------------------------------------------------- activations

def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(z):
    return np.logaddexp(0.0, z)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray | None:
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return None


# ---------------------------------------------------------------- passes

@dataclass
class Cache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)


def forward_batch(state: NetworkState, X: np.ndarray, train_mode: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, Cache]:
    """Forward a batch, returning the output and everything backward needs."""
    a = np.asarray(X, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != state.spec.n_in:
        raise ShapeError(f"expected input of shape (N, {state.spec.n_in}), got {a.shape}")
    cache = Cache()
    for i, (w, b) in enumerate(zip(state.weights, state.biases)):
        cache.inputs.append(a)
        z = a @ w + b
        a = _activate(state.spec.activations[i], z)
        mask = None
        rate = state.spec.dropout_rates[i]
        if train_mode and rate > 0.0:
            if rng is None:
                raise ValueError("dropout in train mode needs an rng")
            mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
            a = a * mask
        cache.pre.append(z)
        cache.post.append(a)
        cache.masks.append(mask)
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite network output")
    return a, cache


def forward(state: NetworkState, x: np.ndarray, train_mode: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Evaluate the network on a single feature vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return forward_batch(state, x[None, :], train_mode, rng)[0][0]
    return forward_batch(state, x, train_mode, rng)[0]


def backward_from(state: NetworkState, cache: Cache,
                  grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Backpropagate dL/d(output); returns (parameter grads, dL/d(input))."""
    g = grad_out
    grads: list[np.ndarray] = [None] * (2 * state.spec.n_layers)  # type: ignore[list-item]
    for i in reversed(range(state.spec.n_layers)):
        if cache.masks[i] is not None:
            g = g * cache.masks[i]
        # remove the mask before differentiating the activation
        post = cache.post[i] if cache.masks[i] is None else _activate(
            state.spec.activations[i], cache.pre[i])
        d = _activation_grad(state.spec.activations[i], cache.pre[i], post)
        if d is not None:
            g = g * d
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ state.weights[i].T
    return grads, g


# ---------------------------------------------------------------- losses

def mse_loss(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    if y_true.shape != y_pred.shape:
        raise ShapeError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("empty input")
    return float(np.mean((y_true - y_pred) ** 2))


def bce_loss(d_true, d_pred) -> float:
    d_true = np.asarray(d_true, dtype=np.float64).ravel()
    p = np.clip(np.asarray(d_pred, dtype=np.float64).ravel(), BCE_CLAMP, 1.0 - BCE_CLAMP)
    if d_true.size == 0:
        raise ValueError("empty input")
    if d_true.shape != p.shape:
        raise ShapeError(f"length mismatch: {d_true.shape} vs {p.shape}")
    return float(-np.mean(d_true * np.log(p) + (1.0 - d_true) * np.log1p(-p)))


def bce_from_logits(d_true, logits) -> float:
    """BCE of ``sigmoid(logits)`` without forming the probabilities.

    Logits are clipped where :func:`bce_loss` clips probabilities.
    """
    lim = math.log((1.0 - BCE_CLAMP) / BCE_CLAMP)
    z = np.clip(np.asarray(logits, dtype=np.float64).ravel(), -lim, lim)
    d = np.asarray(d_true, dtype=np.float64).ravel()
    return float(np.mean(softplus(z) - d * z))


def head_variance(raw: np.ndarray) -> np.ndarray:
    """Map the raw variance-head output to a strictly positive variance."""
    return softplus(raw) + VARIANCE_FLOOR


def gaussian_nll(y_true, mean, raw) -> float:
    """Mean Gaussian negative log-likelihood with variance ``softplus(raw) + 1e-6``."""
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    var = head_variance(np.asarray(raw, dtype=np.float64).ravel())
    r = y_true - np.asarray(mean, dtype=np.float64).ravel()
    return float(np.mean(0.5 * np.log(2.0 * np.pi * var) + r * r / (2.0 * var)))


def loss_grad(loss: str, y: np.ndarray, out: np.ndarray,
              last_activation: str) -> tuple[float, np.ndarray]:
    """Loss value and dL/d(network output).

    For ``bce`` with a sigmoid output layer the gradient is returned with
    respect to the pre-activation instead; callers pass it through
    :func:`backward_from` on a stack whose last activation is then treated as
    identity (see :func:`loss_and_gradients`).
    """
    n = out.shape[0]
    y = np.asarray(y, dtype=np.float64).reshape(n, -1)
    if loss == "mse":
        r = out - y
        return float(np.mean(r * r)), 2.0 * r / r.size
    if loss == "bce":
        p = out
        value = bce_loss(y, p)
        inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
        if last_activation == "sigmoid":
            return value, np.where(inside, p - y, 0.0) / n
        return value, np.where(inside, (p - y) / (p * (1.0 - p)), 0.0) / n
    if loss == "gaussian_nll":
        if out.shape[1] != 2:
            raise ShapeError("gaussian_nll needs a (mean, raw variance) output pair")
        mu, raw = out[:, 0], out[:, 1]
        var = head_variance(raw)
        r = mu - y[:, 0]
        value = float(np.mean(0.5 * np.log(2.0 * np.pi * var) + r * r / (2.0 * var)))
        g = np.empty_like(out)
        g[:, 0] = r / var / n
        g[:, 1] = (0.5 / var - r * r / (2.0 * var * var)) * sigmoid(raw) / n
        return value, g
    raise ValueError(f"unknown loss {loss!r}; choose from {LOSSES}")


def backward_loss(state: NetworkState, cache: Cache, out: np.ndarray, y: np.ndarray,
                  loss: str) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Loss value, parameter grads and input grad for a cached forward pass."""
    last = state.spec.activations[-1]
    value, g = loss_grad(loss, y, out, last)
    if loss == "bce" and last == "sigmoid":
        # g is already dL/dz for the output layer; the value from logits keeps
        # the digits that log1p(-p) loses once the sigmoid saturates
        value = bce_from_logits(y, cache.pre[-1])
        spec = state.spec
        tmp = NetworkState(
            NetworkSpec(spec.layer_sizes, spec.activations[:-1] + ("identity",),
                        spec.dropout_rates),
            state.weights, state.biases)
        grads, g_in = backward_from(tmp, cache, g)
    else:
        grads, g_in = backward_from(state, cache, g)
    return value, grads, g_in


def loss_and_gradients(state: NetworkState, X, y, loss: str, train_mode: bool = False,
                       rng: np.random.Generator | None = None) -> tuple[float, list[np.ndarray]]:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    out, cache = forward_batch(state, X, train_mode, rng)
    value, grads, _ = backward_loss(state, cache, out, y, loss)
    check_finite(grads, state.param_names())
    return value, grads


def backward(state: NetworkState, X, y, loss: str) -> list[np.ndarray]:
    """d(loss)/d(parameters), ordered as ``state.params()``."""
    return loss_and_gradients(state, X, y, loss)[1]


def check_finite(arrays: Sequence[np.ndarray], names: Sequence[str]) -> None:
    for name, a in zip(names, arrays):
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite gradient in {name}")


# ---------------------------------------------------------------- optimizer

@dataclass(frozen=True)
class OptimizerConfig:
    initial_learning_rate: float = 1e-3
    decay_factor: float = 0.96
    decay_every_epochs: int = 10
    l2_penalty: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.initial_learning_rate <= 0:
            raise ValueError("initial_learning_rate must be positive")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_every_epochs < 1:
            raise ValueError("decay_every_epochs must be a positive integer")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be nonnegative")

    def learning_rate(self, epoch: int) -> float:
        """Staircase exponential decay."""
        return self.initial_learning_rate * self.decay_factor ** (epoch // self.decay_every_epochs)


class AdamMoments:
    """First/second moment buffers and step count for one parameter list."""

    def __init__(self, params: Sequence[np.ndarray]):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], moments: AdamMoments,
                opt: OptimizerConfig, epoch: int,
                names: Sequence[str] | None = None) -> list[np.ndarray]:
    """One bias-corrected Adam step; returns new parameter arrays.

    The L2 penalty ``l2 * sum(W**2)`` is applied to weight matrices only
    (2-D parameters), i.e. ``2 * l2 * W`` is added to their gradient.
    """
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if len(moments.m) != len(params) or any(m.shape != p.shape for m, p in zip(moments.m, params)):
        raise ShapeError("moment buffers do not match the parameters")
    check_finite(grads, names or [f"param[{i}]" for i in range(len(params))])
    lr = opt.learning_rate(epoch)
    moments.t += 1
    b1, b2 = opt.adam_beta1, opt.adam_beta2
    c1 = 1.0 - b1 ** moments.t
    c2 = 1.0 - b2 ** moments.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if opt.l2_penalty and p.ndim == 2:
            g = g + 2.0 * opt.l2_penalty * p
        m = moments.m[i] = b1 * moments.m[i] + (1.0 - b1) * g
        v = moments.v[i] = b2 * moments.v[i] + (1.0 - b2) * g * g
        out.append(p - lr * (m / c1) / (np.sqrt(v / c2) + opt.adam_epsilon))
    return out


def adam_step(state: NetworkState, grads: Sequence[np.ndarray], opt: OptimizerConfig, epoch: int,
              moments: AdamMoments | None = None) -> NetworkState:
    """Adam update of a whole network. Pass ``moments`` to carry state between steps."""
    moments = moments if moments is not None else AdamMoments(state.params())
    return state.with_params(
        adam_update(state.params(), grads, moments, opt, epoch, state.param_names())
    )
