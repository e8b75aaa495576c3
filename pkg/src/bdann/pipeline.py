"""Training strategies: from scratch, direct transfer and the three-stage
pretrain / align / Bayesian fine-tune workflow, plus seed ensembles."""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .adversarial import (
    LambdaSchedule,
    auc,
    balanced_batches,
    early_stop_score,
    grl_backward,
    lambda_at,
    split_domain_validation,
)
from .bayes import (
    BetaSchedule,
    PredictiveSummary,
    VariationalState,
    beta_at,
    elbo_loss_and_grad,
    init_from_deterministic,
    kl_divergence,
    predict_mc,
)
from .metrics import MetricsReport, aggregate_reports, error_metrics
from .nn import (
    AdamMoments,
    NetworkSpec,
    NetworkState,
    NumericError,
    OptimizerConfig,
    adam_update,
    backward_from,
    backward_loss,
    bce_loss,
    forward,
    forward_batch,
    head_variance,
    init_network,
    stack,
)
from .synthetic import DataSplit, DomainData, ZScoreScaler, fit_zscore

log = logging.getLogger(__name__)

STRATEGIES = ("from_scratch", "direct_transfer", "staged_bdann")
DIRECT_MODES = ("frozen", "partial", "full")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class Architecture:
    """Shared extractor/head topology plus the stage-2 domain classifier."""

    n_features: int = 5
    extractor_hidden: tuple[int, ...] = (32, 32)
    head_hidden: tuple[int, ...] = (16,)
    activation: str = "tanh"
    classifier_hidden: tuple[int, ...] = (64,)
    classifier_dropout: float = 0.0

    def extractor_spec(self) -> NetworkSpec:
        sizes = (self.n_features,) + tuple(self.extractor_hidden)
        return NetworkSpec(sizes, (self.activation,) * (len(sizes) - 1))

    def head_spec(self) -> NetworkSpec:
        sizes = (self.extractor_hidden[-1],) + tuple(self.head_hidden) + (1,)
        return NetworkSpec(sizes, (self.activation,) * (len(sizes) - 2) + ("identity",))

    def classifier_spec(self) -> NetworkSpec:
        sizes = (self.extractor_hidden[-1],) + tuple(self.classifier_hidden) + (1,)
        return NetworkSpec.mlp(sizes, "relu", "sigmoid", self.classifier_dropout)


@dataclass(frozen=True)
class StageConfig:
    max_epochs: int = 400
    patience: int = 20
    batch_size: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)


@dataclass(frozen=True)
class PipelineSettings:
    """Every knob of the three strategies in one place."""

    arch: Architecture = field(default_factory=Architecture)
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=lambda: StageConfig(
        max_epochs=100, patience=10, batch_size=64,
        optimizer=OptimizerConfig(initial_learning_rate=5e-5, l2_penalty=1e-5)))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(
        batch_size=16, optimizer=OptimizerConfig(initial_learning_rate=3e-3)))
    scratch: StageConfig = field(default_factory=lambda: StageConfig(
        batch_size=16, optimizer=OptimizerConfig(initial_learning_rate=3e-3)))
    direct: StageConfig = field(default_factory=lambda: StageConfig(
        batch_size=32, optimizer=OptimizerConfig(initial_learning_rate=3e-3)))
    # defaults picked by a small sweep on the synthetic benchmark
    lambda_schedule: LambdaSchedule = field(default_factory=lambda: LambdaSchedule(lambda_max=0.1))
    beta_schedule: BetaSchedule = field(default_factory=lambda: BetaSchedule(beta_max=0.1))
    gamma: float = 0.5
    domain_val_fraction: float = 0.2
    init_std: float = 0.1
    prior_std: float = 1.0
    mc_samples: int = 200
    val_mc_samples: int = 10
    direct_mode: str = "full"
    partial_k: int = 1


@dataclass
class TrainedModel:
    strategy: str
    extractor: NetworkState
    head: NetworkState | None
    scaler: ZScoreScaler
    seed: int
    variational: VariationalState | None = None
    classifier: NetworkState | None = None
    history: dict[str, list[dict]] = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    mc_samples: int = 200
    initial_variational: VariationalState | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def is_bayesian(self) -> bool:
        return self.variational is not None

    def network(self) -> NetworkState:
        return stack(self.extractor, self.head)

    def predict_summary(self, X, n_samples: int | None = None) -> PredictiveSummary:
        if self.variational is None:
            raise ValueError("only Bayesian models produce a predictive summary")
        Z = self.scaler.apply(X)
        return predict_mc(self.variational, Z, n_samples or self.mc_samples,
                          np.random.default_rng([self.seed, 7]))

    def predict(self, X) -> np.ndarray:
        if self.variational is not None:
            return self.predict_summary(X).mean
        return forward(self.network(), self.scaler.apply(X))[:, 0]


# ---------------------------------------------------------------- deterministic loop

def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def fit_regressor(net: NetworkState, trainable: Sequence[bool], X, y, X_val, y_val,
                  cfg: StageConfig, rng: np.random.Generator,
                  tag: str = "") -> tuple[NetworkState, list[dict], int]:
    """MSE training with early stopping on validation MSE; restores the best weights.

    ``trainable`` flags each entry of ``net.params()``; frozen entries are
    returned bitwise unchanged.
    """
    params = net.params()
    names = net.param_names()
    idx = [i for i, t in enumerate(trainable) if t]
    moments = AdamMoments([params[i] for i in idx])
    best_val = mse_of(net, X_val, y_val)
    best = list(params)
    history: list[dict] = [{"epoch": -1, "train_mse": math.nan, "val_mse": best_val}]
    wait = 0
    epochs_ran = 0
    for epoch in range(cfg.max_epochs):
        total = 0.0
        for b in _minibatches(len(X), cfg.batch_size, rng):
            cur = net.with_params(params)
            out, cache = forward_batch(cur, X[b])
            value, grads, _ = backward_loss(cur, cache, out, y[b], "mse")
            if not math.isfinite(value):
                raise TrainingDivergedError(f"{tag} loss became non-finite", history)
            new = adam_update([params[i] for i in idx], [grads[i] for i in idx], moments,
                              cfg.optimizer, epoch, [names[i] for i in idx])
            for i, p in zip(idx, new):
                params[i] = p
            total += value * len(b)
        epochs_ran = epoch + 1
        val = mse_of(net.with_params(params), X_val, y_val)
        history.append({"epoch": epoch, "train_mse": total / len(X), "val_mse": val,
                        "lr": cfg.optimizer.learning_rate(epoch)})
        if not math.isfinite(val):
            raise TrainingDivergedError(f"{tag} validation loss became non-finite", history)
        if val < best_val:
            best_val, best, wait = val, list(params), 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    return net.with_params(best), history, epochs_ran


def mse_of(net: NetworkState, X, y) -> float:
    out, _ = forward_batch(net, X)
    return float(np.mean((out[:, 0] - y) ** 2))


def _split_net(net: NetworkState, n_ext_layers: int) -> tuple[NetworkState, NetworkState]:
    s = net.spec
    ext = NetworkState(NetworkSpec(s.layer_sizes[:n_ext_layers + 1], s.activations[:n_ext_layers],
                                   s.dropout_rates[:n_ext_layers]),
                       net.weights[:n_ext_layers], net.biases[:n_ext_layers], net.seed)
    head = NetworkState(NetworkSpec(s.layer_sizes[n_ext_layers:], s.activations[n_ext_layers:],
                                    s.dropout_rates[n_ext_layers:]),
                        net.weights[n_ext_layers:], net.biases[n_ext_layers:], net.seed)
    return ext, head


def _fresh_network(arch: Architecture, seed) -> tuple[NetworkState, NetworkState]:
    rng = np.random.default_rng(seed)
    return init_network(arch.extractor_spec(), rng), init_network(arch.head_spec(), rng)


def _scaled(split: DataSplit, scaler: ZScoreScaler) -> tuple[np.ndarray, np.ndarray]:
    return scaler.apply(split.X), split.y


def r2_score(y, pred) -> float:
    y = np.asarray(y)
    return float(1.0 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2))


# ---------------------------------------------------------------- strategies

def stage1_pretrain(source: DomainData, arch: Architecture, cfg: StageConfig, seed: int,
                    scaler: ZScoreScaler | None = None) -> TrainedModel:
    """Deterministic extractor + regression head trained on source rows only."""
    scaler = scaler or fit_zscore(source.train.X)
    X, y = _scaled(source.train, scaler)
    Xv, yv = _scaled(source.val, scaler)
    ext, head = _fresh_network(arch, [seed, 1])
    net = stack(ext, head)
    net, hist, ran = fit_regressor(net, [True] * len(net.params()), X, y, Xv, yv, cfg,
                                   np.random.default_rng([seed, 2]), "stage 1")
    ext, head = _split_net(net, ext.spec.n_layers)
    Xt, yt = _scaled(source.test, scaler)
    pred = forward(net, Xt)[:, 0]
    info = {"stage1_epochs": ran, "source_test_mse": float(np.mean((pred - yt) ** 2)),
            "source_test_r2": r2_score(yt, pred)}
    return TrainedModel("direct_transfer", ext, head, scaler, seed,
                        history={"stage1": hist}, info=info)


def stage2_align(model: TrainedModel, source: DomainData, target: DomainData,
                 sched: LambdaSchedule, cfg: StageConfig, seed: int,
                 arch: Architecture | None = None, gamma: float = 0.5,
                 val_fraction: float = 0.2) -> TrainedModel:
    """Adversarial alignment of the extractor through a gradient-reversal junction.

    The regression head is frozen: it only scores source validation rows
    for the log. Early stopping tracks the composite confusion score after
    warmup and restores the best extractor/classifier pair.
    """
    arch = arch or Architecture(n_features=model.extractor.spec.n_in,
                                extractor_hidden=model.extractor.spec.layer_sizes[1:])
    rng = np.random.default_rng([seed, 3])
    scaler = model.scaler
    Xs_all = scaler.apply(source.train.X)
    Xt_all = scaler.apply(target.train.X)
    s_tr, s_va, t_tr, t_va = split_domain_validation(len(Xs_all), len(Xt_all), val_fraction, rng)
    Xs, Xt = Xs_all[s_tr], Xt_all[t_tr]
    X_val = np.vstack([Xs_all[s_va], Xt_all[t_va]])
    d_val = np.concatenate([np.zeros(len(s_va)), np.ones(len(t_va))])
    Xsv, ysv = _scaled(source.val, scaler)

    ext = model.extractor.copy()
    head = model.head
    head_before = head.copy()
    cls = init_network(arch.classifier_spec(), rng)
    ext_opt = replace(cfg.optimizer, l2_penalty=0.0)
    m_ext, m_cls = AdamMoments(ext.params()), AdamMoments(cls.params())
    ext_names, cls_names = ext.param_names("extractor."), cls.param_names("classifier.")

    def evaluate(e_state, c_state):
        feats = forward(e_state, X_val)
        p = forward(c_state, feats)[:, 0]
        return bce_loss(d_val, p), auc(p, d_val)

    history: list[dict] = []
    best_score, best = math.inf, (ext, cls)
    best_epoch, wait = -1, 0
    for epoch in range(cfg.max_epochs):
        lam = lambda_at(epoch, sched)
        total, count = 0.0, 0
        for batch in balanced_batches(Xs, Xt, cfg.batch_size, rng):
            feats, ext_cache = forward_batch(ext, batch.X)
            p, cls_cache = forward_batch(cls, feats, train_mode=True, rng=rng)
            value, g_cls, g_feat = backward_loss(cls, cls_cache, p, batch.d, "bce")
            if not math.isfinite(value):
                raise TrainingDivergedError("stage 2 loss became non-finite", history)
            g_ext, _ = backward_from(ext, ext_cache, grl_backward(g_feat, lam))
            cls = cls.with_params(adam_update(cls.params(), g_cls, m_cls, cfg.optimizer,
                                              epoch, cls_names))
            if lam > 0.0:
                ext = ext.with_params(adam_update(ext.params(), g_ext, m_ext, ext_opt,
                                                  epoch, ext_names))
            total += value * len(batch.d)
            count += len(batch.d)
        val_bce, val_auc = evaluate(ext, cls)
        score = early_stop_score(val_auc, val_bce, gamma)
        head_mse = mse_of(stack(ext, head), Xsv, ysv)
        history.append({"epoch": epoch, "lambda": lam, "train_bce": total / count,
                        "val_bce": val_bce, "val_auc": val_auc, "s_val": score,
                        "source_head_mse": head_mse})
        if epoch < sched.warmup_epochs:
            continue
        if score < best_score:
            best_score, best, best_epoch, wait = score, (ext, cls), epoch, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    ext, cls = best
    if not head.equals(head_before):
        raise AssertionError("stage 2 modified the frozen regression head")
    final_bce, final_auc = evaluate(ext, cls)
    info = dict(model.info, stage2_epochs=len(history), stage2_best_epoch=best_epoch,
                stage2_val_auc=final_auc, stage2_val_bce=final_bce,
                stage2_score=early_stop_score(final_auc, final_bce, gamma))
    return TrainedModel("staged_bdann", ext, head, scaler, model.seed, classifier=cls,
                        history=dict(model.history, stage2=history), info=info,
                        mc_samples=model.mc_samples)


def stage3_finetune(model: TrainedModel, target: DomainData, beta_sched: BetaSchedule,
                    cfg: StageConfig, seed: int, init_std: float = 0.1,
                    prior_std: float = 1.0, mc_samples: int = 200,
                    val_mc_samples: int = 10) -> TrainedModel:
    """Variational fine-tuning on target rows, initialized from the aligned network.

    Early stopping monitors the validation ELBO: NLL averaged over
    ``val_mc_samples`` weight draws (fixed per run) plus the KL term at the
    fully annealed weight ``beta_max``, so scores stay comparable across epochs.
    """
    scaler = model.scaler
    X, y = _scaled(target.train, scaler)
    Xv, yv = _scaled(target.val, scaler)
    n = len(X)
    vstate = init_from_deterministic(model.network(), init_std, [seed, 4], prior_std)
    initial = vstate
    rng = np.random.default_rng([seed, 5])
    moments = AdamMoments(vstate.params())
    names = vstate.param_names()

    def val_objective(vs: VariationalState, beta: float) -> tuple[float, float]:
        vrng = np.random.default_rng([seed, 6])
        nll = 0.0
        for _ in range(val_mc_samples):
            net, _ = vs.sample(vrng)
            out, _ = forward_batch(net, Xv)
            var = head_variance(out[:, 1])
            r = yv - out[:, 0]
            nll += float(np.mean(0.5 * np.log(2 * np.pi * var) + r * r / (2 * var)))
        nll /= val_mc_samples
        return nll + beta / n * kl_divergence(vs), nll

    best_val, _ = val_objective(vstate, beta_sched.beta_max)
    best = vstate
    history: list[dict] = []
    wait = 0
    for epoch in range(cfg.max_epochs):
        beta = beta_at(beta_sched.progress(epoch), beta_sched)
        total = 0.0
        for b in _minibatches(n, cfg.batch_size, rng):
            value, grads = elbo_loss_and_grad(X[b], y[b], vstate, beta, n, rng)
            if not math.isfinite(value):
                raise TrainingDivergedError("stage 3 loss became non-finite", history)
            vstate = vstate.with_params(adam_update(vstate.params(), grads, moments,
                                                    cfg.optimizer, epoch, names))
            total += value * len(b)
        val, val_nll = val_objective(vstate, beta_sched.beta_max)
        history.append({"epoch": epoch, "beta": beta, "train_elbo": total / n,
                        "val_elbo": val, "val_nll": val_nll,
                        "mean_posterior_std": float(np.mean(np.concatenate(
                            [s.ravel() for s in vstate.std])))})
        if not math.isfinite(val):
            raise TrainingDivergedError("stage 3 validation loss became non-finite", history)
        if val < best_val:
            best_val, best, wait = val, vstate, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    info = dict(model.info, stage3_epochs=len(history))
    out = TrainedModel("staged_bdann", model.extractor, model.head, scaler, seed,
                       variational=best, classifier=model.classifier,
                       history=dict(model.history, stage3=history), info=info,
                       mc_samples=mc_samples, initial_variational=initial)
    return out


def train_from_scratch(target: DomainData, arch: Architecture, cfg: StageConfig,
                       seed: int) -> TrainedModel:
    """Deterministic network on target rows only, with a target-only feature scaler."""
    scaler = fit_zscore(target.train.X, "target_only")
    X, y = _scaled(target.train, scaler)
    Xv, yv = _scaled(target.val, scaler)
    ext, head = _fresh_network(arch, [seed, 1])
    net = stack(ext, head)
    net, hist, ran = fit_regressor(net, [True] * len(net.params()), X, y, Xv, yv, cfg,
                                   np.random.default_rng([seed, 2]), "from scratch")
    ext, head = _split_net(net, ext.spec.n_layers)
    return TrainedModel("from_scratch", ext, head, scaler, seed, history={"train": hist},
                        info={"epochs": ran})


def train_direct_transfer(source: DomainData, target: DomainData, arch: Architecture,
                          cfg: StageConfig, mode: str = "full", seed: int = 0,
                          base: TrainedModel | None = None, partial_k: int = 1,
                          stage1_cfg: StageConfig | None = None) -> TrainedModel:
    """Fine-tune a source-pretrained network on target rows.

    frozen: extractor fixed, head retrained; partial: the last ``partial_k``
    extractor layers and the head are trainable; full: everything is.
    """
    if mode not in DIRECT_MODES:
        raise ValueError(f"mode must be one of {DIRECT_MODES}")
    if base is None:
        scaler = fit_zscore(target.train.X, "joint", source.train.X)
        base = stage1_pretrain(source, arch, stage1_cfg or cfg, seed, scaler)
    n_ext = base.extractor.spec.n_layers
    if mode == "partial" and not 0 <= partial_k <= n_ext:
        raise ValueError(f"partial_k={partial_k} exceeds the {n_ext} extractor layers")
    unfrozen_ext = {"frozen": 0, "partial": partial_k, "full": n_ext}[mode]
    scaler = base.scaler
    X, y = _scaled(target.train, scaler)
    Xv, yv = _scaled(target.val, scaler)
    net = base.network().copy()
    trainable = []
    for layer in range(net.spec.n_layers):
        t = layer >= n_ext - unfrozen_ext
        trainable += [t, t]
    net, hist, ran = fit_regressor(net, trainable, X, y, Xv, yv, cfg,
                                   np.random.default_rng([seed, 2]), "direct transfer")
    ext, head = _split_net(net, n_ext)
    info = dict(base.info, mode=mode, epochs=ran)
    return TrainedModel("direct_transfer", ext, head, scaler, seed,
                        history=dict(base.history, finetune=hist), info=info)


def train_staged(source: DomainData, target: DomainData, settings: PipelineSettings, seed: int,
                 base: TrainedModel | None = None) -> TrainedModel:
    """Run stage 1 (unless ``base`` is given), stage 2 and stage 3."""
    if base is None:
        scaler = fit_zscore(target.train.X, "joint", source.train.X)
        base = stage1_pretrain(source, settings.arch, settings.stage1, seed, scaler)
    sched = replace(settings.lambda_schedule, total_epochs=settings.stage2.max_epochs)
    aligned = stage2_align(base, source, target, sched, settings.stage2, seed, settings.arch,
                           settings.gamma, settings.domain_val_fraction)
    beta = replace(settings.beta_schedule, total_epochs=settings.stage3.max_epochs)
    return stage3_finetune(aligned, target, beta, settings.stage3, seed, settings.init_std,
                           settings.prior_std, settings.mc_samples, settings.val_mc_samples)


def train_strategy(strategy: str, source: DomainData, target: DomainData,
                   settings: PipelineSettings, seed: int,
                   base: TrainedModel | None = None) -> TrainedModel:
    if strategy == "from_scratch":
        return train_from_scratch(target, settings.arch, settings.scratch, seed)
    if strategy == "direct_transfer":
        return train_direct_transfer(source, target, settings.arch, settings.direct,
                                     settings.direct_mode, seed, base, settings.partial_k,
                                     settings.stage1)
    if strategy == "staged_bdann":
        return train_staged(source, target, settings, seed, base)
    raise ValueError(f"unknown strategy {strategy!r}")


def pretrain_base(source: DomainData, target: DomainData, settings: PipelineSettings,
                  seed: int) -> TrainedModel:
    """The shared source model both transfer strategies start from."""
    scaler = fit_zscore(target.train.X, "joint", source.train.X)
    return stage1_pretrain(source, settings.arch, settings.stage1, seed, scaler)


# ---------------------------------------------------------------- evaluation / ensembles

@dataclass
class RunResult:
    seed: int
    report: MetricsReport
    model: TrainedModel | None = None


@dataclass
class EnsembleResult:
    strategy: str
    runs: list[RunResult]
    aggregate: MetricsReport
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def reports(self) -> list[MetricsReport]:
        return [r.report for r in self.runs]


def evaluate(model: TrainedModel, split: DataSplit) -> MetricsReport:
    return error_metrics(split.y, model.predict(split.X))


def _ensemble_member(args) -> RunResult:
    strategy, source, target, settings, seed, base, keep = args
    model = train_strategy(strategy, source, target, settings, seed, base)
    report = evaluate(model, target.test)
    return RunResult(seed, report, model if keep else None)


def run_seed_ensemble(strategy: str, source: DomainData, target: DomainData,
                      settings: PipelineSettings, n_runs: int = 20, base_seed: int = 0,
                      base: TrainedModel | None = None, seeds: Sequence[int] | None = None,
                      workers: int = 1, keep_models: bool = False) -> EnsembleResult:
    """Train ``n_runs`` seeds on identical data and aggregate test metrics.

    Transfer strategies share one source model (trained with ``base_seed``
    unless supplied). Failed runs are dropped with a warning.
    """
    seeds = list(seeds) if seeds is not None else [base_seed + i for i in range(n_runs)]
    if len(seeds) < 2:
        raise ValueError("an ensemble needs at least two runs")
    if strategy != "from_scratch" and base is None:
        base = pretrain_base(source, target, settings, base_seed)
    jobs = [(strategy, source, target, settings, s, base, keep_models) for s in seeds]
    results: list[RunResult] = []
    failures: dict[int, str] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(s, pool.submit(_ensemble_member, job)) for s, job in zip(seeds, jobs)]
            outcomes = []
            for s, fut in futures:
                try:
                    outcomes.append(fut.result())
                except (TrainingDivergedError, NumericError, FloatingPointError) as exc:
                    failures[s] = str(exc)
            results = outcomes
    else:
        for s, job in zip(seeds, jobs):
            try:
                results.append(_ensemble_member(job))
            except (TrainingDivergedError, NumericError, FloatingPointError) as exc:
                failures[s] = str(exc)
    for s, msg in failures.items():
        warnings.warn(f"run with seed {s} failed and was excluded: {msg}", RuntimeWarning)
    if len(results) < 2:
        raise RuntimeError(f"only {len(results)} run(s) survived; cannot aggregate")
    results.sort(key=lambda r: r.seed)
    return EnsembleResult(strategy, results, aggregate_reports([r.report for r in results]),
                          failures)


# ---------------------------------------------------------------- persistence

def _arrays(arrs) -> list:
    return [a.tolist() for a in arrs]


def _net_to_dict(net: NetworkState | None) -> dict | None:
    if net is None:
        return None
    return {"layer_sizes": list(net.spec.layer_sizes), "activations": list(net.spec.activations),
            "dropout_rates": list(net.spec.dropout_rates), "weights": _arrays(net.weights),
            "biases": _arrays(net.biases)}


def _net_from_dict(d: dict | None) -> NetworkState | None:
    if d is None:
        return None
    spec = NetworkSpec(tuple(d["layer_sizes"]), tuple(d["activations"]), tuple(d["dropout_rates"]))
    return NetworkState(spec, [np.array(w, dtype=np.float64) for w in d["weights"]],
                        [np.array(b, dtype=np.float64) for b in d["biases"]])


def _var_to_dict(v: VariationalState | None) -> dict | None:
    if v is None:
        return None
    return {"layer_sizes": list(v.spec.layer_sizes), "activations": list(v.spec.activations),
            "mean": _arrays(v.mean), "rho": _arrays(v.rho),
            "prior_mean": _arrays(v.prior_mean), "prior_std": _arrays(v.prior_std)}


def _var_from_dict(d: dict | None) -> VariationalState | None:
    if d is None:
        return None

    def arrs(key):
        return [np.array(a, dtype=np.float64).reshape(np.shape(a)) for a in d[key]]

    spec = NetworkSpec(tuple(d["layer_sizes"]), tuple(d["activations"]))
    return VariationalState(spec, arrs("mean"), arrs("rho"), arrs("prior_mean"), arrs("prior_std"))


def model_to_dict(model: TrainedModel) -> dict:
    """Plain-data form of a trained model. Floats survive a JSON round trip exactly."""
    return {"strategy": model.strategy, "seed": model.seed, "mc_samples": model.mc_samples,
            "scaler": model.scaler.to_dict(), "extractor": _net_to_dict(model.extractor),
            "head": _net_to_dict(model.head), "variational": _var_to_dict(model.variational),
            "info": model.info}


def model_from_dict(d: dict) -> TrainedModel:
    sc = d["scaler"]
    scaler = ZScoreScaler(np.array(sc["mean"]), np.array(sc["std"]), sc["policy"])
    return TrainedModel(d["strategy"], _net_from_dict(d["extractor"]), _net_from_dict(d["head"]),
                        scaler, d["seed"], _var_from_dict(d["variational"]), info=d.get("info", {}),
                        mc_samples=d["mc_samples"])
