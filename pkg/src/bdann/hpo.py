"""Hyperparameter search: random warm start followed by local perturbation
around the running best, plus a two-phase architecture-then-training search."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .adversarial import LambdaSchedule
from .bayes import BetaSchedule
from .pipeline import PipelineSettings, train_strategy
from .synthetic import DomainData

log = logging.getLogger(__name__)

KINDS = ("int", "real", "log_real", "categorical")


class SearchFailedError(RuntimeError):
    """Every trial of a search failed."""


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str
    low: float | None = None
    high: float | None = None
    choices: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.choices:
                raise ValueError(f"{self.name}: categorical dimension needs choices")
            return
        if self.low is None or self.high is None or self.low > self.high:
            raise ValueError(f"{self.name}: bounds must be ordered")
        if self.kind == "log_real" and self.low <= 0:
            raise ValueError(f"{self.name}: log range must be positive")

    def sample(self, rng: np.random.Generator):
        if self.kind == "categorical":
            return self.choices[int(rng.integers(len(self.choices)))]
        if self.kind == "int":
            return int(rng.integers(int(self.low), int(self.high) + 1))
        if self.kind == "log_real":
            return self._clip(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))
        return float(rng.uniform(self.low, self.high))

    def perturb(self, value, scale: float, rng: np.random.Generator):
        """Gaussian step of ``scale`` times the range width, clipped to bounds."""
        if self.kind == "categorical":
            return self.sample(rng) if rng.random() < scale else value
        if self.kind == "log_real":
            lo, hi = math.log(self.low), math.log(self.high)
            v = math.log(value) + rng.normal(0.0, scale * (hi - lo))
            return self._clip(math.exp(v))
        v = value + rng.normal(0.0, scale * (self.high - self.low))
        v = min(max(v, self.low), self.high)
        return int(round(v)) if self.kind == "int" else float(v)

    def _clip(self, v: float) -> float:
        # exp(log(x)) can land one ulp outside the range
        return float(min(max(v, self.low), self.high))

    def midpoint(self):
        if self.kind == "categorical":
            return self.choices[len(self.choices) // 2]
        if self.kind == "int":
            return int(round((self.low + self.high) / 2))
        if self.kind == "log_real":
            return float(math.sqrt(self.low * self.high))
        return (self.low + self.high) / 2

    def contains(self, value) -> bool:
        if self.kind == "categorical":
            return value in self.choices
        return self.low <= value <= self.high


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dimension, ...]

    def __post_init__(self):
        names = [d.name for d in self.dims]
        if not names:
            raise ValueError("search space is empty")
        if len(set(names)) != len(names):
            raise ValueError("duplicate dimension names")

    def sample(self, rng) -> dict:
        return {d.name: d.sample(rng) for d in self.dims}

    def perturb(self, config: dict, scale: float, rng) -> dict:
        return {d.name: d.perturb(config[d.name], scale, rng) for d in self.dims}

    def midpoint(self) -> dict:
        return {d.name: d.midpoint() for d in self.dims}

    def contains(self, config: dict) -> bool:
        return all(d.contains(config[d.name]) for d in self.dims)

    def to_json(self) -> list[dict]:
        return [asdict(d) for d in self.dims]

    @classmethod
    def from_json(cls, items: list[dict]) -> "SearchSpace":
        return cls(tuple(Dimension(**dict(d, choices=tuple(d.get("choices", ())))) for d in items))


def classifier_space() -> SearchSpace:
    """Stage-2 domain classifier and alignment schedule ranges."""
    return SearchSpace((
        Dimension("clf_layers", "int", 1, 4),
        Dimension("clf_neurons", "int", 32, 256),
        Dimension("clf_dropout", "real", 0.0, 0.5),
        Dimension("stage2_lr", "log_real", 1e-5, 1e-4),
        Dimension("lambda_max", "real", 0.1, 2.0),
        Dimension("lambda_min_fraction", "real", 0.01, 0.2),
        Dimension("ramp_k", "real", 5.0, 20.0),
        Dimension("l2_penalty", "log_real", 1e-7, 1e-3),
        Dimension("warmup_epochs", "int", 0, 15),
    ))


def architecture_space() -> SearchSpace:
    return SearchSpace((
        Dimension("extractor_layers", "int", 2, 4),
        Dimension("width", "int", 16, 128),
        Dimension("head_width", "int", 16, 128),
        Dimension("activation", "categorical", choices=("relu", "tanh")),
    ))


def training_space() -> SearchSpace:
    return SearchSpace(classifier_space().dims + (Dimension("beta_max", "real", 0.1, 2.0),))


@dataclass
class Trial:
    index: int
    config: dict
    seed: int
    status: str = "pending"
    objective: float | None = None
    error: str | None = None


@dataclass
class SearchResult:
    best: Trial
    history: list[Trial]

    def running_best(self) -> list[float]:
        out, cur = [], math.inf
        for t in self.history:
            if t.status == "completed":
                cur = min(cur, t.objective)
            out.append(cur)
        return out

    def to_json(self) -> dict:
        return {"best": asdict(self.best), "history": [asdict(t) for t in self.history]}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


Objective = Callable[[dict, int], float]


def perturbation_scale(step: int, total: int, start: float = 0.25, end: float = 0.02) -> float:
    """Geometric shrink of the step size over the post-warm-start trials."""
    if total <= 1:
        return start
    return start * (end / start) ** (step / (total - 1))


def _run_trial(objective: Objective, trial: Trial) -> Trial:
    try:
        value = float(objective(trial.config, trial.seed))
        if not math.isfinite(value):
            raise FloatingPointError(f"objective returned {value}")
        trial.objective, trial.status = value, "completed"
    except Exception as exc:  # any trial failure is recorded and the search moves on
        trial.status, trial.error = "failed", f"{type(exc).__name__}: {exc}"
        log.warning("trial %d failed: %s", trial.index, trial.error)
    return trial


def run_search(space: SearchSpace, budget: int, warm_random: int, objective: Objective,
               seed: int = 0, workers: int = 1) -> SearchResult:
    """Minimize ``objective(config, trial_seed)`` over ``space``.

    The first ``warm_random`` configurations are uniform draws; the rest
    perturb the best completed configuration so far with a shrinking step.
    Trials run in rounds of ``workers``; results depend on ``seed`` and
    ``workers`` only.
    """
    if not budget >= warm_random >= 1:
        raise ValueError("need budget >= warm_random >= 1")
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=budget)
    history: list[Trial] = []

    def best() -> Trial | None:
        done = [t for t in history if t.status == "completed"]
        return min(done, key=lambda t: (t.objective, t.index)) if done else None

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while len(history) < budget:
            i0 = len(history)
            batch = []
            for i in range(i0, min(i0 + max(workers, 1), budget)):
                cur = best()
                if i < warm_random or cur is None:
                    config = space.sample(rng)
                else:
                    scale = perturbation_scale(i - warm_random, budget - warm_random)
                    config = space.perturb(cur.config, scale, rng)
                batch.append(Trial(i, config, int(seeds[i])))
                if i + 1 == warm_random:
                    break  # perturbation needs the warm-start results
            if pool is None:
                done = [_run_trial(objective, t) for t in batch]
            else:
                done = list(pool.map(lambda t: _run_trial(objective, t), batch))
            history.extend(sorted(done, key=lambda t: t.index))
    finally:
        if pool is not None:
            pool.shutdown()
    top = best()
    if top is None:
        raise SearchFailedError(f"all {budget} trials failed")
    return SearchResult(top, history)


@dataclass
class StagedSearchResult:
    architecture: dict
    training: dict
    phase1: SearchResult
    phase2: SearchResult

    def to_json(self) -> dict:
        return {"architecture": self.architecture, "training": self.training,
                "phase1": self.phase1.to_json(), "phase2": self.phase2.to_json()}


def staged_search(arch_space: SearchSpace, train_space: SearchSpace,
                  objective: Callable[[dict, dict, int], float],
                  budget_split: tuple[int, int] = (40, 40), warm_random: int = 20,
                  seed: int = 0, workers: int = 1) -> StagedSearchResult:
    """Tune the architecture at mid-range training settings, fix it, then tune training."""
    mid = train_space.midpoint()
    b1, b2 = budget_split
    p1 = run_search(arch_space, b1, min(warm_random, b1),
                    lambda cfg, s: objective(cfg, mid, s), seed, workers)
    arch = p1.best.config
    p2 = run_search(train_space, b2, min(warm_random, b2),
                    lambda cfg, s: objective(arch, cfg, s), seed + 1, workers)
    return StagedSearchResult(arch, p2.best.config, p1, p2)


# ---------------------------------------------------------------- pipeline objective

def apply_config(settings: PipelineSettings, arch_cfg: dict | None = None,
                 train_cfg: dict | None = None) -> PipelineSettings:
    """Overlay sampled values onto pipeline settings; absent keys keep their value."""
    out = settings
    if arch_cfg:
        a = out.arch
        n = arch_cfg.get("extractor_layers", len(a.extractor_hidden))
        w = arch_cfg.get("width", a.extractor_hidden[0])
        out = replace(out, arch=replace(
            a, extractor_hidden=(int(w),) * int(n),
            head_hidden=(int(arch_cfg.get("head_width", a.head_hidden[0])),),
            activation=arch_cfg.get("activation", a.activation)))
    if train_cfg:
        c = train_cfg
        a = out.arch
        if "clf_layers" in c or "clf_neurons" in c:
            n = c.get("clf_layers", len(a.classifier_hidden))
            w = c.get("clf_neurons", a.classifier_hidden[0])
            a = replace(a, classifier_hidden=(int(w),) * int(n))
        a = replace(a, classifier_dropout=float(c.get("clf_dropout", a.classifier_dropout)))
        s2 = out.stage2
        opt = replace(s2.optimizer,
                      initial_learning_rate=float(c.get("stage2_lr", s2.optimizer.initial_learning_rate)),
                      l2_penalty=float(c.get("l2_penalty", s2.optimizer.l2_penalty)))
        lam = out.lambda_schedule
        lam = LambdaSchedule(float(c.get("lambda_max", lam.lambda_max)),
                             float(c.get("lambda_min_fraction", lam.lambda_min_fraction)),
                             float(c.get("ramp_k", lam.ramp_k)),
                             int(c.get("warmup_epochs", lam.warmup_epochs)), lam.total_epochs)
        beta = BetaSchedule(float(c.get("beta_max", out.beta_schedule.beta_max)),
                            out.beta_schedule.total_epochs)
        out = replace(out, arch=a, stage2=replace(s2, optimizer=opt), lambda_schedule=lam,
                      beta_schedule=beta)
    return out


def validation_mse_objective(source: DomainData, target: DomainData, settings: PipelineSettings,
                             strategy: str = "staged_bdann") -> Callable[[dict, dict, int], float]:
    """Objective for ``staged_search``: target-validation MSE of one trained seed."""

    def objective(arch_cfg: dict, train_cfg: dict, seed: int) -> float:
        s = apply_config(settings, arch_cfg, train_cfg)
        model = train_strategy(strategy, source, target, s, seed)
        pred = model.predict(target.val.X)
        return float(np.mean((target.val.y - pred) ** 2))

    return objective
