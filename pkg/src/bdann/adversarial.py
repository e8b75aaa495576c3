"""Domain-alignment building blocks: gradient reversal, lambda ramp, AUC,
composite early-stopping score and domain-balanced batching."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.stats import rankdata

LN2 = math.log(2.0)


@dataclass(frozen=True)
class LambdaSchedule:
    lambda_max: float = 1.0
    lambda_min_fraction: float = 0.05
    ramp_k: float = 10.0
    warmup_epochs: int = 0
    total_epochs: int = 100

    def __post_init__(self):
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be nonnegative")
        if not 0.0 <= self.lambda_min_fraction <= 1.0:
            raise ValueError("lambda_min_fraction must lie in [0, 1]")
        if self.warmup_epochs < 0 or self.total_epochs < 1:
            raise ValueError("epoch counts must be nonnegative / positive")


def lambda_at(epoch: int, sched: LambdaSchedule) -> float:
    """Adversarial weight: 0 during warmup, then a floored logistic ramp to lambda_max."""
    if epoch < sched.warmup_epochs:
        return 0.0
    p = (epoch - sched.warmup_epochs) / max(1, sched.total_epochs - sched.warmup_epochs)
    ramp = 2.0 / (1.0 + math.exp(-sched.ramp_k * p)) - 1.0
    return sched.lambda_max * max(sched.lambda_min_fraction, ramp)


def grl_backward(upstream_grad, lam: float):
    """Gradient reversal: identity forward, ``-lam * grad`` backward."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if isinstance(upstream_grad, (list, tuple)):
        return type(upstream_grad)(-lam * np.asarray(g) for g in upstream_grad)
    return -lam * np.asarray(upstream_grad, dtype=np.float64)


class UndefinedAUCError(ValueError):
    """AUC needs both classes present."""


def auc(scores, labels) -> float:
    """Mann-Whitney ROC AUC with tied scores counted as half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC is undefined with a single class present")
    ranks = rankdata(scores)  # average ranks give the half-credit for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def early_stop_score(auc_val: float, bce_val: float, gamma: float = 0.5) -> float:
    """Composite confusion score; 0 for a maximally confused classifier, lower is better."""
    return abs(auc_val - 0.5) + gamma * max(0.0, LN2 - bce_val)


@dataclass
class DomainBatch:
    X: np.ndarray
    d: np.ndarray
    source_index: np.ndarray
    target_index: np.ndarray

    @property
    def counts(self) -> tuple[int, int]:
        return int(np.sum(self.d == 0)), int(np.sum(self.d == 1))


def balanced_batches(source_X: np.ndarray, target_X: np.ndarray, batch_size: int,
                     rng: np.random.Generator) -> Iterator[DomainBatch]:
    """One epoch of half-source / half-target batches.

    Source rows are visited once per epoch in a fresh permutation; each
    batch is topped up with the same number of target rows drawn with
    replacement when the target pool is too small for the epoch, otherwise
    from a permutation (cycled as needed).
    """
    source_X = np.asarray(source_X)
    target_X = np.asarray(target_X)
    if len(source_X) == 0 or len(target_X) == 0:
        raise ValueError("both domains need at least one row")
    if batch_size < 2 or batch_size % 2:
        raise ValueError("batch_size must be an even integer >= 2")
    half = batch_size // 2
    n_batches = math.ceil(len(source_X) / half)
    src_order = rng.permutation(len(source_X))
    # the last batch reuses leading rows of a second permutation to stay full
    if n_batches * half > len(source_X):
        extra = rng.permutation(len(source_X))
        src_order = np.concatenate([src_order, np.resize(extra, n_batches * half - len(source_X))])
    needed = n_batches * half
    if len(target_X) < needed:
        tgt_order = rng.integers(0, len(target_X), size=needed)
    else:
        tgt_order = rng.permutation(len(target_X))[:needed]
    d = np.concatenate([np.zeros(half), np.ones(half)])
    for b in range(n_batches):
        si = src_order[b * half:(b + 1) * half]
        ti = tgt_order[b * half:(b + 1) * half]
        yield DomainBatch(np.concatenate([source_X[si], target_X[ti]]), d.copy(), si, ti)


def split_domain_validation(n_source: int, n_target: int, fraction: float,
                            rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    """Stratified hold-out for the alignment monitor.

    The balanced pool is every target row plus an equal number of random
    source rows; ``fraction`` of each domain in that pool is held out.
    Returns (source_train_idx, source_val_idx, target_train_idx, target_val_idx).
    """
    n_pool = min(n_source, n_target)
    n_val = max(1, int(round(fraction * n_pool)))
    if n_val >= n_target or n_val >= n_source:
        raise ValueError("not enough rows to hold out a domain validation set")
    src = rng.permutation(n_source)
    tgt = rng.permutation(n_target)
    return np.sort(src[n_val:]), np.sort(src[:n_val]), np.sort(tgt[n_val:]), np.sort(tgt[:n_val])

