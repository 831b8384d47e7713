"""Task-agnostic fitness, the variance baseline objective, and exact oracles.

Fitness of a morphology with ``k`` actuated joints and ``|A|`` primitives per
joint is

    scale(k) * (log|A| + mean over episodes of (1/k) * sum_j log q(a_j | s_T, m))

where ``scale`` is ``k**lam`` (power) or ``log(max(k, 2))**lam`` (log_clamped).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .envsim import DEFAULT_ENUM_CAP, Environment, all_assignments
from . import gnn
from .gnn import TrainConfig
from .morphology import EMBED_DIM, MorphologyTree

NEG_INF = float("-inf")
BUCKET = 1e-9


class ScalingMode(str, Enum):
    POWER = "power"
    LOG_CLAMPED = "log_clamped"


def joint_scaling(k: int, lam: float, mode=ScalingMode.LOG_CLAMPED) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if ScalingMode(mode) == ScalingMode.POWER:
        return float(k) ** lam
    return math.log(max(k, 2)) ** lam


@dataclass(frozen=True)
class FitnessEstimate:
    value: float
    k: int
    mean_loglik: float  # per joint, averaged over episodes
    lam: float
    scaling_mode: ScalingMode
    n_episodes: int = 0


def estimate(
    loglik_sums: np.ndarray,
    k: int,
    lam: float,
    mode=ScalingMode.LOG_CLAMPED,
    n_primitives: int = 4,
) -> FitnessEstimate:
    """Fitness from per-episode summed joint log-likelihoods of one morphology.

    Non-finite entries (diverged rollouts) are dropped; with nothing left the
    value is -inf.
    """
    mode = ScalingMode(mode)
    sums = np.asarray(loglik_sums, dtype=np.float64).reshape(-1)
    sums = sums[np.isfinite(sums)]
    if len(sums) == 0:
        return FitnessEstimate(NEG_INF, k, NEG_INF, lam, mode, 0)
    mean_loglik = float(sums.mean()) / k
    value = joint_scaling(k, lam, mode) * (math.log(n_primitives) + mean_loglik)
    return FitnessEstimate(value, k, mean_loglik, lam, mode, len(sums))


def variance_fitness(states: np.ndarray) -> float:
    """Trace of the unbiased sample covariance of terminal states."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states.reshape(-1, 1)
    states = states[np.all(np.isfinite(states), axis=1)]
    if len(states) < 2:
        return NEG_INF
    return float(states.var(axis=0, ddof=1).sum())


# ---------------------------------------------------------------------------
# oracles


@dataclass(frozen=True)
class OracleResult:
    exact_mi: float  # nats
    bayes_bound: float  # per-joint inner term under the true posteriors
    outcome_count: int  # distinct terminal states
    k: int


def _bucket_ids(states: np.ndarray, resolution: float = BUCKET) -> np.ndarray:
    keys = np.round(np.asarray(states, dtype=np.float64) / resolution).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return inverse.reshape(-1)


def oracle_from_table(assignments: np.ndarray, states: np.ndarray, n_primitives: int = 4, resolution: float = BUCKET) -> OracleResult:
    """Exact quantities for a deterministic map from uniformly drawn assignments to states.

    ``assignments`` must list every assignment exactly once.
    """
    assignments = np.asarray(assignments, dtype=np.int64)
    total, k = assignments.shape
    bucket = _bucket_ids(states, resolution)
    n_buckets = int(bucket.max()) + 1
    p_state = np.bincount(bucket, minlength=n_buckets) / total
    exact_mi = float(-(p_state * np.log(p_state)).sum())

    expected = 0.0
    for j in range(k):
        counts = np.zeros((n_buckets, n_primitives))
        np.add.at(counts, (bucket, assignments[:, j]), 1.0)
        post = counts / counts.sum(axis=1, keepdims=True)
        expected += float(np.log(post[bucket, assignments[:, j]]).mean())
    bayes = math.log(n_primitives) + expected / k
    return OracleResult(exact_mi=exact_mi, bayes_bound=bayes, outcome_count=n_buckets, k=k)


def exact_mi_oracle(env: Environment, tree: MorphologyTree, cap: int = DEFAULT_ENUM_CAP) -> OracleResult:
    """Enumerate every assignment noise-free and compute I(S_T; A) and the per-joint Bayes bound."""
    total = env.n_primitives ** tree.k
    if total > cap:
        raise ValueError(f"{env.n_primitives}^{tree.k} = {total} outcomes exceeds the enumeration cap {cap}")
    acts = all_assignments(tree.k, env.n_primitives)
    states = env.simulate(env.compile(tree), acts)
    return oracle_from_table(acts, states, env.n_primitives)


@dataclass(frozen=True)
class OracleReport:
    oracle: OracleResult
    trained_inner: float  # estimator's inner term after fitting on the enumeration
    final_loss: float

    @property
    def gap_to_bayes(self) -> float:
        return self.oracle.bayes_bound - self.trained_inner

    @property
    def gap_to_mi(self) -> float:
        return self.oracle.exact_mi - self.trained_inner


def trained_oracle(
    env: Environment,
    tree: MorphologyTree,
    train: Optional[TrainConfig] = None,
    rng: Optional[np.random.Generator] = None,
    epochs: int = 300,
    repeats: int = 8,
    cap: int = DEFAULT_ENUM_CAP,
) -> OracleReport:
    """Fit a fresh classifier on the noise-free enumeration and compare it with the oracle.

    Every assignment appears ``repeats`` times in the training set, and the
    inner term is evaluated on the enumeration itself, i.e. under the same
    uniform action distribution the Bayes bound uses.
    """
    train = train or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    oracle = exact_mi_oracle(env, tree, cap)
    acts = all_assignments(tree.k, env.n_primitives)
    states = env.simulate(env.compile(tree), acts)
    data = gnn.GraphDataset(env.state_dim)
    data.add_morphology(tree)
    data.add_episodes(tree.id, np.tile(acts, (repeats, 1)), np.tile(states, (repeats, 1)))
    params = gnn.reset(rng, EMBED_DIM + env.state_dim, train.hidden, train.depth, env.n_primitives, train.dtype)
    params, hist = gnn.fit(params, data, train, rng, epochs=epochs)
    sums = gnn.episode_logliks(params, data, np.arange(len(acts)))
    inner = math.log(env.n_primitives) + float(sums.mean()) / tree.k
    return OracleReport(oracle, inner, float(hist[-1]))


def entropy_bruteforce(states: np.ndarray, resolution: float = BUCKET) -> float:
    """Entropy of an equally weighted list of states, via a plain dictionary count."""
    counts: dict[tuple, int] = {}
    for s in np.asarray(states, dtype=np.float64):
        key = tuple(int(round(v / resolution)) for v in s)
        counts[key] = counts.get(key, 0) + 1
    n = len(states)
    return -sum(c / n * math.log(c / n) for c in counts.values())


def inner_term(value: float, k: int, lam: float, mode=ScalingMode.LOG_CLAMPED) -> Optional[float]:
    """Undo the joint scaling: the ``log|A| + mean_loglik`` part of a fitness value."""
    s = joint_scaling(k, lam, mode)
    return None if s == 0 else value / s
