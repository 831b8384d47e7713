import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphevo import gnn
from morphevo.envsim import all_assignments, make_env
from morphevo.fitness import (
    ScalingMode,
    entropy_bruteforce,
    estimate,
    exact_mi_oracle,
    inner_term,
    joint_scaling,
    oracle_from_table,
    trained_oracle,
    variance_fitness,
)
from morphevo.gnn import GraphDataset, TrainConfig
from morphevo.morphology import EMBED_DIM

from conftest import arm_chain

LN4 = math.log(4)
POWER, LOG = ScalingMode.POWER, ScalingMode.LOG_CLAMPED


@pytest.mark.parametrize(
    "k,lam,mode,expected",
    [(1, 1.0, POWER, 1.0), (2, 0.25, POWER, 2**0.25), (2, 0.25, LOG, math.log(2) ** 0.25), (1, 0.25, LOG, math.log(2) ** 0.25), (5, 0.2, LOG, math.log(5) ** 0.2)],
)
def test_joint_scaling(k, lam, mode, expected):
    assert joint_scaling(k, lam, mode) == pytest.approx(expected, abs=1e-12)


def test_joint_scaling_rejects_bad_input():
    with pytest.raises(ValueError):
        joint_scaling(0, 0.5)
    with pytest.raises(ValueError):
        joint_scaling(2, 1.5)


def test_perfect_classifier_limit():
    est = estimate(np.zeros(10), 2, 0.25, POWER)
    assert est.value == pytest.approx(2**0.25 * LN4, abs=1e-12)
    assert est.value == pytest.approx(1.6486, abs=1e-4)


@pytest.mark.parametrize("k", [1, 3, 6])
def test_uniform_classifier_is_zero(k):
    assert estimate(np.full(7, k * math.log(0.25)), k, 0.2, LOG).value == pytest.approx(0.0, abs=1e-12)


def test_invalid_episodes_are_dropped():
    a = estimate(np.array([-0.5, np.nan, -1.5, -np.inf]), 2, 0.25)
    b = estimate(np.array([-0.5, -1.5]), 2, 0.25)
    assert a == b and a.n_episodes == 2


def test_no_valid_episodes_is_minus_infinity():
    assert estimate(np.array([np.nan]), 2, 0.25).value == -math.inf
    assert estimate(np.zeros(0), 1, 0.25).value == -math.inf


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-20, 0), min_size=1, max_size=20),
    st.integers(1, 8),
    st.floats(0, 1),
    st.sampled_from([POWER, LOG]),
)
def test_fitness_is_capped_by_the_perfect_limit(sums, k, lam, mode):
    est = estimate(np.array(sums), k, lam, mode)
    assert est.mean_loglik <= 0
    assert est.value <= joint_scaling(k, lam, mode) * LN4 + 1e-12
    assert inner_term(est.value, k, lam, mode) == pytest.approx(LN4 + est.mean_loglik, abs=1e-9) or joint_scaling(k, lam, mode) == 0


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, LN4), st.floats(0.01, 1), st.integers(1, 7))
def test_power_mode_is_monotone_in_k(inner, lam, k):
    # fixed positive inner term: more joints never lowers the value
    value = lambda kk: estimate(np.array([kk * (inner - LN4)]), kk, lam, POWER).value
    assert value(k + 1) >= value(k) - 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 0), min_size=1, max_size=6))
def test_lambda_one_chance_joint_never_hurts(per_joint):
    # adding a joint the classifier predicts at chance (log 1/4) under lambda = 1
    k = len(per_joint)
    before = estimate(np.array([sum(per_joint)]), k, 1.0, POWER).value
    after = estimate(np.array([sum(per_joint) + math.log(0.25)]), k + 1, 1.0, POWER).value
    assert after >= before - 1e-12


# --- variance objective -----------------------------------------------------


def test_variance_examples():
    assert variance_fitness(np.ones((5, 2))) == 0.0
    assert variance_fitness(np.array([[0.0, 0.0], [2.0, 0.0]])) == pytest.approx(2.0)
    assert variance_fitness(np.zeros((1, 2))) == -math.inf


def test_variance_scales_quadratically(rng):
    s = rng.normal(size=(20, 3))
    assert variance_fitness(3.0 * s + 7.0) == pytest.approx(9.0 * variance_fitness(s), rel=1e-12)


def test_variance_ignores_invalid_rows():
    s = np.array([[0.0, 0.0], [np.nan, np.nan], [2.0, 0.0]])
    assert variance_fitness(s) == pytest.approx(2.0)


# --- oracles ----------------------------------------------------------------


def test_oracle_single_joint_arm():
    r = exact_mi_oracle(make_env("arm"), arm_chain([0.5]))
    assert r.outcome_count == 4
    assert r.exact_mi == pytest.approx(LN4, abs=1e-12)
    assert r.bayes_bound == pytest.approx(LN4, abs=1e-12)


def test_oracle_immobile_arm():
    r = exact_mi_oracle(make_env("arm"), arm_chain([0.5, 0.3], ranges=[0.0, 0.0]))
    assert r.outcome_count == 1
    assert r.exact_mi == pytest.approx(0.0, abs=1e-12)
    assert r.bayes_bound == pytest.approx(0.0, abs=1e-12)


def test_oracle_table_where_state_ignores_one_joint():
    acts = all_assignments(2)
    states = acts[:, :1].astype(float)
    r = oracle_from_table(acts, states)
    assert r.exact_mi == pytest.approx(LN4)
    # joint 1 is known, joint 2 is at chance
    assert r.bayes_bound == pytest.approx(LN4 / 2)


def test_oracle_table_with_modular_sum():
    # the state reveals a1 + a2 mod 4: full information about the pair, none about either joint
    acts = all_assignments(2)
    states = ((acts[:, 0] + acts[:, 1]) % 4).reshape(-1, 1).astype(float)
    r = oracle_from_table(acts, states)
    assert r.exact_mi == pytest.approx(LN4)
    assert r.bayes_bound == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("lengths", [[0.5, 0.3], [0.3, 0.3, 0.2], [0.6, 0.1]])
def test_oracle_chain_on_arms(lengths):
    env = make_env("arm")
    tree = arm_chain(lengths)
    r = exact_mi_oracle(env, tree)
    assert 0.0 <= r.bayes_bound <= r.exact_mi + 1e-12
    assert r.exact_mi <= tree.k * LN4 + 1e-12
    states = env.simulate(env.compile(tree), all_assignments(tree.k))
    assert r.exact_mi == pytest.approx(entropy_bruteforce(states), abs=1e-12)


def test_oracle_refuses_above_cap():
    with pytest.raises(ValueError, match="cap"):
        exact_mi_oracle(make_env("arm"), arm_chain([0.1] * 7))


def test_trained_estimator_reaches_single_joint_bound():
    rep = trained_oracle(make_env("arm"), arm_chain([0.5]), TrainConfig(batch_size=16, lr=3e-3), np.random.default_rng(0), epochs=150, repeats=4)
    assert rep.trained_inner <= rep.oracle.bayes_bound + 0.05
    assert rep.trained_inner >= 0.95 * rep.oracle.bayes_bound


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_immobile_morphology_scores_at_chance(seed):
    env = make_env("arm")
    tree = arm_chain([0.5, 0.3], ranges=[0.0, 0.0])
    rng = np.random.default_rng(seed)
    acts = rng.integers(4, size=(512, tree.k))
    seeds = rng.integers(0, 2**31, size=512)
    states, _ = env.rollout_batch(tree, acts, seeds)
    data = GraphDataset(env.state_dim)
    data.add_morphology(tree)
    data.add_episodes(tree.id, acts, states)
    params = gnn.reset(rng, EMBED_DIM + env.state_dim)
    params, _ = gnn.fit(params, data, TrainConfig(), rng)
    est = estimate(gnn.episode_logliks(params, data), tree.k, 0.2)
    assert abs(est.value) <= 0.05
