import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphevo import _kernels
from morphevo.envsim import (
    CONSTANT_PRIMITIVES,
    COSINE_PRIMITIVES,
    ActionPrimitive,
    EpisodeRecord,
    PrimitiveKind,
    RolloutError,
    all_assignments,
    enumerate_outcomes,
    make_env,
    primitive_signal,
    read_episodes,
    rollout,
    sample_assignment,
    sample_assignments,
    write_episode,
    write_episode_header,
)
from morphevo.morphology import EnvClass, sample_random

from conftest import arm_chain, crawler


def cos_prim(f, phi):
    return ActionPrimitive(PrimitiveKind.COSINE, frequency=f, phase=phi)


@pytest.mark.parametrize(
    "prim,t,expected",
    [(cos_prim(math.pi / 30, 0.0), 0, 1.0), (cos_prim(math.pi / 30, math.pi), 0, -1.0), (cos_prim(math.pi / 15, 0.0), 15, -1.0)],
)
def test_cosine_primitive_values(prim, t, expected):
    assert primitive_signal(prim, t) == pytest.approx(expected, abs=1e-12)


def test_constant_primitive_ignores_time():
    p = CONSTANT_PRIMITIVES[0]
    assert {primitive_signal(p, t) for t in range(50)} == {-1.0}


def test_vocabularies():
    assert [p.torque for p in CONSTANT_PRIMITIVES] == [-1.0, -0.5, 0.5, 1.0]
    assert sorted((p.frequency, p.phase) for p in COSINE_PRIMITIVES) == sorted(
        (f, ph) for f in (math.pi / 30, math.pi / 15) for ph in (0.0, math.pi)
    )


# --- arm closed forms -------------------------------------------------------


@pytest.mark.parametrize("action,sign", [(3, 1.0), (0, -1.0)])
def test_arm_saturates_at_joint_limit(action, sign):
    # gear = gear_max, u = +-1: the drive pushes far past 90 degrees within 100 steps
    env = make_env("arm")
    tree = arm_chain([0.75], ranges=[90.0], gear=80.0)
    s = rollout(env, tree, [action], noise_std=0.0).values
    th = math.radians(90.0)
    assert s == pytest.approx([0.75 * math.cos(th), sign * 0.75 * math.sin(th)], abs=1e-12)


@pytest.mark.parametrize("action,u", [(1, -0.5), (2, 0.5), (3, 1.0)])
def test_arm_unclamped_geometric_series(action, u):
    # theta_n = (g u / c) (1 - (1 - dt c)^n) while inside the limits
    env = make_env("arm")
    gear = 72.0
    tree = arm_chain([0.6], ranges=[175.0], gear=gear)
    g = gear / 80.0
    theta = g * u / 0.1 * (1 - (1 - 0.02 * 0.1) ** 100)
    assert abs(theta) < math.radians(175.0)
    s = rollout(env, tree, [action], noise_std=0.0).values
    assert s == pytest.approx([0.6 * math.cos(theta), 0.6 * math.sin(theta)], abs=1e-10)


def test_two_link_arm_matches_planar_kinematics():
    env = make_env("arm")
    tree = arm_chain([0.5, 0.3], ranges=[175.0, 175.0], gear=80.0)
    a = 10 * (1 - 0.998**100)
    th1, th2 = a * 0.5, -a * 1.0  # primitives 2 (+0.5) and 0 (-1)
    th2 = max(th2, -math.radians(175.0))
    expected = [0.5 * math.cos(th1) + 0.3 * math.cos(th1 + th2), 0.5 * math.sin(th1) + 0.3 * math.sin(th1 + th2)]
    assert rollout(env, tree, [2, 0], noise_std=0.0).values == pytest.approx(expected, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 100))
def test_arm_reachability_bound(seed, steps):
    rng = np.random.default_rng(seed)
    env = make_env("arm")
    tree = sample_random(rng, EnvClass.ARM)
    acts = sample_assignments(tree.k, 8, rng)
    states = env.simulate(env.compile(tree), acts, episode_len=steps)
    reach = sum(n.extent[0] for n in tree.nodes)
    assert np.all(np.hypot(states[:, 0], states[:, 1]) <= reach + 1e-12)


# --- determinism, noise, dimensions ----------------------------------------


def test_rollout_is_deterministic_under_seed():
    env = make_env("arm")
    tree = arm_chain([0.5, 0.4])
    a = rollout(env, tree, [1, 2], rng=7)
    b = rollout(env, tree, [1, 2], rng=np.random.default_rng(7))
    assert np.array_equal(a.values, b.values) and a.noise_applied


def test_noise_is_applied_once_with_stated_std():
    env = make_env("arm")
    tree = arm_chain([0.5])
    clean = rollout(env, tree, [3], noise_std=0.0).values
    diffs = np.array([rollout(env, tree, [3], rng=s).values - clean for s in range(4000)])
    assert diffs.std() == pytest.approx(0.2, rel=0.05)
    assert abs(diffs.mean()) < 0.01


def test_batch_and_single_rollouts_agree():
    env = make_env("locomotion2d")
    tree = sample_random(np.random.default_rng(4), EnvClass.LOCOMOTION2D)
    rng = np.random.default_rng(5)
    acts = sample_assignments(tree.k, 6, rng)
    seeds = [11, 12, 13, 14, 15, 16]
    states, valid = env.rollout_batch(tree, acts, seeds)
    assert valid.all()
    for a, s, row in zip(acts, seeds, states):
        assert np.array_equal(rollout(env, tree, a, rng=s).values, row)


@pytest.mark.parametrize("name,dim", [("arm", 2), ("arm_push", 2), ("locomotion2d", 6)])
def test_state_dimension_is_fixed(name, dim):
    env = make_env(name)
    rng = np.random.default_rng(0)
    for _ in range(10):
        tree = sample_random(rng, env.env_class)
        s = rollout(env, tree, sample_assignment(tree.k, rng), rng=rng)
        assert s.dim == dim == env.state_dim


def test_episode_lengths():
    assert {n: make_env(n).episode_len for n in ("arm", "arm_push", "locomotion2d")} == {
        "arm": 100, "arm_push": 125, "locomotion2d": 350,
    }


def test_wrong_assignment_length_is_rejected():
    with pytest.raises(ValueError):
        rollout(make_env("arm"), arm_chain([0.5]), [0, 1])


def test_diverged_rollout_raises():
    env = make_env("arm", dt=float("nan"))
    with pytest.raises(RolloutError):
        rollout(env, arm_chain([0.5]), [3], noise_std=0.0)


def test_diverged_batch_rows_are_flagged():
    env = make_env("arm", dt=float("nan"))
    states, valid = env.rollout_batch(arm_chain([0.5]), np.array([[3], [1]]), noise_std=0.0)
    assert not valid.any() and np.isnan(states).all()


# --- crawler ----------------------------------------------------------------


def test_crawler_immobile_body_stays_put():
    env = make_env("locomotion2d")
    tree = crawler({0: [1]}, [(0.4, 0, 0), (0.0, 0, -0.3)], ranges=[0.0, 0.0])
    out = env.simulate(env.compile(tree), all_assignments(1))
    assert np.all(out == out[0])
    assert out[0, 0] == 0.0
    # the lowest capsule bottom rests on the ground
    assert out[0, 1] == pytest.approx(0.3 + 0.05)


def test_crawler_moves_and_depends_on_primitive():
    env = make_env("locomotion2d")
    tree = crawler({0: [1, 2]}, [(0.5, 0, 0), (0.0, 0, -0.3), (0.0, 0, -0.3)], ranges=[50.0, 60.0, 60.0], attach={1: 0.0, 2: 1.0})
    out = env.simulate(env.compile(tree), all_assignments(2))
    assert np.all(np.isfinite(out))
    assert np.ptp(out[:, 0]) > 1e-3  # root x differs across gaits
    assert len(np.unique(np.round(out, 9), axis=0)) > 1
    assert np.all(out[:, 4:] >= 0)


# --- numba vs numpy ---------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["arm", "locomotion2d"]))
def test_numba_and_numpy_kernels_agree(seed, name):
    rng = np.random.default_rng(seed)
    env = make_env(name, episode_len=60)
    tree = sample_random(rng, env.env_class)
    b = env.compile(tree)
    acts = sample_assignments(tree.k, 5, rng)
    args = (b.parent, b.joint, b.attach, b.ext, b.radius, b.limit, b.gain, env._table, acts,
            env.episode_len, env.crawler, env.dt, env.damping, env.anchor_tol)
    fast = _kernels.simulate_batch_numba(*args)
    slow = _kernels.simulate_batch_numpy(*args)
    np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-12)


# --- assignments and enumeration -------------------------------------------


def test_assignment_uniformity():
    rng = np.random.default_rng(99)
    draws = np.array([sample_assignment(1, rng)[0] for _ in range(40_000)])
    freq = np.bincount(draws, minlength=4) / len(draws)
    assert np.all(np.abs(freq - 0.25) <= 0.015)


def test_assignment_shapes_and_shared_mode(rng):
    assert sample_assignment(3, rng).shape == (3,)
    for _ in range(50):
        a = sample_assignment(5, rng, shared=True)
        assert len(set(a.tolist())) == 1
    batch = sample_assignments(4, 100, rng, shared=True)
    assert np.all(batch == batch[:, :1])


def test_enumeration_sizes_and_consistency():
    env = make_env("arm")
    assert len(enumerate_outcomes(env, arm_chain([0.5]))) == 4
    tree = arm_chain([0.5, 0.3])
    table = enumerate_outcomes(env, tree)
    assert len(table) == 16
    for a, s in table.items():
        assert np.array_equal(rollout(env, tree, a, noise_std=0.0).values, s)


def test_enumeration_of_immobile_tree_is_constant():
    env = make_env("arm")
    table = enumerate_outcomes(env, arm_chain([0.5, 0.3], ranges=[0.0, 0.0]))
    vals = np.array(list(table.values()))
    assert np.all(vals == vals[0])


def test_enumeration_cap():
    with pytest.raises(ValueError, match="cap"):
        enumerate_outcomes(make_env("arm"), arm_chain([0.2] * 7))


# --- episode log ------------------------------------------------------------


def test_episode_log_round_trip_and_replay():
    env = make_env("arm")
    tree = arm_chain([0.5, 0.3], tree_id=4)
    recs = []
    for seed, a in enumerate([(0, 1), (3, 3), (2, 0)]):
        s = rollout(env, tree, a, rng=seed)
        recs.append(EpisodeRecord(tree.id, a, tuple(s.values.tolist()), seed, True, True))
    buf = io.StringIO()
    write_episode_header(buf)
    for r in recs:
        write_episode(buf, r)
    buf.seek(0)
    back = list(read_episodes(buf))
    assert back == recs
    for r in back:
        assert tuple(rollout(env, tree, r.assignment, rng=r.seed).values.tolist()) == r.state


def test_episode_log_rejects_foreign_header():
    with pytest.raises(ValueError):
        list(read_episodes(io.StringIO('{"format": "other", "version": 1}\n')))


def test_env_switch_selects_numpy_backend():
    import os
    import subprocess
    import sys

    code = (
        "from morphevo import _accel, envsim; from morphevo.morphology import EnvClass, sample_random; import numpy as np;"
        "env = envsim.make_env('arm'); t = sample_random(np.random.default_rng(0), EnvClass.ARM);"
        "print(_accel.backend(), env.simulate(env.compile(t), envsim.all_assignments(t.k)).tobytes().hex())"
    )
    outs = {}
    for flag in ("0", "1"):
        proc = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True,
                              env={**os.environ, "MORPHEVO_NUMBA": flag})
        name, data = proc.stdout.split()
        outs[name] = data
    assert set(outs) == {"numpy", "numba"}
    a, b = (np.frombuffer(bytes.fromhex(outs[n])) for n in ("numpy", "numba"))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
