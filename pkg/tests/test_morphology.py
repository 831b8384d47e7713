import itertools
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphevo.morphology import (
    EMBED_DIM,
    DocumentError,
    EnvClass,
    JointType,
    MutationParams,
    actuated_joints,
    canonicalize,
    collisions,
    default_limits,
    default_mutation,
    deserialize,
    from_document,
    mutate,
    mutate_checked,
    sample_random,
    segment_distance,
    serialize,
    to_document,
    to_line_graph,
    validate,
)

from conftest import arm_chain, crawler

LOCO = EnvClass.LOCOMOTION2D


def _brute_segment_distance(p0, p1, q0, q1, n=401):
    s = np.linspace(0, 1, n)
    a = np.asarray(p0) + s[:, None] * (np.asarray(p1) - np.asarray(p0))
    b = np.asarray(q0) + s[:, None] * (np.asarray(q1) - np.asarray(q0))
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)).min()


# --- sampling ---------------------------------------------------------------


def test_sample_is_deterministic_under_seed():
    a = sample_random(np.random.default_rng(7), LOCO)
    b = sample_random(np.random.default_rng(7), LOCO)
    assert serialize(a) == serialize(b)


@pytest.mark.parametrize("env_class", [EnvClass.LOCOMOTION2D, EnvClass.ARM])
def test_samples_are_valid(env_class, rng):
    limits = default_limits(env_class)
    for _ in range(200):
        t = sample_random(rng, env_class, limits)
        assert validate(t, limits) == []
        assert 1 <= t.k and t.n_limbs <= limits.max_limbs


def test_single_limb_arm(rng):
    limits = default_limits(EnvClass.ARM, max_limbs=1)
    for _ in range(20):
        t = sample_random(rng, EnvClass.ARM, limits)
        assert t.n_limbs == 1 and t.k == 1
        (j,) = t.joints
        assert j.joint_type == JointType.HINGE_Z and j.attachment == 0.0


def test_root_growth_frequency():
    # second root slot is a Bernoulli(0.3) trial (the first child is always grown)
    rng = np.random.default_rng(2024)
    n = 10_000
    hits = sum(len(t.children(t.root().id)) == 2 for t in (sample_random(rng, LOCO) for _ in range(n)))
    assert abs(hits / n - 0.3) <= 0.02


def test_arm_limb_count_is_roughly_uniform():
    rng = np.random.default_rng(3)
    counts = np.bincount([sample_random(rng, EnvClass.ARM).n_limbs for _ in range(800)], minlength=5)[1:]
    assert np.all(np.abs(counts / 800 - 0.25) < 0.06)


# --- mutation ---------------------------------------------------------------


def test_growth_saturates_at_max_limbs(rng):
    t = sample_random(rng, EnvClass.ARM, default_limits(EnvClass.ARM, 1))
    params = replace(default_mutation(EnvClass.ARM), grow_prob=1.0, delete_prob=0.0)
    for _ in range(50):
        assert mutate(t, rng, params, default_limits(EnvClass.ARM, 1)).n_limbs == 1


def test_root_is_never_deleted(rng):
    t = arm_chain([0.5])
    params = MutationParams(grow_prob=0.0, delete_prob=1.0)
    for _ in range(50):
        m = mutate(t, rng, params)
        assert m.n_limbs == 1 and m.k == 1


def test_mutation_keeps_ids_canonical(rng):
    t = sample_random(rng, LOCO)
    m = mutate(t, rng, tree_id=99)
    assert m.id == 99
    assert [n.id for n in m.nodes] == list(range(m.n_limbs))
    assert canonicalize(m) == m


def test_failed_mutation_returns_parent_flagged(rng):
    # a tree that is already invalid can never yield a valid child
    bad = arm_chain([0.5], radius=0.01)
    child, ok = mutate_checked(bad, rng, MutationParams(geom_prob=0.0, joint_prob=0.0, grow_prob=0.0))
    assert not ok and child is bad


def test_joint_count_change_frequency():
    # fixed 4-limb body: root with two children, one grandchild; wide spread so growth never collides
    t = crawler({0: [1, 2], 1: [3]}, [(0.6, 0, 0), (0.0, 0, 0.4), (0.0, 0, -0.4), (0.3, 0, 0)], attach={1: 0.2, 2: 0.9})
    limits = default_limits(LOCO)
    assert validate(t, limits) == []
    params = replace(default_mutation(LOCO), geom_prob=0.0, joint_prob=0.0)
    slots = sum(len(t.children(n.id)) < n.max_children for n in t.nodes)
    # leaves 2 and 3 stay leaves unless grown; the deletion pass sees the grown tree
    rng = np.random.default_rng(5)
    n = 10_000
    same = 0
    for _ in range(n):
        same += mutate(t, rng, params, limits).k == t.k
    # k is unchanged iff the deletion pass removes exactly as many leaves as the
    # growth pass added; enumerate growth outcomes over the open limbs 1, 2, 3
    g, d = params.grow_prob, params.delete_prob
    p_same = 0.0
    open_nodes = [n_.id for n_ in t.nodes if len(t.children(n_.id)) < n_.max_children]
    for grown in itertools.product([0, 1], repeat=len(open_nodes)):
        pg = math.prod(g if x else 1 - g for x in grown)
        grown_ids = {nid for nid, x in zip(open_nodes, grown) if x}
        leaves = [nid for nid in (2, 3) if nid not in grown_ids] + [None] * len(grown_ids)
        n_leaves = len(leaves)
        need = len(grown_ids)
        if need > n_leaves:
            continue
        pd = math.comb(n_leaves, need) * d**need * (1 - d) ** (n_leaves - need)
        p_same += pg * pd
    assert slots == len(open_nodes) == 3
    assert abs(same / n - p_same) <= 0.02


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([EnvClass.LOCOMOTION2D, EnvClass.ARM]))
def test_mutate_preserves_validity(seed, env_class):
    rng = np.random.default_rng(seed)
    limits = default_limits(env_class)
    t = sample_random(rng, env_class, limits)
    for _ in range(5):
        t = mutate(t, rng, limits=limits)
        assert validate(t, limits) == []


def test_mutation_is_deterministic():
    t = sample_random(np.random.default_rng(1), LOCO)
    a = mutate(t, np.random.default_rng(2))
    b = mutate(t, np.random.default_rng(2))
    assert a == b


# --- validation -------------------------------------------------------------


def test_coincident_siblings_collide():
    t = crawler({0: [1, 2]}, [(0.4, 0, 0), (0.3, 0, 0), (0.3, 0, 0)])
    assert (1, 2) in collisions(t)
    assert any("collide" in v for v in validate(t))


def test_parent_child_overlap_is_exempt():
    t = crawler({0: [1]}, [(0.4, 0, 0), (-0.3, 0, 0)])
    assert collisions(t) == []


def test_small_radius_is_a_bounds_violation():
    t = crawler({0: [1]}, [(0.4, 0, 0), (0.0, 0, 0.3)], radius=0.02)
    v = validate(t)
    assert any("radius" in s for s in v)


def test_validate_reports_all_violations():
    t = crawler({0: [1]}, [(0.4, 0.1, 0), (0.0, 0, 0.3)], ranges=[50.0, 10.0], radius=0.02)
    v = validate(t)
    assert len(v) >= 3  # radius x2, y extent, joint range


def test_arm_limb_must_lie_along_x():
    t = arm_chain([0.5])
    bad = replace(t, nodes=(replace(t.nodes[0], extent=(0.5, 0.1, 0.0)),))
    assert validate(bad)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=12, max_size=12))
def test_segment_distance_matches_dense_sampling(xs):
    p0, p1, q0, q1 = (xs[0:3], xs[3:6], xs[6:9], xs[9:12])
    assert segment_distance(p0, p1, q0, q1) <= _brute_segment_distance(p0, p1, q0, q1) + 1e-9
    assert segment_distance(p0, p1, q0, q1) >= _brute_segment_distance(p0, p1, q0, q1) - 1e-2


# --- line graph -------------------------------------------------------------


def test_line_graph_of_chain():
    g = to_line_graph(crawler({0: [1], 1: [2]}, [(0.4, 0, 0), (0.3, 0, 0), (0.3, 0, 0.2)]))
    assert g.n_nodes == 2 and g.edges == ((0, 1),)


def test_line_graph_star_is_triangle():
    # three joints sharing one limb (root of a 3-child body, or a limb with a parent and two children)
    t = crawler({0: [1], 1: [2, 3]}, [(0.4, 0, 0), (0.3, 0, 0), (0.0, 0, 0.3), (0.0, 0, -0.3)])
    g = to_line_graph(t)
    assert g.n_nodes == 3 and set(g.edges) == {(0, 1), (0, 2), (1, 2)}


def test_line_graph_single_joint():
    g = to_line_graph(arm_chain([0.5]))
    assert g.n_nodes == 1 and g.edges == ()
    assert g.embeddings.shape == (1, EMBED_DIM)
    # the base joint has no parent limb: zero-padded
    assert np.all(g.embeddings[0, :5] == 0)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([EnvClass.LOCOMOTION2D, EnvClass.ARM]))
def test_line_graph_edge_count_formula(seed, env_class):
    t = sample_random(np.random.default_rng(seed), env_class)
    g = to_line_graph(t)
    assert g.n_nodes == t.k
    deg = {n.id: 0 for n in t.nodes}
    for j in actuated_joints(t):
        deg[j.child_id] += 1
        p = t.node(j.child_id).parent
        if p is not None:
            deg[p] += 1
    assert len(g.edges) == sum(math.comb(d, 2) for d in deg.values())
    # brute-force adjacency: joints share a limb
    js = actuated_joints(t)
    limbs = [{j.child_id, t.node(j.child_id).parent} - {None} for j in js]
    brute = {(a, b) for a, b in itertools.combinations(range(len(js)), 2) if limbs[a] & limbs[b]}
    assert set(g.edges) == brute


# --- documents --------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([EnvClass.LOCOMOTION2D, EnvClass.ARM]))
def test_document_round_trip(seed, env_class):
    t = sample_random(np.random.default_rng(seed), env_class, tree_id=seed % 1000)
    text = serialize(t)
    assert deserialize(text) == t
    assert serialize(deserialize(text)) == text


def test_cycle_is_a_parse_error():
    doc = to_document(crawler({0: [1], 1: [2]}, [(0.4, 0, 0), (0.3, 0, 0), (0.3, 0, 0.2)]))
    doc["nodes"][1]["parent"] = 2
    with pytest.raises(DocumentError, match="cycle"):
        from_document(doc)


def test_missing_gear_names_the_field():
    doc = to_document(arm_chain([0.5]))
    del doc["joints"][0]["gear"]
    with pytest.raises(DocumentError) as exc:
        deserialize(json.dumps(doc))
    assert exc.value.location == "joints[0].gear"


def test_malformed_json_reports_position():
    with pytest.raises(DocumentError, match="line 1"):
        deserialize("{not json")
