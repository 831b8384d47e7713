"""Tree-structured morphology genotype.

A morphology is a tree of capsule limbs (vertices) joined by joints (edges).
Everything here is immutable and a pure function of its inputs plus an explicit
``numpy.random.Generator``.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

SCHEMA = "morphevo/morphology"
SCHEMA_VERSION = 1

# per-limb embedding: radius, extent xyz, attachment fraction of the incoming joint
LIMB_EMBED_DIM = 5
# per-joint embedding: one-hot joint type (3), range in radians, gear / GEAR_SCALE
JOINT_EMBED_DIM = 5
EMBED_DIM = 2 * LIMB_EMBED_DIM + JOINT_EMBED_DIM
GEAR_SCALE = 100.0
OVERLAP_TOL = 1e-6
# geometry redraws per limb while sampling, before the placement restarts
SAMPLE_RETRIES = 20


class EnvClass(str, Enum):
    LOCOMOTION2D = "locomotion2d"
    ARM = "arm"


class JointType(str, Enum):
    HINGE_Y = "hinge_y"
    HINGE_Z = "hinge_z"
    FIXED = "fixed"


_JOINT_TYPES = (JointType.HINGE_Y, JointType.HINGE_Z, JointType.FIXED)


class MorphologyError(ValueError):
    pass


class SamplingError(MorphologyError):
    """Rejection sampling ran out of attempts."""


class DocumentError(MorphologyError):
    """Malformed morphology document. ``location`` names the offending field."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


@dataclass(frozen=True)
class LimbNode:
    id: int
    parent: Optional[int]
    radius: float
    extent: tuple[float, float, float]
    max_children: int


@dataclass(frozen=True)
class JointSpec:
    child_id: int
    joint_type: JointType
    attachment: float
    range: float  # degrees, symmetric half-range
    gear: float


@dataclass(frozen=True)
class MorphologyTree:
    nodes: tuple[LimbNode, ...]
    joints: tuple[JointSpec, ...]
    env_class: EnvClass
    id: int = 0

    @property
    def n_limbs(self) -> int:
        return len(self.nodes)

    @property
    def k(self) -> int:
        """Number of actuated (non-fixed) joints."""
        return sum(1 for j in self.joints if j.joint_type != JointType.FIXED)

    def node(self, node_id: int) -> LimbNode:
        return self.nodes[self._index()[node_id]]

    def children(self, node_id: int) -> list[int]:
        return [n.id for n in self.nodes if n.parent == node_id]

    def joint_into(self, node_id: int) -> Optional[JointSpec]:
        for j in self.joints:
            if j.child_id == node_id:
                return j
        return None

    def root(self) -> LimbNode:
        return next(n for n in self.nodes if n.parent is None)

    def _index(self) -> dict[int, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    def with_id(self, tree_id: int) -> "MorphologyTree":
        return replace(self, id=int(tree_id))


@dataclass(frozen=True)
class MorphologyLimits:
    env_class: EnvClass
    max_limbs: int
    grow_prob: float
    radius: tuple[float, float]
    extent_max: float
    min_length: float
    joint_range: tuple[float, float]
    gear: tuple[float, float]
    max_children: int
    joint_type: JointType
    allow_fixed: bool = False

    @property
    def gear_max(self) -> float:
        return self.gear[1]


@dataclass(frozen=True)
class MutationParams:
    geom_prob: float = 0.14
    joint_prob: float = 0.07
    length_std: float = 0.125
    # std of other perturbed parameters, as a fraction of their allowed span
    rel_std: float = 0.125
    grow_prob: float = 0.1
    delete_prob: float = 0.08
    retries: int = 20


def default_limits(env_class, max_limbs: Optional[int] = None) -> MorphologyLimits:
    env_class = EnvClass(env_class)
    if env_class == EnvClass.LOCOMOTION2D:
        return MorphologyLimits(
            env_class=env_class,
            max_limbs=8 if max_limbs is None else max_limbs,
            grow_prob=0.3,
            radius=(0.035, 0.07),
            extent_max=0.75,
            min_length=0.1,
            joint_range=(30.0, 70.0),
            gear=(50.0, 100.0),
            max_children=2,
            joint_type=JointType.HINGE_Y,
        )
    return MorphologyLimits(
        env_class=env_class,
        max_limbs=4 if max_limbs is None else max_limbs,
        grow_prob=0.2,
        radius=(0.04, 0.07),
        extent_max=0.75,
        min_length=0.1,
        joint_range=(90.0, 175.0),
        gear=(70.0, 80.0),
        max_children=1,
        joint_type=JointType.HINGE_Z,
    )


def default_mutation(env_class) -> MutationParams:
    if EnvClass(env_class) == EnvClass.ARM:
        return MutationParams(grow_prob=0.2, delete_prob=0.2)
    return MutationParams()


# ---------------------------------------------------------------------------
# geometry


def rest_segments(tree: MorphologyTree) -> tuple[np.ndarray, np.ndarray]:
    """Start and end points (n, 3) of every limb capsule at the rest pose, in node order."""
    idx = tree._index()
    starts = np.zeros((len(tree.nodes), 3))
    ends = np.zeros((len(tree.nodes), 3))
    for i in _bfs_indices(tree):
        node = tree.nodes[i]
        if node.parent is not None:
            p = idx[node.parent]
            joint = tree.joint_into(node.id)
            a = joint.attachment if joint is not None else 1.0
            starts[i] = starts[p] + a * (ends[p] - starts[p])
        ends[i] = starts[i] + np.asarray(node.extent, dtype=float)
    return starts, ends


def _dot(u, v):
    return u[0] * v[0] + u[1] * v[1] + u[2] * v[2]


def segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between segments [p0, p1] and [q0, q1] in 3D."""
    d1 = (p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2])
    d2 = (q1[0] - q0[0], q1[1] - q0[1], q1[2] - q0[2])
    r = (p0[0] - q0[0], p0[1] - q0[1], p0[2] - q0[2])
    a = _dot(d1, d1)
    e = _dot(d2, d2)
    f = _dot(d2, r)
    eps = 1e-15
    if a <= eps and e <= eps:
        return math.sqrt(_dot(r, r))
    if a <= eps:
        s, t = 0.0, min(max(f / e, 0.0), 1.0)
    else:
        c = _dot(d1, r)
        if e <= eps:
            t, s = 0.0, min(max(-c / a, 0.0), 1.0)
        else:
            b = _dot(d1, d2)
            denom = a * e - b * b
            s = min(max((b * f - c * e) / denom, 0.0), 1.0) if denom > eps else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t, s = 0.0, min(max(-c / a, 0.0), 1.0)
            elif t > 1.0:
                t, s = 1.0, min(max((b - c) / a, 0.0), 1.0)
    w = [r[i] + d1[i] * s - d2[i] * t for i in range(3)]
    return math.sqrt(_dot(w, w))


def collisions(tree: MorphologyTree, only: Optional[Iterable[int]] = None) -> list[tuple[int, int]]:
    """Pairs of node ids whose capsules overlap at rest; parent/child pairs are exempt."""
    starts, ends = rest_segments(tree)
    starts, ends = starts.tolist(), ends.tolist()
    ids = [n.id for n in tree.nodes]
    parent = {n.id: n.parent for n in tree.nodes}
    radius = [n.radius for n in tree.nodes]
    focus = None if only is None else set(only)
    hits = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            a, b = ids[i], ids[j]
            if focus is not None and a not in focus and b not in focus:
                continue
            if parent[a] == b or parent[b] == a:
                continue
            d = segment_distance(starts[i], ends[i], starts[j], ends[j])
            if d < radius[i] + radius[j] - OVERLAP_TOL:
                hits.append((a, b))
    return hits


# ---------------------------------------------------------------------------
# validation


def validate(tree: MorphologyTree, limits: Optional[MorphologyLimits] = None) -> list[str]:
    """Return every invariant violation; an empty list means the tree is valid."""
    limits = limits or default_limits(tree.env_class)
    out: list[str] = []
    if tree.env_class != limits.env_class:
        out.append(f"env_class {tree.env_class.value} does not match limits {limits.env_class.value}")
    if not tree.nodes:
        return out + ["tree has no limbs"]

    ids = [n.id for n in tree.nodes]
    if len(set(ids)) != len(ids):
        out.append("duplicate limb ids")
    id_set = set(ids)
    roots = [n for n in tree.nodes if n.parent is None]
    if len(roots) != 1:
        out.append(f"expected a single root, found {len(roots)}")
    for n in tree.nodes:
        if n.parent is not None and n.parent not in id_set:
            out.append(f"limb {n.id}: unknown parent {n.parent}")
    if len(roots) == 1 and not out:
        seen = set(tree.nodes[i].id for i in _bfs_indices(tree))
        if seen != id_set:
            out.append("parent links do not form a connected tree")
    if out:
        return out

    if len(tree.nodes) > limits.max_limbs:
        out.append(f"{len(tree.nodes)} limbs exceeds max {limits.max_limbs}")
    lo, hi = limits.radius
    emax = limits.extent_max + 1e-12
    for n in tree.nodes:
        if not lo - 1e-12 <= n.radius <= hi + 1e-12:
            out.append(f"limb {n.id}: radius {n.radius} outside [{lo}, {hi}]")
        if len(n.extent) != 3 or any(abs(c) > emax for c in n.extent):
            out.append(f"limb {n.id}: extent {n.extent} exceeds {limits.extent_max} m")
        if limits.env_class == EnvClass.LOCOMOTION2D and n.extent[1] != 0.0:
            out.append(f"limb {n.id}: 2D limb has nonzero y extent")
        if limits.env_class == EnvClass.ARM and (n.extent[1] != 0.0 or n.extent[2] != 0.0):
            out.append(f"limb {n.id}: arm limb extends outside x")
        if n.max_children != limits.max_children:
            out.append(f"limb {n.id}: max_children {n.max_children} != {limits.max_children}")
        nkids = len(tree.children(n.id))
        if nkids > n.max_children:
            out.append(f"limb {n.id}: {nkids} children exceeds {n.max_children}")

    expected = {n.id for n in tree.nodes if n.parent is not None}
    if limits.env_class == EnvClass.ARM:
        expected.add(roots[0].id)
    got = [j.child_id for j in tree.joints]
    if len(set(got)) != len(got):
        out.append("more than one joint into the same limb")
    if set(got) != expected:
        out.append(f"joint set {sorted(set(got))} does not match limbs {sorted(expected)}")
    rlo, rhi = limits.joint_range
    glo, ghi = limits.gear
    for j in tree.joints:
        if j.joint_type == JointType.FIXED:
            if not limits.allow_fixed:
                out.append(f"joint {j.child_id}: fixed joints not allowed in {limits.env_class.value}")
        elif j.joint_type != limits.joint_type:
            out.append(f"joint {j.child_id}: type {j.joint_type.value} not allowed in {limits.env_class.value}")
        if not 0.0 <= j.attachment <= 1.0:
            out.append(f"joint {j.child_id}: attachment {j.attachment} outside [0, 1]")
        if not rlo - 1e-9 <= j.range <= rhi + 1e-9:
            out.append(f"joint {j.child_id}: range {j.range} outside [{rlo}, {rhi}]")
        if not glo - 1e-9 <= j.gear <= ghi + 1e-9:
            out.append(f"joint {j.child_id}: gear {j.gear} outside [{glo}, {ghi}]")
    if tree.k < 1:
        out.append("morphology has no actuated joints")
    for a, b in collisions(tree):
        out.append(f"limbs {a} and {b} collide at rest")
    return out


def is_valid(tree: MorphologyTree, limits: Optional[MorphologyLimits] = None) -> bool:
    return not validate(tree, limits)


# ---------------------------------------------------------------------------
# canonical ordering


def _bfs_indices(tree: MorphologyTree) -> list[int]:
    idx = tree._index()
    kids: dict[int, list[int]] = {}
    root = None
    for n in tree.nodes:
        if n.parent is None:
            root = n.id
        else:
            kids.setdefault(n.parent, []).append(n.id)
    if root is None:
        return []
    order, queue, seen = [], deque([root]), {root}
    while queue:
        u = queue.popleft()
        order.append(idx[u])
        for c in sorted(kids.get(u, ())):
            if c not in seen:
                seen.add(c)
                queue.append(c)
    return order


def canonicalize(tree: MorphologyTree) -> MorphologyTree:
    """Renumber limbs 0..n-1 in BFS order and sort joints by child id."""
    order = _bfs_indices(tree)
    remap = {tree.nodes[i].id: new for new, i in enumerate(order)}
    nodes = tuple(
        replace(
            tree.nodes[i],
            id=remap[tree.nodes[i].id],
            parent=None if tree.nodes[i].parent is None else remap[tree.nodes[i].parent],
        )
        for i in order
    )
    joints = sorted(
        (replace(j, child_id=remap[j.child_id]) for j in tree.joints if j.child_id in remap),
        key=lambda j: j.child_id,
    )
    return MorphologyTree(nodes=nodes, joints=tuple(joints), env_class=tree.env_class, id=tree.id)


# ---------------------------------------------------------------------------
# sampling


def _sample_extent(rng, limits: MorphologyLimits) -> tuple[float, float, float]:
    m = limits.extent_max
    if limits.env_class == EnvClass.ARM:
        return (float(rng.uniform(limits.min_length, m)), 0.0, 0.0)
    while True:
        x, z = rng.uniform(-m, m, size=2)
        if math.hypot(x, z) >= limits.min_length:
            return (float(x), 0.0, float(z))


def _sample_limb(rng, limits: MorphologyLimits, node_id: int, parent: Optional[int]) -> LimbNode:
    return LimbNode(
        id=node_id,
        parent=parent,
        radius=float(rng.uniform(*limits.radius)),
        extent=_sample_extent(rng, limits),
        max_children=limits.max_children,
    )


def _sample_joint(rng, limits: MorphologyLimits, child_id: int, base: bool = False) -> JointSpec:
    if limits.env_class == EnvClass.ARM:
        # the arm is a chain: children sit at the tip of their parent, the base joint at the origin
        attachment = 0.0 if base else 1.0
    else:
        attachment = float(rng.uniform(0.0, 1.0))
    return JointSpec(
        child_id=child_id,
        joint_type=limits.joint_type,
        attachment=attachment,
        range=float(rng.uniform(*limits.joint_range)),
        gear=float(rng.uniform(*limits.gear)),
    )


def _root_tree(rng, limits: MorphologyLimits, tree_id: int) -> MorphologyTree:
    root = _sample_limb(rng, limits, 0, None)
    joints = (_sample_joint(rng, limits, 0, base=True),) if limits.env_class == EnvClass.ARM else ()
    return MorphologyTree(nodes=(root,), joints=joints, env_class=limits.env_class, id=tree_id)


def _try_grow(tree: MorphologyTree, parent_id: int, rng, limits: MorphologyLimits, retries: int):
    """Attach one sampled child to ``parent_id``; resample its parameters on collision."""
    new_id = max(n.id for n in tree.nodes) + 1
    for _ in range(retries):
        child = _sample_limb(rng, limits, new_id, parent_id)
        joint = _sample_joint(rng, limits, new_id)
        cand = replace(tree, nodes=tree.nodes + (child,), joints=tree.joints + (joint,))
        if not collisions(cand, only=[new_id]):
            return cand, new_id
    return None, None


def sample_random(
    rng: np.random.Generator,
    env_class=EnvClass.LOCOMOTION2D,
    limits: Optional[MorphologyLimits] = None,
    mutation: Optional[MutationParams] = None,
    tree_id: int = 0,
    max_attempts: int = 100,
) -> MorphologyTree:
    """Sample a random valid morphology.

    Locomotion trees: the topology is drawn first, in BFS order, with one
    Bernoulli(``limits.grow_prob``) trial per free child slot of each dequeued
    limb (the root's first child is mandatory so the body always has a joint).
    Limb geometry is then placed in the same order, redrawing a limb whose
    capsule collides; a placement that gets stuck restarts the geometry but
    keeps the topology, so limb counts follow the Bernoulli process exactly.
    Arms draw a target limb count uniformly and mutate a single-limb arm until
    that count is reached.
    """
    limits = limits or default_limits(env_class)
    env_class = limits.env_class
    if env_class == EnvClass.ARM:
        return _sample_arm(rng, limits, mutation or default_mutation(env_class), tree_id)

    parents = _sample_topology(rng, limits)
    for _ in range(max_attempts):
        tree = _root_tree(rng, limits, tree_id)
        for p in parents:
            tree, _ = _try_grow(tree, p, rng, limits, SAMPLE_RETRIES)
            if tree is None:
                break
        if tree is None:
            continue
        tree = canonicalize(tree)
        if not validate(tree, limits):
            return tree
    raise SamplingError(f"no valid {env_class.value} morphology after {max_attempts} attempts")


def _sample_topology(rng, limits: MorphologyLimits) -> list[int]:
    """Parent index of every non-root limb, in BFS order (limb ids 1, 2, ...)."""
    parents: list[int] = []
    queue = deque([0])
    forced = limits.max_limbs >= 2
    while queue and len(parents) + 1 < limits.max_limbs:
        p = queue.popleft()
        for _slot in range(limits.max_children):
            if len(parents) + 1 >= limits.max_limbs:
                break
            if forced:
                forced = False
            elif not rng.random() < limits.grow_prob:
                continue
            parents.append(p)
            queue.append(len(parents))
    return parents


def _sample_arm(rng, limits, mutation, tree_id, max_steps: int = 10_000) -> MorphologyTree:
    target = int(rng.integers(1, limits.max_limbs + 1))
    tree = None
    for _ in range(100):
        cand = _root_tree(rng, limits, tree_id)
        if not validate(cand, limits):
            tree = cand
            break
    if tree is None:
        raise SamplingError("could not sample a valid arm base limb")
    steps = 0
    while tree.n_limbs != target:
        if steps >= max_steps:
            raise SamplingError(f"arm did not reach {target} limbs in {max_steps} mutations")
        tree = mutate(tree, rng, mutation, limits)
        steps += 1
    return tree


# ---------------------------------------------------------------------------
# mutation


def _clip(x, lo, hi):
    return float(min(max(x, lo), hi))


def _perturb_limb(node: LimbNode, rng, limits: MorphologyLimits, params: MutationParams) -> LimbNode:
    lo, hi = limits.radius
    radius = _clip(node.radius + rng.normal(0.0, params.rel_std * (hi - lo)), lo, hi)
    m = limits.extent_max
    x, y, z = node.extent
    if limits.env_class == EnvClass.ARM:
        x = _clip(x + rng.normal(0.0, params.length_std), limits.min_length, m)
    else:
        x = _clip(x + rng.normal(0.0, params.length_std), -m, m)
        z = _clip(z + rng.normal(0.0, params.length_std), -m, m)
    return replace(node, radius=radius, extent=(x, y, z))


def _perturb_joint(joint: JointSpec, rng, limits: MorphologyLimits, params: MutationParams) -> JointSpec:
    rlo, rhi = limits.joint_range
    glo, ghi = limits.gear
    rng_deg = _clip(joint.range + rng.normal(0.0, params.rel_std * (rhi - rlo)), rlo, rhi)
    gear = _clip(joint.gear + rng.normal(0.0, params.rel_std * (ghi - glo)), glo, ghi)
    attachment = joint.attachment
    if limits.env_class != EnvClass.ARM:
        attachment = _clip(attachment + rng.normal(0.0, params.rel_std), 0.0, 1.0)
    return replace(joint, range=rng_deg, gear=gear, attachment=attachment)


def _replace_node(tree, node):
    return replace(tree, nodes=tuple(node if n.id == node.id else n for n in tree.nodes))


def _replace_joint(tree, joint):
    return replace(tree, joints=tuple(joint if j.child_id == joint.child_id else j for j in tree.joints))


def _perturb_pass(tree, rng, limits, params):
    for nid in [tree.nodes[i].id for i in _bfs_indices(tree)]:
        if rng.random() < params.geom_prob:
            node = tree.node(nid)
            for _ in range(params.retries):
                cand = _replace_node(tree, _perturb_limb(node, rng, limits, params))
                if not collisions(cand):
                    tree = cand
                    break
        joint = tree.joint_into(nid)
        if joint is not None and rng.random() < params.joint_prob:
            for _ in range(params.retries):
                cand = _replace_joint(tree, _perturb_joint(joint, rng, limits, params))
                if not collisions(cand):
                    tree = cand
                    break
    return tree


def _grow_pass(tree, rng, limits, params):
    open_slots = [n.id for n in tree.nodes if len(tree.children(n.id)) < n.max_children]
    for nid in open_slots:
        if not rng.random() < params.grow_prob:
            continue
        if tree.n_limbs >= limits.max_limbs:
            continue
        grown, _ = _try_grow(tree, nid, rng, limits, params.retries)
        if grown is not None:
            tree = grown
    return tree


def _delete_pass(tree, rng, limits, params):
    leaves = [n.id for n in tree.nodes if n.parent is not None and not tree.children(n.id)]
    if not leaves:
        return tree
    for _ in range(params.retries):
        doomed = {nid for nid in leaves if rng.random() < params.delete_prob}
        if not doomed:
            return tree
        cand = replace(
            tree,
            nodes=tuple(n for n in tree.nodes if n.id not in doomed),
            joints=tuple(j for j in tree.joints if j.child_id not in doomed),
        )
        if cand.k >= 1:
            return cand
    return tree


def mutate_checked(
    tree: MorphologyTree,
    rng: np.random.Generator,
    params: Optional[MutationParams] = None,
    limits: Optional[MorphologyLimits] = None,
    tree_id: Optional[int] = None,
) -> tuple[MorphologyTree, bool]:
    """Mutate and report success. On failure the parent comes back unchanged with ``False``."""
    limits = limits or default_limits(tree.env_class)
    params = params or default_mutation(tree.env_class)
    child = _perturb_pass(tree, rng, limits, params)
    child = _grow_pass(child, rng, limits, params)
    child = _delete_pass(child, rng, limits, params)
    child = canonicalize(child)
    if tree_id is not None:
        child = child.with_id(tree_id)
    if validate(child, limits):
        return tree, False
    return child, True


def mutate(tree, rng, params=None, limits=None, tree_id=None) -> MorphologyTree:
    return mutate_checked(tree, rng, params, limits, tree_id)[0]


# ---------------------------------------------------------------------------
# line graph


@dataclass(frozen=True)
class LineGraph:
    """One node per joint; two nodes adjacent iff their joints share a limb."""

    joint_ids: tuple[int, ...]
    embeddings: np.ndarray  # (k, EMBED_DIM)
    edges: tuple[tuple[int, int], ...]
    labels: Optional[tuple[int, ...]] = field(default=None)

    @property
    def n_nodes(self) -> int:
        return len(self.joint_ids)

    def neighbors(self) -> list[list[int]]:
        nb: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for a, b in self.edges:
            nb[a].append(b)
            nb[b].append(a)
        return nb


def limb_embedding(tree: MorphologyTree, node_id: Optional[int]) -> np.ndarray:
    if node_id is None:
        return np.zeros(LIMB_EMBED_DIM)
    n = tree.node(node_id)
    j = tree.joint_into(node_id)
    pos = j.attachment if j is not None else 0.0
    return np.array([n.radius, *n.extent, pos], dtype=float)


def joint_embedding(joint: JointSpec) -> np.ndarray:
    onehot = [1.0 if joint.joint_type == t else 0.0 for t in _JOINT_TYPES]
    return np.array(onehot + [math.radians(joint.range), joint.gear / GEAR_SCALE])


def actuated_joints(tree: MorphologyTree) -> list[JointSpec]:
    """Actuated joints in canonical BFS order; this order defines per-joint labels."""
    order = {tree.nodes[i].id: r for r, i in enumerate(_bfs_indices(tree))}
    js = [j for j in tree.joints if j.joint_type != JointType.FIXED]
    return sorted(js, key=lambda j: order[j.child_id])


def to_line_graph(tree: MorphologyTree, labels: Optional[Sequence[int]] = None) -> LineGraph:
    joints = actuated_joints(tree)
    rows = []
    incident: dict[int, list[int]] = {}
    for i, j in enumerate(joints):
        parent = tree.node(j.child_id).parent
        rows.append(np.concatenate([limb_embedding(tree, parent), limb_embedding(tree, j.child_id), joint_embedding(j)]))
        for limb in (parent, j.child_id):
            if limb is not None:
                incident.setdefault(limb, []).append(i)
    edges = set()
    for members in incident.values():
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                edges.add((min(members[a], members[b]), max(members[a], members[b])))
    emb = np.array(rows, dtype=float).reshape(len(joints), EMBED_DIM)
    emb.setflags(write=False)
    if labels is not None:
        if len(labels) != len(joints):
            raise MorphologyError(f"{len(labels)} labels for {len(joints)} joints")
        labels = tuple(int(a) for a in labels)
    return LineGraph(
        joint_ids=tuple(j.child_id for j in joints),
        embeddings=emb,
        edges=tuple(sorted(edges)),
        labels=labels,
    )


# ---------------------------------------------------------------------------
# documents


def to_document(tree: MorphologyTree) -> dict:
    return {
        "schema": SCHEMA,
        "version": SCHEMA_VERSION,
        "id": tree.id,
        "env_class": tree.env_class.value,
        "nodes": [
            {
                "id": n.id,
                "parent": n.parent,
                "radius": n.radius,
                "extent": list(n.extent),
                "max_children": n.max_children,
            }
            for n in tree.nodes
        ],
        "joints": [
            {
                "child_id": j.child_id,
                "joint_type": j.joint_type.value,
                "attachment": j.attachment,
                "range": j.range,
                "gear": j.gear,
            }
            for j in tree.joints
        ],
    }


def serialize(tree: MorphologyTree) -> str:
    # json writes floats with repr, which round-trips exactly
    return json.dumps(to_document(tree), sort_keys=True, indent=2) + "\n"


def _field(obj, key, loc, kind):
    if not isinstance(obj, dict):
        raise DocumentError(loc, "expected an object")
    if key not in obj:
        raise DocumentError(f"{loc}.{key}" if loc else key, "missing field")
    val = obj[key]
    where = f"{loc}.{key}" if loc else key
    if kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise DocumentError(where, f"expected a number, got {type(val).__name__}")
        if not math.isfinite(val):
            raise DocumentError(where, "non-finite number")
        return float(val)
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise DocumentError(where, f"expected an integer, got {type(val).__name__}")
        return val
    if kind == "int?":
        if val is None:
            return None
        if isinstance(val, bool) or not isinstance(val, int):
            raise DocumentError(where, "expected an integer or null")
        return val
    if kind is str:
        if not isinstance(val, str):
            raise DocumentError(where, "expected a string")
        return val
    if kind is list:
        if not isinstance(val, list):
            raise DocumentError(where, "expected a list")
        return val
    raise AssertionError(kind)


def from_document(doc) -> MorphologyTree:
    if not isinstance(doc, dict):
        raise DocumentError("$", "expected an object")
    if doc.get("schema") != SCHEMA:
        raise DocumentError("schema", f"expected {SCHEMA!r}")
    version = _field(doc, "version", "", int)
    if version != SCHEMA_VERSION:
        raise DocumentError("version", f"unsupported version {version}")
    try:
        env_class = EnvClass(_field(doc, "env_class", "", str))
    except ValueError as exc:
        raise DocumentError("env_class", str(exc)) from None
    tree_id = _field(doc, "id", "", int)

    nodes = []
    for i, nd in enumerate(_field(doc, "nodes", "", list)):
        loc = f"nodes[{i}]"
        extent = _field(nd, "extent", loc, list)
        if len(extent) != 3:
            raise DocumentError(f"{loc}.extent", "expected 3 components")
        ext = []
        for c, v in enumerate(extent):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise DocumentError(f"{loc}.extent[{c}]", "expected a number")
            ext.append(float(v))
        nodes.append(
            LimbNode(
                id=_field(nd, "id", loc, int),
                parent=_field(nd, "parent", loc, "int?"),
                radius=_field(nd, "radius", loc, float),
                extent=tuple(ext),
                max_children=_field(nd, "max_children", loc, int),
            )
        )
    if not nodes:
        raise DocumentError("nodes", "empty")

    joints = []
    for i, jd in enumerate(_field(doc, "joints", "", list)):
        loc = f"joints[{i}]"
        try:
            jtype = JointType(_field(jd, "joint_type", loc, str))
        except ValueError as exc:
            raise DocumentError(f"{loc}.joint_type", str(exc)) from None
        joints.append(
            JointSpec(
                child_id=_field(jd, "child_id", loc, int),
                joint_type=jtype,
                attachment=_field(jd, "attachment", loc, float),
                range=_field(jd, "range", loc, float),
                gear=_field(jd, "gear", loc, float),
            )
        )

    _check_structure(nodes, joints)
    tree = MorphologyTree(nodes=tuple(nodes), joints=tuple(joints), env_class=env_class, id=tree_id)
    canon = canonicalize(tree)
    return canon if canon != tree else tree


def _check_structure(nodes, joints):
    ids = [n.id for n in nodes]
    pos = {}
    for i, nid in enumerate(ids):
        if nid in pos:
            raise DocumentError(f"nodes[{i}].id", f"duplicate id {nid}")
        pos[nid] = i
    roots = [i for i, n in enumerate(nodes) if n.parent is None]
    if len(roots) != 1:
        raise DocumentError("nodes", f"expected exactly one root, found {len(roots)}")
    for i, n in enumerate(nodes):
        if n.parent is not None and n.parent not in pos:
            raise DocumentError(f"nodes[{i}].parent", f"unknown parent {n.parent}")
    for i, n in enumerate(nodes):
        seen = {n.id}
        cur = n
        while cur.parent is not None:
            if cur.parent in seen:
                raise DocumentError(f"nodes[{i}].parent", "cycle in parent links")
            seen.add(cur.parent)
            cur = nodes[pos[cur.parent]]
    for i, j in enumerate(joints):
        if j.child_id not in pos:
            raise DocumentError(f"joints[{i}].child_id", f"unknown limb {j.child_id}")


def deserialize(text: str) -> MorphologyTree:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DocumentError(f"line {exc.lineno} column {exc.colno}", exc.msg) from None
    return from_document(doc)
