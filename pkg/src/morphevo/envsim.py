"""Action primitives and the lightweight rollout environments.

Joint angles follow first-order dynamics

    theta(t+1) = clip(theta(t) + dt * (gain * u(t) - damping * theta(t)), -range, +range)

with ``gain = gear / gear_max``. The arm reports its end-effector ``(x, y)``.
The crawler is planar (x, z): a kinematic body kept resting on the ground,
translated by holding its lowest endpoint fixed for each step.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterator, Optional, Sequence, Union

import numpy as np

from . import _kernels
from .morphology import EnvClass, MorphologyTree, _bfs_indices, actuated_joints

N_PRIMITIVES = 4
DEFAULT_ENUM_CAP = 4 ** 6
EPISODE_LOG_FORMAT = "morphevo/episodes"
EPISODE_LOG_VERSION = 1


class RolloutError(RuntimeError):
    """The integration produced a non-finite state."""


class PrimitiveKind(str, Enum):
    COSINE = "cosine"
    CONSTANT = "constant"


@dataclass(frozen=True)
class ActionPrimitive:
    kind: PrimitiveKind
    frequency: float = 0.0  # rad / step
    phase: float = 0.0
    torque: float = 0.0


COSINE_PRIMITIVES = tuple(
    ActionPrimitive(PrimitiveKind.COSINE, frequency=f, phase=p)
    for f in (math.pi / 30, math.pi / 15)
    for p in (0.0, math.pi)
)
CONSTANT_PRIMITIVES = tuple(ActionPrimitive(PrimitiveKind.CONSTANT, torque=v) for v in (-1.0, -0.5, 0.5, 1.0))


def primitive_signal(p: ActionPrimitive, t: int) -> float:
    if t < 0:
        raise ValueError("step index must be non-negative")
    if p.kind == PrimitiveKind.COSINE:
        return math.cos(p.frequency * t + p.phase)
    return float(p.torque)


def primitive_table(primitives: Sequence[ActionPrimitive]) -> np.ndarray:
    return np.array(
        [[0.0 if p.kind == PrimitiveKind.COSINE else 1.0, p.frequency, p.phase, p.torque] for p in primitives],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class StateSummary:
    values: np.ndarray
    noise_applied: bool = False

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class Body:
    """A morphology flattened into kernel arrays."""

    parent: np.ndarray
    joint: np.ndarray
    attach: np.ndarray
    ext: np.ndarray
    radius: np.ndarray
    limit: np.ndarray
    gain: np.ndarray

    @property
    def k(self) -> int:
        return int(self.limit.shape[0])


EPISODE_LENGTHS = {"arm": 100, "arm_push": 125, "locomotion2d": 350}
NOISE_STD = {"arm": 0.2, "arm_push": 0.2, "locomotion2d": 0.05}
GEAR_MAX = {EnvClass.ARM: 80.0, EnvClass.LOCOMOTION2D: 100.0}


@dataclass(frozen=True)
class Environment:
    name: str
    env_class: EnvClass
    episode_len: int
    noise_std: float
    primitives: tuple[ActionPrimitive, ...]
    dt: float = 0.02
    damping: float = 0.1
    anchor_tol: float = 0.02
    gear_max: float = 100.0
    _table: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_table", primitive_table(self.primitives))

    @property
    def crawler(self) -> bool:
        return self.env_class == EnvClass.LOCOMOTION2D

    @property
    def state_dim(self) -> int:
        return _kernels.CRAWLER_DIM if self.crawler else _kernels.ARM_DIM

    @property
    def n_primitives(self) -> int:
        return len(self.primitives)

    def compile(self, tree: MorphologyTree) -> Body:
        order = _bfs_indices(tree)
        pos = {tree.nodes[i].id: r for r, i in enumerate(order)}
        joints = actuated_joints(tree)
        jidx = {j.child_id: r for r, j in enumerate(joints)}
        n = len(order)
        parent = np.full(n, -1, dtype=np.int64)
        joint = np.full(n, -1, dtype=np.int64)
        attach = np.zeros(n)
        ext = np.zeros((n, 2))
        radius = np.zeros(n)
        all_joints = {j.child_id: j for j in tree.joints}
        for r, i in enumerate(order):
            node = tree.nodes[i]
            if node.parent is not None:
                parent[r] = pos[node.parent]
            spec = all_joints.get(node.id)
            attach[r] = spec.attachment if spec is not None else 1.0
            joint[r] = jidx.get(node.id, -1)
            # planar coordinates: (x, y) for the arm, (x, z) for the crawler
            ext[r] = (node.extent[0], node.extent[2]) if self.crawler else (node.extent[0], node.extent[1])
            radius[r] = node.radius
        limit = np.array([math.radians(j.range) for j in joints])
        gain = np.array([j.gear / self.gear_max for j in joints])
        return Body(parent, joint, attach, ext, radius, limit, gain)

    def simulate(self, body: Body, assignments: np.ndarray, episode_len: Optional[int] = None) -> np.ndarray:
        """Noise-free terminal summaries for a batch of assignments, shape (m, state_dim)."""
        assignments = np.ascontiguousarray(assignments, dtype=np.int64)
        if assignments.ndim != 2 or assignments.shape[1] != body.k:
            raise ValueError(f"assignments must have shape (m, {body.k}), got {assignments.shape}")
        if assignments.size and (assignments.min() < 0 or assignments.max() >= self.n_primitives):
            raise ValueError("primitive index out of range")
        steps = self.episode_len if episode_len is None else int(episode_len)
        return _kernels.simulate_batch(
            body.parent, body.joint, body.attach, body.ext, body.radius, body.limit, body.gain,
            self._table, assignments, steps, self.crawler, self.dt, self.damping, self.anchor_tol,
        )

    def rollout_batch(
        self,
        tree: MorphologyTree,
        assignments: np.ndarray,
        seeds: Optional[Sequence[int]] = None,
        noise_std: Optional[float] = None,
        episode_len: Optional[int] = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Terminal summaries plus a per-episode validity mask.

        Noise for episode ``i`` is drawn from ``default_rng(seeds[i])`` so any
        episode can be replayed on its own. Diverged episodes come back as NaN
        rows with ``valid`` False.
        """
        states = self.simulate(self.compile(tree), assignments, episode_len)
        std = self.noise_std if noise_std is None else float(noise_std)
        if std > 0.0:
            if seeds is None:
                raise ValueError("seeds are required when noise is on")
            for i, s in enumerate(seeds):
                states[i] += np.random.default_rng(int(s)).normal(0.0, std, size=states.shape[1])
        valid = np.all(np.isfinite(states), axis=1)
        states[~valid] = np.nan
        return states, valid


def make_env(name: str = "arm", **overrides) -> Environment:
    if name not in EPISODE_LENGTHS:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(EPISODE_LENGTHS)}")
    env_class = EnvClass.LOCOMOTION2D if name == "locomotion2d" else EnvClass.ARM
    params = dict(
        name=name,
        env_class=env_class,
        episode_len=EPISODE_LENGTHS[name],
        noise_std=NOISE_STD[name],
        primitives=COSINE_PRIMITIVES if env_class == EnvClass.LOCOMOTION2D else CONSTANT_PRIMITIVES,
        gear_max=GEAR_MAX[env_class],
    )
    params.update(overrides)
    return Environment(**params)


def _noise_rng(rng) -> Optional[np.random.Generator]:
    if rng is None or isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(int(rng))


def rollout(
    env: Environment,
    tree: MorphologyTree,
    assignment: Sequence[int],
    episode_len: Optional[int] = None,
    noise_std: Optional[float] = None,
    rng: Union[np.random.Generator, int, None] = None,
) -> StateSummary:
    """Run one episode. ``rng`` may be a Generator or an integer seed."""
    assignment = np.asarray(assignment, dtype=np.int64).reshape(1, -1)
    if assignment.shape[1] != tree.k:
        raise ValueError(f"assignment has {assignment.shape[1]} entries for {tree.k} joints")
    values = env.simulate(env.compile(tree), assignment, episode_len)[0]
    if not np.all(np.isfinite(values)):
        raise RolloutError(f"non-finite terminal state for morphology {tree.id}")
    std = env.noise_std if noise_std is None else float(noise_std)
    if std > 0.0:
        gen = _noise_rng(rng)
        if gen is None:
            raise ValueError("an rng or seed is required when noise is on")
        values = values + gen.normal(0.0, std, size=values.shape[0])
    return StateSummary(values=values, noise_applied=std > 0.0)


def sample_assignment(k: int, rng: np.random.Generator, n_primitives: int = N_PRIMITIVES, shared: bool = False) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be at least 1")
    if shared:
        return np.full(k, rng.integers(n_primitives), dtype=np.int64)
    return rng.integers(n_primitives, size=k).astype(np.int64)


def sample_assignments(k: int, count: int, rng: np.random.Generator, n_primitives: int = N_PRIMITIVES, shared: bool = False) -> np.ndarray:
    if shared:
        return np.repeat(rng.integers(n_primitives, size=(count, 1)), k, axis=1).astype(np.int64)
    return rng.integers(n_primitives, size=(count, k)).astype(np.int64)


def all_assignments(k: int, n_primitives: int = N_PRIMITIVES) -> np.ndarray:
    """Every assignment in lexicographic order, shape (n_primitives**k, k)."""
    return np.array(list(itertools.product(range(n_primitives), repeat=k)), dtype=np.int64).reshape(-1, k)


def enumerate_outcomes(env: Environment, tree: MorphologyTree, cap: int = DEFAULT_ENUM_CAP) -> dict[tuple[int, ...], np.ndarray]:
    """Noise-free terminal state for every possible assignment."""
    total = env.n_primitives ** tree.k
    if total > cap:
        raise ValueError(f"{env.n_primitives}^{tree.k} = {total} outcomes exceeds the enumeration cap {cap}")
    acts = all_assignments(tree.k, env.n_primitives)
    states = env.simulate(env.compile(tree), acts)
    return {tuple(int(x) for x in a): s for a, s in zip(acts, states)}


# ---------------------------------------------------------------------------
# episode records


@dataclass(frozen=True)
class EpisodeRecord:
    morphology_id: int
    assignment: tuple[int, ...]
    state: tuple[float, ...]
    seed: int
    noise_applied: bool = True
    valid: bool = True


_RECORD_FIELDS = ("morphology_id", "assignment", "state", "seed", "noise_applied", "valid")


def write_episode_header(fh: IO[str]) -> None:
    fh.write(json.dumps({"format": EPISODE_LOG_FORMAT, "version": EPISODE_LOG_VERSION, "fields": list(_RECORD_FIELDS)}) + "\n")


def write_episode(fh: IO[str], rec: EpisodeRecord) -> None:
    state = [None if not math.isfinite(v) else v for v in rec.state]
    row = [rec.morphology_id, list(rec.assignment), state, rec.seed, rec.noise_applied, rec.valid]
    fh.write(json.dumps(dict(zip(_RECORD_FIELDS, row))) + "\n")


def read_episodes(fh: IO[str]) -> Iterator[EpisodeRecord]:
    header = json.loads(fh.readline())
    if header.get("format") != EPISODE_LOG_FORMAT:
        raise ValueError("not an episode log")
    if header.get("version") != EPISODE_LOG_VERSION:
        raise ValueError(f"unsupported episode log version {header.get('version')}")
    for line in fh:
        if not line.strip():
            continue
        d = json.loads(line)
        yield EpisodeRecord(
            morphology_id=d["morphology_id"],
            assignment=tuple(d["assignment"]),
            state=tuple(float("nan") if v is None else v for v in d["state"]),
            seed=d["seed"],
            noise_applied=d["noise_applied"],
            valid=d["valid"],
        )
