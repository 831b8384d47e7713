"""Generational morphology search and its baselines.

``run_tame`` is the full loop: mutate top morphologies, collect random-primitive
episodes, retrain the classifier on every episode ever collected, then rescore
the whole (never pruned) population. ``run_tamr`` ranks one large random
population with the same estimator and budget, ``run_varea`` swaps the fitness
for terminal-state variance, and ``run_random`` just samples.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from . import gnn
from .envsim import EpisodeRecord, sample_assignments
from .fitness import NEG_INF, FitnessEstimate, ScalingMode, estimate, variance_fitness
from .morphology import (
    EMBED_DIM,
    MorphologyTree,
    default_limits,
    default_mutation,
    mutate_checked,
    sample_random,
)

log = logging.getLogger(__name__)


class Mode(str, Enum):
    TAME = "tame"
    TAMR = "tamr"
    VAREA = "varea"
    RANDOM = "random"


@dataclass(frozen=True)
class EvolutionConfig:
    generations: int = 60
    per_generation: int = 24
    episodes: int = 32
    lam: float = 0.25
    scaling_mode: ScalingMode = ScalingMode.LOG_CLAMPED
    reset_every: int = 12  # 0 disables resets
    parent_fraction: float = 0.06
    train: gnn.TrainConfig = field(default_factory=gnn.TrainConfig)
    mode: Mode = Mode.TAME
    seed: int = 0
    shared_primitive: bool = False
    noise_std: Optional[float] = None  # None: environment default
    max_limbs: Optional[int] = None
    workers: int = 1

    def __post_init__(self):
        if min(self.generations, self.per_generation, self.episodes) < 1:
            raise ValueError("generations, per_generation and episodes must be positive")
        if not 0.0 < self.parent_fraction <= 1.0:
            raise ValueError("parent_fraction must lie in (0, 1]")
        if self.reset_every < 0:
            raise ValueError("reset_every must be >= 0")
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "scaling_mode", ScalingMode(self.scaling_mode))


@dataclass
class PopulationEntry:
    morphology: MorphologyTree
    fitness: float = NEG_INF
    born_generation: int = 0
    episode_range: tuple[int, int] = (0, 0)
    estimate: Optional[FitnessEstimate] = None

    @property
    def id(self) -> int:
        return self.morphology.id


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    mean_fitness: float
    max_fitness: float
    classifier_loss: float
    population_size: int
    env_steps: int
    best_id: int
    reset: bool


@dataclass
class RunResult:
    mode: Mode
    best: PopulationEntry
    history: list[GenerationRecord]
    population: list[PopulationEntry]
    env_steps: int
    classifier: Optional[gnn.ClassifierParams] = None
    episodes: list[EpisodeRecord] = field(default_factory=list)

    def fitness_curve(self) -> np.ndarray:
        return np.array([r.max_fitness for r in self.history])


GenerationHook = Callable[[GenerationRecord, list, Optional[gnn.ClassifierParams]], None]


def best_entry(population: Sequence[PopulationEntry]) -> PopulationEntry:
    """Highest fitness; ties go to the lowest morphology id."""
    return min(population, key=lambda e: (-e.fitness, e.id))


def pool_size(n: int, fraction: float) -> int:
    return max(1, math.ceil(round(fraction * n, 9)))


def select_parents(population: Sequence[PopulationEntry], fraction: float, count: int, rng: np.random.Generator) -> list[MorphologyTree]:
    """Uniform draws with replacement from the top ``ceil(fraction * |P|)`` finite-fitness entries."""
    if not population:
        raise ValueError("empty population")
    ranked = sorted((e for e in population if math.isfinite(e.fitness)), key=lambda e: (-e.fitness, e.id))
    if not ranked:
        pool = list(population)
    else:
        pool = ranked[: pool_size(len(population), fraction)]
    picks = rng.integers(len(pool), size=count)
    return [pool[i].morphology for i in picks]


# ---------------------------------------------------------------------------
# shared machinery


def _rollout_task(args):
    env, tree, acts, seeds, noise_std = args
    return env.rollout_batch(tree, acts, seeds, noise_std)


class _Run:
    """Mutable state shared by the loop variants."""

    def __init__(self, config: EvolutionConfig, env):
        self.cfg = config
        self.env = env
        ss = np.random.SeedSequence(config.seed)
        morph_ss, ep_ss, cls_ss = ss.spawn(3)
        self.morph_rng = np.random.default_rng(morph_ss)
        self.ep_rng = np.random.default_rng(ep_ss)
        self.cls_rng = np.random.default_rng(cls_ss)
        self.limits = default_limits(env.env_class, config.max_limbs)
        self.mutation = default_mutation(env.env_class)
        self.noise_std = env.noise_std if config.noise_std is None else config.noise_std
        self.population: list[PopulationEntry] = []
        self.dataset = gnn.GraphDataset(env.state_dim)
        self.train_idx: dict[int, np.ndarray] = {}  # morphology id -> dataset rows
        self.states: dict[int, np.ndarray] = {}
        self.episodes: list[EpisodeRecord] = []
        self.env_steps = 0
        self.next_id = 0
        self.classifier: Optional[gnn.ClassifierParams] = None

    # morphologies -------------------------------------------------------
    def fresh(self) -> MorphologyTree:
        tree = sample_random(self.morph_rng, self.env.env_class, self.limits, self.mutation, tree_id=self.next_id)
        self.next_id += 1
        return tree

    def child_of(self, parent: MorphologyTree) -> MorphologyTree:
        tree, ok = mutate_checked(parent, self.morph_rng, self.mutation, self.limits, tree_id=self.next_id)
        if not ok:
            log.debug("mutation of %d exhausted retries; keeping parent copy", parent.id)
            tree = tree.with_id(self.next_id)
        self.next_id += 1
        return tree

    # data -------------------------------------------------------------
    def collect(self, trees: Sequence[MorphologyTree], generation: int) -> list[PopulationEntry]:
        E = self.cfg.episodes
        tasks = []
        for tree in trees:
            acts = sample_assignments(tree.k, E, self.ep_rng, self.env.n_primitives, self.cfg.shared_primitive)
            seeds = self.ep_rng.integers(0, 2**63 - 1, size=E)
            tasks.append((self.env, tree, acts, seeds, self.noise_std))
        if self.cfg.workers > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=self.cfg.workers) as pool:
                results = list(pool.map(_rollout_task, tasks))
        else:
            results = [_rollout_task(t) for t in tasks]

        entries = []
        for (_, tree, acts, seeds, _), (states, valid) in zip(tasks, results):
            start = len(self.episodes)
            for a, s, seed, ok in zip(acts, states, seeds, valid):
                self.episodes.append(
                    EpisodeRecord(tree.id, tuple(int(x) for x in a), tuple(float(v) for v in s), int(seed), self.noise_std > 0, bool(ok))
                )
            self.dataset.add_morphology(tree)
            self.train_idx[tree.id] = self.dataset.add_episodes(tree.id, acts[valid], states[valid])
            self.states[tree.id] = states[valid]
            self.env_steps += E * self.env.episode_len
            entries.append(PopulationEntry(tree, NEG_INF, generation, (start, start + E)))
        self.population.extend(entries)
        return entries

    # classifier -------------------------------------------------------
    def reset_classifier(self):
        t = self.cfg.train
        self.classifier = gnn.reset(
            self.cls_rng, EMBED_DIM + self.env.state_dim, t.hidden, t.depth, self.env.n_primitives, t.dtype
        )

    def train(self, epochs: Optional[int] = None) -> float:
        rows = np.concatenate([self.train_idx[e.id] for e in self.population])
        if len(rows) == 0:
            return float("nan")
        self.classifier, hist = gnn.fit(self.classifier, self.dataset, self.cfg.train, self.cls_rng, rows, epochs)
        return float(hist[-1])

    def rescore(self, entries: Optional[Sequence[PopulationEntry]] = None):
        entries = self.population if entries is None else entries
        rows = np.concatenate([self.train_idx[e.id] for e in entries])
        sums = gnn.episode_logliks(self.classifier, self.dataset, rows) if len(rows) else np.zeros(0)
        pos = 0
        for e in entries:
            n = len(self.train_idx[e.id])
            est = estimate(sums[pos: pos + n], e.morphology.k, self.cfg.lam, self.cfg.scaling_mode, self.env.n_primitives)
            pos += n
            e.estimate = est
            e.fitness = est.value

    def record(self, generation: int, loss: float, reset: bool) -> GenerationRecord:
        vals = np.array([e.fitness for e in self.population])
        finite = vals[np.isfinite(vals)]
        best = best_entry(self.population)
        return GenerationRecord(
            generation=generation,
            mean_fitness=float(finite.mean()) if len(finite) else float("nan"),
            max_fitness=float(finite.max()) if len(finite) else float("nan"),
            classifier_loss=loss,
            population_size=len(self.population),
            env_steps=self.env_steps,
            best_id=best.id,
            reset=reset,
        )

    def result(self, history) -> RunResult:
        return RunResult(
            mode=self.cfg.mode,
            best=best_entry(self.population),
            history=history,
            population=self.population,
            env_steps=self.env_steps,
            classifier=self.classifier,
            episodes=self.episodes,
        )


def _is_reset(cfg: EvolutionConfig, generation: int) -> bool:
    return cfg.reset_every > 0 and generation % cfg.reset_every == 0


# ---------------------------------------------------------------------------
# loop variants


def _evolve(config: EvolutionConfig, env, score: str, on_generation: Optional[GenerationHook]) -> RunResult:
    run = _Run(config, env)
    history = []
    if score == "classifier":
        run.reset_classifier()
    for g in range(1, config.generations + 1):
        if not run.population:
            trees = [run.fresh() for _ in range(config.per_generation)]
        else:
            parents = select_parents(run.population, config.parent_fraction, config.per_generation, run.morph_rng)
            trees = [run.child_of(p) for p in parents]
        new = run.collect(trees, g)

        loss, reset = float("nan"), False
        if score == "classifier":
            if _is_reset(config, g):
                run.reset_classifier()
                reset = True
            loss = run.train()
            run.rescore()
        else:
            for e in new:
                e.fitness = variance_fitness(run.states[e.id])
        rec = run.record(g, loss, reset)
        history.append(rec)
        log.info("gen %d: max %.4f mean %.4f loss %.4f", g, rec.max_fitness, rec.mean_fitness, loss)
        if on_generation is not None:
            on_generation(rec, run.population, run.classifier)
    return run.result(history)


def run_tame(config: EvolutionConfig, env, on_generation: Optional[GenerationHook] = None) -> RunResult:
    return _evolve(replace(config, mode=Mode.TAME), env, "classifier", on_generation)


def run_varea(config: EvolutionConfig, env, on_generation: Optional[GenerationHook] = None) -> RunResult:
    return _evolve(replace(config, mode=Mode.VAREA), env, "variance", on_generation)


def run_tamr(
    config: EvolutionConfig,
    env,
    on_generation: Optional[GenerationHook] = None,
    candidates: Optional[Sequence[MorphologyTree]] = None,
) -> RunResult:
    """Rank one random population of ``generations * per_generation`` morphologies.

    The classifier sees ``generations`` blocks of ``train.epochs`` epochs over
    all data, resetting on the same cadence as the evolutionary loop. Passing
    ``candidates`` ranks those morphologies instead of sampling new ones.
    """
    config = replace(config, mode=Mode.TAMR)
    run = _Run(config, env)
    if candidates is None:
        trees = [run.fresh() for _ in range(config.generations * config.per_generation)]
    else:
        trees = []
        for t in candidates:
            trees.append(t.with_id(run.next_id))
            run.next_id += 1
    run.collect(trees, 1)
    run.reset_classifier()
    history = []
    for g in range(1, config.generations + 1):
        reset = _is_reset(config, g)
        if reset:
            run.reset_classifier()
        loss = run.train()
        if g == config.generations:
            run.rescore()
        rec = run.record(g, loss, reset)
        history.append(rec)
        if on_generation is not None:
            on_generation(rec, run.population, run.classifier)
    return run.result(history)


def run_random(config: EvolutionConfig, env, on_generation: Optional[GenerationHook] = None) -> RunResult:
    """One random morphology; no episodes, no classifier."""
    config = replace(config, mode=Mode.RANDOM)
    run = _Run(config, env)
    run.population.append(PopulationEntry(run.fresh(), NEG_INF, 1, (0, 0)))
    return run.result([])


def rank(
    candidates: Sequence[MorphologyTree],
    env,
    config: EvolutionConfig,
    holdout: int = 0,
    objective: str = "classifier",
) -> list[PopulationEntry]:
    """Score fixed morphologies side by side.

    The default objective trains one shared classifier on every candidate's
    episodes, on the same epoch schedule as ``run_tamr``. With ``holdout > 0``
    each candidate gets that many fresh episodes that are never trained on and
    fitness is measured on those alone. ``objective="variance"`` scores by
    terminal-state variance instead. Entries come back in candidate order.
    """
    if objective not in ("classifier", "variance"):
        raise ValueError(f"unknown objective {objective!r}")
    config = replace(config, mode=Mode.TAMR if objective == "classifier" else Mode.VAREA)
    run = _Run(config, env)
    trees = [t.with_id(i) for i, t in enumerate(candidates)]
    run.collect(trees, 1)
    if objective == "variance":
        for e in run.population:
            e.fitness = variance_fitness(run.states[e.id])
        return [replace(e, morphology=c) for e, c in zip(run.population, candidates)]
    run.reset_classifier()
    for g in range(1, config.generations + 1):
        if _is_reset(config, g):
            run.reset_classifier()
        run.train()
    if holdout > 0:
        held = _Run(replace(config, episodes=holdout, seed=config.seed + 1_000_003), env)
        held.collect(trees, 1)
        held.classifier = run.classifier
        held.rescore()
        scored = held.population
    else:
        run.rescore()
        scored = run.population
    return [replace(e, morphology=c) for e, c in zip(scored, candidates)]


RUNNERS = {Mode.TAME: run_tame, Mode.TAMR: run_tamr, Mode.VAREA: run_varea, Mode.RANDOM: run_random}


def run(config: EvolutionConfig, env, on_generation: Optional[GenerationHook] = None) -> RunResult:
    return RUNNERS[Mode(config.mode)](config, env, on_generation)
