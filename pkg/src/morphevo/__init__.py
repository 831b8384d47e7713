"""Task-agnostic morphology evolution with an information-theoretic fitness.

Morphologies are scored by how well a graph classifier can recover the
per-joint action primitives from the terminal state of random rollouts, and
improved with a generational mutate/collect/retrain/rescore loop.
"""
from ._accel import backend
from .envsim import Environment, make_env, rollout
from .evolution import EvolutionConfig, Mode, rank, run, run_random, run_tame, run_tamr, run_varea
from .fitness import ScalingMode, estimate, exact_mi_oracle, joint_scaling, variance_fitness
from .gnn import ClassifierParams, TrainConfig
from .morphology import EnvClass, MorphologyTree, deserialize, mutate, sample_random, serialize, validate

__version__ = "0.1.0"

__all__ = [
    "ClassifierParams", "EnvClass", "Environment", "EvolutionConfig", "Mode", "MorphologyTree",
    "ScalingMode", "TrainConfig", "backend", "deserialize", "estimate", "exact_mi_oracle",
    "joint_scaling", "make_env", "mutate", "rank", "rollout", "run", "run_random", "run_tame",
    "run_tamr", "run_varea", "sample_random", "serialize", "validate", "variance_fitness",
]
