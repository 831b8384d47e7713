"""Run configuration: a flat TOML file with every default written out.

Each ablation is a one-line change (``shared_primitive = true``,
``reset_every = 0``, ``lam = 1.0``, ``mode = "varea"``, ``noise_std = 0.0``).
"""
from __future__ import annotations

import math
import sys
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .envsim import EPISODE_LENGTHS, NOISE_STD, Environment, make_env
from .evolution import EvolutionConfig, Mode
from .fitness import ScalingMode
from .gnn import TrainConfig
from .morphology import EnvClass, default_limits

ABLATIONS = ("shared-primitive", "no-reset", "lambda-one", "no-noise")
LAMBDA = {EnvClass.LOCOMOTION2D: 0.25, EnvClass.ARM: 0.2}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    env: str = "locomotion2d"
    seed: int = 0
    mode: str = "tame"
    generations: int = 60
    per_generation: int = 24
    episodes: int = 32
    episode_len: Optional[int] = None
    lam: Optional[float] = None
    scaling_mode: str = "log_clamped"
    reset_every: int = 12
    parent_fraction: float = 0.06
    shared_primitive: bool = False
    noise_std: Optional[float] = None
    max_limbs: Optional[int] = None
    workers: int = 1
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 15
    hidden: int = 192
    depth: int = 3
    dtype: str = "float32"

    def resolved(self) -> "RunConfig":
        """Fill every environment-dependent default so the file is fully explicit."""
        if self.env not in EPISODE_LENGTHS:
            raise ConfigError(f"env: unknown environment {self.env!r}; choose from {sorted(EPISODE_LENGTHS)}")
        cls = make_env(self.env).env_class
        cfg = replace(
            self,
            episode_len=EPISODE_LENGTHS[self.env] if self.episode_len is None else self.episode_len,
            lam=LAMBDA[cls] if self.lam is None else self.lam,
            noise_std=NOISE_STD[self.env] if self.noise_std is None else self.noise_std,
            max_limbs=default_limits(cls).max_limbs if self.max_limbs is None else self.max_limbs,
        )
        cfg.check()
        return cfg

    def check(self):
        try:
            Mode(self.mode)
        except ValueError:
            raise ConfigError(f"mode: expected one of {[m.value for m in Mode]}, got {self.mode!r}") from None
        try:
            ScalingMode(self.scaling_mode)
        except ValueError:
            raise ConfigError(f"scaling_mode: expected power or log_clamped, got {self.scaling_mode!r}") from None
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam: must lie in [0, 1]")
        if self.noise_std is not None and (self.noise_std < 0 or not math.isfinite(self.noise_std)):
            raise ConfigError("noise_std: must be a finite nonnegative number")
        for name in ("generations", "per_generation", "episodes", "workers", "batch_size", "epochs", "hidden", "depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype: expected float32 or float64")

    def with_ablation(self, name: str) -> "RunConfig":
        if name == "shared-primitive":
            return replace(self, shared_primitive=True)
        if name == "no-reset":
            return replace(self, reset_every=0)
        if name == "lambda-one":
            return replace(self, lam=1.0)
        if name == "no-noise":
            return replace(self, noise_std=0.0)
        raise ConfigError(f"unknown ablation {name!r}; choose from {list(ABLATIONS)}")

    def environment(self) -> Environment:
        cfg = self.resolved()
        return make_env(cfg.env, episode_len=cfg.episode_len, noise_std=cfg.noise_std)

    def evolution(self) -> EvolutionConfig:
        cfg = self.resolved()
        return EvolutionConfig(
            generations=cfg.generations,
            per_generation=cfg.per_generation,
            episodes=cfg.episodes,
            lam=cfg.lam,
            scaling_mode=ScalingMode(cfg.scaling_mode),
            reset_every=cfg.reset_every,
            parent_fraction=cfg.parent_fraction,
            train=TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.epochs, hidden=cfg.hidden, depth=cfg.depth, dtype=cfg.dtype),
            mode=Mode(cfg.mode),
            seed=cfg.seed,
            shared_primitive=cfg.shared_primitive,
            noise_std=cfg.noise_std,
            max_limbs=cfg.max_limbs,
            workers=cfg.workers,
        )


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def dumps(cfg: RunConfig) -> str:
    lines = ["# morphevo run configuration (all defaults materialized)"]
    for k, v in asdict(cfg).items():
        if v is None:
            lines.append(f"# {k} = <environment default>")
        else:
            lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


_FLOAT_FIELDS = {"lam", "noise_std", "parent_fraction", "lr"}


def loads(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for k in _FLOAT_FIELDS & set(data):
        if isinstance(data[k], int) and not isinstance(data[k], bool):
            data[k] = float(data[k])
    cfg = RunConfig(**data)
    cfg.check()
    return cfg


def load(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())
