"""Command-line entry point: ``morphevo {evolve,rank,oracle,mutate-preview,inspect}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import gnn
from .envsim import write_episode, write_episode_header
from .evolution import GenerationRecord, Mode, rank, run
from .fitness import trained_oracle
from .morphology import (
    DocumentError,
    MorphologyError,
    default_limits,
    default_mutation,
    deserialize,
    mutate_checked,
    serialize,
    to_document,
    to_line_graph,
    validate,
)

log = logging.getLogger("morphevo")

FITNESS_CSV_VERSION = 1
FITNESS_COLUMNS = ("generation", "mean_fitness", "max_fitness", "classifier_loss", "population_size", "env_steps", "best_id", "reset")
AUDIT_COLUMNS = ("generation", "id", "k", "mean_loglik", "value", "mode")
INCOMPLETE = "INCOMPLETE"


def _num(v: float) -> str:
    """Stable text for floats; -inf and nan spelled out."""
    if v is None:
        return ""
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "-inf" if v < 0 else "inf"
    return repr(float(v))


def _json_num(v):
    return v if v is not None and math.isfinite(v) else None


def _read_tree(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return deserialize(fh.read())


def _build_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.RunConfig()
    overrides = {}
    for name in ("env", "seed", "mode", "workers", "generations", "per_generation", "episodes"):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    cfg = replace(cfg, **overrides)
    for name in getattr(args, "ablation", None) or ():
        cfg = cfg.with_ablation(name)
    return cfg.resolved()


# ---------------------------------------------------------------------------
# evolve


class _RunWriter:
    """Per-generation artifacts; every file is written from this one object."""

    def __init__(self, out: Path, cfg: cfgmod.RunConfig):
        self.out = out
        self.cfg = cfg
        (out / "population").mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.seen: set[int] = set()
        self.fit_fh = open(out / "fitness.csv", "w", newline="", encoding="utf-8")
        self.fit_fh.write(f"# morphevo fitness v{FITNESS_CSV_VERSION}\n")
        self.fit = csv.writer(self.fit_fh, lineterminator="\n")
        self.fit.writerow(FITNESS_COLUMNS)
        self.audit_fh = open(out / "fitness_audit.csv", "w", newline="", encoding="utf-8")
        self.audit_fh.write(f"# morphevo fitness audit v{FITNESS_CSV_VERSION}\n")
        self.audit = csv.writer(self.audit_fh, lineterminator="\n")
        self.audit.writerow(AUDIT_COLUMNS)

    def __call__(self, rec, population, classifier):
        g = rec.generation
        self.fit.writerow([
            g, _num(rec.mean_fitness), _num(rec.max_fitness), _num(rec.classifier_loss),
            rec.population_size, rec.env_steps, rec.best_id, int(rec.reset),
        ])
        self.fit_fh.flush()
        for e in population:
            est = e.estimate
            if est is not None:
                self.audit.writerow([g, e.id, est.k, _num(est.mean_loglik), _num(est.value), est.scaling_mode.value])
        new = [e for e in population if e.id not in self.seen]
        self.seen.update(e.id for e in new)
        snap = {
            "generation": g,
            "new": [dict(to_document(e.morphology), born_generation=e.born_generation) for e in new],
            "fitness": [[e.id, _json_num(e.fitness)] for e in population],
        }
        with open(self.out / "population" / f"gen_{g:03d}.json", "w", encoding="utf-8") as fh:
            json.dump(snap, fh, sort_keys=True)
        if classifier is not None:
            with open(self.out / "checkpoints" / f"gen_{g:03d}.ckpt", "wb") as fh:
                gnn.write_checkpoint(classifier, fh)

    def close(self):
        self.fit_fh.close()
        self.audit_fh.close()


def cmd_evolve(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / INCOMPLETE).write_text("run started; artifacts are partial\n")
    (out / "config.toml").write_text(cfgmod.dumps(cfg))
    env = cfg.environment()
    writer = _RunWriter(out, cfg)
    t0 = time.perf_counter()
    try:
        result = run(cfg.evolution(), env, on_generation=writer)
        if not result.history:  # random mode: one row so the schema matches
            writer(_random_record(result), result.population, None)
    finally:
        writer.close()
    elapsed = time.perf_counter() - t0
    (out / "best_morphology.json").write_text(serialize(result.best.morphology))
    with open(out / "episodes.jsonl", "w", encoding="utf-8") as fh:
        write_episode_header(fh)
        for rec in result.episodes:
            write_episode(fh, rec)
    summary = {
        "mode": result.mode.value,
        "env": cfg.env,
        "seed": cfg.seed,
        "generations": len(result.history),
        "population_size": len(result.population),
        "best_id": result.best.id,
        "best_k": result.best.morphology.k,
        "best_fitness": _json_num(result.best.fitness),
        "env_steps": result.env_steps,
        "wall_clock_seconds": round(elapsed, 3),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / INCOMPLETE).unlink()
    print(json.dumps(summary, sort_keys=True))
    return 0


def _random_record(result):
    return GenerationRecord(1, float("nan"), float("nan"), float("nan"), len(result.population), 0, result.best.id, False)


# ---------------------------------------------------------------------------
# other subcommands


def cmd_rank(args) -> int:
    cfg = _build_config(args)
    trees = [_read_tree(p) for p in args.morphologies]
    scored = rank(trees, cfg.environment(), cfg.evolution(), holdout=args.holdout)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("path", "k", "fitness", "mean_loglik"))
    for path, e in zip(args.morphologies, scored):
        w.writerow((path, e.morphology.k, _num(e.fitness), _num(e.estimate.mean_loglik)))
    return 0


def cmd_oracle(args) -> int:
    cfg = _build_config(args)
    tree = _read_tree(args.morphology)
    env = cfg.environment()
    ev = cfg.evolution()
    try:
        rep = trained_oracle(env, tree, ev.train, np.random.default_rng(cfg.seed), epochs=args.epochs, repeats=args.repeats, cap=args.cap)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = {
        "k": tree.k,
        "outcome_count": rep.oracle.outcome_count,
        "exact_mi": rep.oracle.exact_mi,
        "bayes_bound": rep.oracle.bayes_bound,
        "trained_inner": rep.trained_inner,
        "gap_bayes_minus_trained": rep.gap_to_bayes,
        "gap_mi_minus_trained": rep.gap_to_mi,
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_mutate_preview(args) -> int:
    tree = _read_tree(args.morphology)
    limits = default_limits(tree.env_class, args.max_limbs)
    params = default_mutation(tree.env_class)
    rng = np.random.default_rng(args.seed)
    docs = []
    for i in range(args.count):
        child, ok = mutate_checked(tree, rng, params, limits, tree_id=tree.id + 1 + i)
        if validate(child, limits):
            raise MorphologyError("mutation produced an invalid tree")
        docs.append(dict(to_document(child), mutated=ok))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for i, d in enumerate(docs):
            (out / f"mutant_{i:03d}.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    else:
        print(json.dumps(docs, indent=2, sort_keys=True))
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.target)
    if path.is_dir():
        info = {"complete": not (path / INCOMPLETE).exists()}
        if (path / "summary.json").exists():
            info["summary"] = json.loads((path / "summary.json").read_text())
        if (path / "fitness.csv").exists():
            rows = [r for r in csv.reader(open(path / "fitness.csv")) if r and not r[0].startswith("#")]
            info["generations_logged"] = len(rows) - 1
        print(json.dumps(info, indent=2, sort_keys=True))
        return 0
    tree = _read_tree(str(path))
    g = to_line_graph(tree)
    info = {
        "id": tree.id,
        "env_class": tree.env_class.value,
        "limbs": tree.n_limbs,
        "joints": tree.k,
        "line_graph_edges": len(g.edges),
        "violations": validate(tree, default_limits(tree.env_class, args.max_limbs)),
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def _add_run_flags(p, modes=True):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--env", choices=("arm", "arm_push", "locomotion2d"))
    p.add_argument("--seed", type=int)
    if modes:
        p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--workers", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--per-generation", dest="per_generation", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--ablation", action="append", choices=cfgmod.ABLATIONS, help="may be repeated")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphevo", description="Task-agnostic morphology evolution.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="run an evolution (or baseline) and write artifacts")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("rank", help="score morphology documents with one shared classifier")
    _add_run_flags(p, modes=False)
    p.add_argument("morphologies", nargs="+")
    p.add_argument("--holdout", type=int, default=0, help="fresh evaluation episodes per morphology")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("oracle", help="exact MI, Bayes bound and trained estimate for one morphology")
    _add_run_flags(p, modes=False)
    p.add_argument("morphology")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--repeats", type=int, default=8)
    p.add_argument("--cap", type=int, default=4096)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("mutate-preview", help="emit validated mutations of a morphology")
    p.add_argument("morphology")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--max-limbs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mutate_preview)

    p = sub.add_parser("inspect", help="summarize a morphology document or a run directory")
    p.add_argument("target")
    p.add_argument("--max-limbs", type=int)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (cfgmod.ConfigError, DocumentError, MorphologyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
