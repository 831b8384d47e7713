"""Rollout kernel timing: numba vs pure numpy on the same batches.

    python benchmarks/bench_rollout.py --env locomotion2d --batch 512 --repeat 5

The numba kernel is compiled once before timing. Both kernels are checked to
agree before any number is printed.
"""
import argparse
import time

import numpy as np

from morphevo import _kernels
from morphevo.envsim import make_env, sample_assignments
from morphevo.morphology import sample_random


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--env", default="arm", choices=["arm", "arm_push", "locomotion2d"])
    ap.add_argument("--batch", type=int, default=512, help="episodes per call")
    ap.add_argument("--bodies", type=int, default=8, help="random morphologies to average over")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    env = make_env(args.env)
    rng = np.random.default_rng(args.seed)
    jobs = []
    for _ in range(args.bodies):
        tree = sample_random(rng, env.env_class)
        b = env.compile(tree)
        acts = sample_assignments(tree.k, args.batch, rng)
        jobs.append((b.parent, b.joint, b.attach, b.ext, b.radius, b.limit, b.gain, env._table, acts,
                     env.episode_len, env.crawler, env.dt, env.damping, env.anchor_tol))

    t0 = time.perf_counter()
    _kernels.simulate_batch_numba(*jobs[0])
    compile_s = time.perf_counter() - t0

    for job in jobs:
        np.testing.assert_allclose(_kernels.simulate_batch_numba(*job), _kernels.simulate_batch_numpy(*job), rtol=0, atol=1e-12)

    fast = best_of(lambda: [_kernels.simulate_batch_numba(*j) for j in jobs], args.repeat)
    slow = best_of(lambda: [_kernels.simulate_batch_numpy(*j) for j in jobs], args.repeat)
    steps = args.bodies * args.batch * env.episode_len
    print(f"env={args.env} bodies={args.bodies} batch={args.batch} steps/call-set={steps}")
    print(f"numba first call (incl. compile): {compile_s:.2f}s")
    print(f"{'backend':8s} {'seconds':>9s} {'Msteps/s':>9s}")
    for name, t in (("numba", fast), ("numpy", slow)):
        print(f"{name:8s} {t:9.4f} {steps / t / 1e6:9.2f}")
    print(f"speedup: {slow / fast:.1f}x")


if __name__ == "__main__":
    main()
