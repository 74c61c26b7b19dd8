#!/usr/bin/env python3
"""Compare the numba and numpy kernel backends.

Per-kernel timings call both backend modules directly at the shapes a 5-way
5-shot 15-query episode produces. The end-to-end section trains ProtoNet in a
subprocess per backend, because the backend is fixed at import time.

    python benchmarks/bench_kernels.py [--repeat N] [--tasks N]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from imbfsl.kernels import _numpy

try:
    from imbfsl.kernels import _numba
except ImportError:
    _numba = None


def _time(fn, repeat):
    fn()  # warm-up, also triggers numba compilation
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(rng):
    a = rng.normal(size=(75, 32))
    b = rng.normal(size=(5, 32))
    g = rng.normal(size=(75, 5))
    labels = rng.integers(0, 5, size=75)
    x = rng.normal(size=(100, 32))
    d = np.sqrt((x * x).sum(1) + 1e-24)
    p, grad = rng.normal(size=(64, 64)), rng.normal(size=(64, 64))
    m, v = np.zeros_like(p), np.zeros_like(p)
    return {
        "sqdist 75x5x32": lambda k: k.sqdist(a, b),
        "sqdist_bwd": lambda k: k.sqdist_bwd(g, a, b),
        "xent 75x5": lambda k: k.xent(g, labels),
        "l2norm_rows 100x32": lambda k: k.l2norm_rows(x, 1e-12),
        "l2norm_rows_bwd": lambda k: k.l2norm_rows_bwd(x, x, d),
        "adam 64x64": lambda k: k.adam_update(p, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 1),
    }


E2E = """
import time
from imbfsl.data import SyntheticSpec, SplitSpec, gen_synthetic, split_classes
from imbfsl.episodes import TaskSpec
from imbfsl.harness import TrainConfig, meta_train
from imbfsl.learners import make_learner
from imbfsl.kernels import BACKEND
train, val, _ = split_classes(gen_synthetic(SyntheticSpec(100, 100, 16, 1.0)), SplitSpec(64, 16, 20))
learner = make_learner("protonet")
meta_train(learner, train, val, TaskSpec(), TrainConfig(10, 10, 2))
t0 = time.perf_counter()
r = meta_train(learner, train, val, TaskSpec(), TrainConfig({tasks}, {tasks}, 20))
print(BACKEND, time.perf_counter() - t0, r.best_val)
"""


def end_to_end(tasks):
    out = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, IMBFSL_BACKEND=backend)
        res = subprocess.run([sys.executable, "-c", E2E.format(tasks=tasks)], env=env,
                             capture_output=True, text=True, check=True)
        name, secs, acc = res.stdout.split()
        out[backend] = (name, float(secs), float(acc))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--tasks", type=int, default=300, help="training tasks for the end-to-end run")
    args = ap.parse_args(argv)

    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':<22}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, call in cases.items():
        t_np = _time(lambda: call(_numpy), args.repeat) * 1e6
        if _numba is None:
            print(f"{name:<22}{t_np:>12.1f}{'n/a':>12}")
            continue
        t_nb = _time(lambda: call(_numba), args.repeat) * 1e6
        print(f"{name:<22}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.2f}x")

    print(f"\nend to end: ProtoNet, {args.tasks} training tasks")
    for backend, (name, secs, acc) in end_to_end(args.tasks).items():
        print(f"  {backend:<6} (loaded {name}) {secs:7.2f} s  val acc {acc:.4f}")


if __name__ == "__main__":
    main()
