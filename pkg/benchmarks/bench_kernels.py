"""Compare the numba and pure-numpy kernel paths.

    python3 benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python3 benchmarks/bench_kernels.py --episodes 20   # plus end-to-end desk runs

The end-to-end part runs the CLI twice in subprocesses, once with
MECOFFLOAD_PURE_NUMPY=1, and reports wall time per training episode.
"""

import argparse
import os
import subprocess
import sys
import tempfile
import time
import timeit

import numpy as np

from mecoffload import _kernels


def cases(rng):
    # sizes seen in practice: N <= 50 tasks per step, replay capacity 1e4
    n = 50
    arrival = rng.uniform(0, 1, n)
    service = rng.uniform(0, 0.5, n)
    order = np.argsort(arrival, kind="stable").astype(np.int64)
    sizes = rng.uniform(1, 50, n) * 8e6
    cap = 1 << 14
    tree = np.zeros(2 * cap)
    leaves = np.unique(rng.integers(0, 10_000, 64)).astype(np.int64)
    vals = rng.uniform(size=leaves.size)
    _kernels.tree_update_numpy(tree, np.arange(10_000, dtype=np.int64), rng.uniform(size=10_000))
    targets = rng.uniform(size=64) * tree[1]
    return {
        "fifo_units (50 tasks, 4 units)": lambda f: f(arrival, service, order, 4),
        "greedy_admit (50 proposals)": lambda f: f(order, sizes, 10, 400 * 8e6),
        "tree_update (64 leaves)": lambda f: f(tree.copy(), leaves, vals),
        "tree_find (64 targets)": lambda f: f(tree, targets, 10_000),
    }


def kernels():
    if not _kernels.HAVE_NUMBA:
        sys.exit("numba is not installed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for (name, call), base in zip(cases(rng).items(), ("fifo_units", "greedy_admit", "tree_update", "tree_find")):
        f_np = getattr(_kernels, base + "_numpy")
        f_nb = getattr(_kernels, base + "_numba")
        call(f_nb)  # compile
        res = []
        for f in (f_np, f_nb):
            t = timeit.Timer(lambda: call(f))
            n, _ = t.autorange()
            res.append(min(t.repeat(5, n)) / n * 1e6)
        print(f"{name:34s} {res[0]:10.1f} {res[1]:10.1f} {res[0] / res[1]:7.1f}x")


def end_to_end(episodes):
    for flag in ("0", "1"):
        env = dict(os.environ, MECOFFLOAD_PURE_NUMPY=flag)
        with tempfile.TemporaryDirectory() as out:
            t0 = time.perf_counter()
            subprocess.run([sys.executable, "-m", "mecoffload.cli", "run", "--config", "desk",
                            "--algorithm", "ccm", "--episodes", str(episodes), "--out", out],
                           env=env, check=True, stdout=subprocess.DEVNULL)
            dt = time.perf_counter() - t0
        label = "numpy" if flag == "1" else "numba"
        print(f"desk ccm, {label:5s} path: {dt:6.1f}s total, {dt / episodes * 1e3:7.1f} ms/episode")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--episodes", type=int, default=0, help="also time end-to-end desk runs")
    args = p.parse_args()
    kernels()
    if args.episodes:
        end_to_end(args.episodes)
