"""Time the compiled kernels against their pure-Python twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs on the same inputs under both backends; outputs are compared
before timing so a speedup is never reported for a wrong answer.
"""

import argparse
import timeit

import numpy as np

from otagcrl import _kernels_py as py
from otagcrl.maze import load_layout

try:
    from otagcrl import _kernels as cy
except ImportError:
    cy = None


def cases():
    giant = load_layout("maze-giant")
    nbr = np.ascontiguousarray(giant.neighbors)
    goal = 0
    toward = np.ascontiguousarray(giant.oracle_actions[goal])
    cap = 4 * giant.diameter

    rng = np.random.default_rng(0)
    lengths = np.full(400, 499)
    obs = rng.integers(0, giant.n_free, size=int((lengths + 1).sum())).astype(np.int32)
    ends = np.cumsum(lengths + 1) - 1
    final_pos = np.repeat(ends, lengths + 1).astype(np.int64)
    valid = np.setdiff1d(np.arange(len(obs)), ends).astype(np.int64)
    anchors = rng.choice(valid, size=4096)
    goals = rng.integers(0, giant.n_free, size=4096).astype(np.int32)

    P = 70_000
    grad = rng.normal(size=P)
    rows = rng.integers(0, 2000, size=4096).astype(np.int64)
    src = rng.normal(size=(4096, 64))

    def episodes(impl):
        def run():
            s = np.empty(cap + 1, np.int32)
            a = np.empty(cap, np.int8)
            total = 0
            for seed in range(20):
                total += impl.run_episode(nbr, toward, 100 + seed, goal, 0, 0, cap, 0.2, 0.0,
                                          seed, s, a)
            return total
        return run

    def adam(impl):
        params, m, v = np.ones(P), np.zeros(P), np.zeros(P)
        def run():
            impl.adam_update(params, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)
            return params.copy()
        return run

    def polyak(impl):
        target = np.zeros(P)
        def run():
            impl.polyak_update(target, grad, 0.005)
            return target.copy()
        return run

    def scatter(impl):
        def run():
            out = np.zeros((2000, 64))
            impl.scatter_add_rows(out, rows, src)
            return out
        return run

    return {
        "bfs_all_pairs (maze-giant)": lambda impl: (lambda: impl.bfs_all_pairs(nbr)),
        "option_successors (4096, n=10)":
            lambda impl: (lambda: impl.option_successors(obs, final_pos, anchors, goals, 10)),
        "run_episode x20 (maze-giant)": episodes,
        "adam_update (70k params)": adam,
        "polyak_update (70k params)": polyak,
        "scatter_add_rows (4096x64)": scatter,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if cy is None:
        print("compiled extension not built; nothing to compare (pip install -e . builds it)")
        return
    print(f"{'kernel':34s} {'python s':>10s} {'cython s':>10s} {'speedup':>9s}")
    for name, make in cases().items():
        a, b = make(py)(), make(cy)()
        np.testing.assert_array_equal(np.asarray(a), np.asarray(b))
        times = []
        for impl in (py, cy):
            fn = make(impl)
            n = 1 if impl is py and name.startswith("bfs") else 3
            times.append(min(timeit.repeat(fn, number=n, repeat=args.repeat)) / n)
        print(f"{name:34s} {times[0]:10.4f} {times[1]:10.4f} {times[0] / times[1]:8.1f}x")


if __name__ == "__main__":
    main()
