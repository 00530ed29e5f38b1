"""Timing of the exact k-NN kernels: compiled kd-tree, pure-Python fallback, brute force.

Usage: python3 benchmarks/bench_kdtree.py [--points 5000] [--queries 2000] [--k 5]
"""

import argparse
import time

import numpy as np

from motion2infarct._kdtree_py import KDTree as PyKDTree

try:
    from motion2infarct._kdtree import KDTree as CKDTree
except ImportError:
    CKDTree = None


def brute(points, queries, k):
    d2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return np.take_along_axis(d2, idx, axis=1), idx


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=5000)
    ap.add_argument("--queries", type=int, default=2000)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    pts = rng.normal(size=(args.points, 3)) * 30
    qs = rng.normal(size=(args.queries, 3)) * 30

    rows = []
    t_ref, ref = best_of(lambda: brute(pts, qs, args.k), max(1, args.repeat // 2))
    rows.append(("brute force (numpy)", t_ref, None))
    backends = [("fallback (cKDTree + rerank)", PyKDTree)]
    if CKDTree is not None:
        backends.insert(0, ("compiled kd-tree", CKDTree))
    for name, cls in backends:
        t_build, tree = best_of(lambda: cls(pts), args.repeat)
        t_query, out = best_of(lambda: tree.query(qs, args.k), args.repeat)
        same = np.array_equal(out[1], ref[1]) and np.array_equal(out[0], ref[0])
        rows.append((name, t_build + t_query, same))

    print(f"{args.points} points, {args.queries} queries, k={args.k} (best of {args.repeat})")
    print(f"{'kernel':<30}{'time (ms)':>12}{'speedup':>10}  exact")
    for name, t, same in rows:
        flag = "-" if same is None else ("yes" if same else "NO")
        print(f"{name:<30}{1e3 * t:>12.2f}{t_ref / t:>10.1f}  {flag}")
    if CKDTree is None:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
