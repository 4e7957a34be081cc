"""Compiled vs. numpy projection kernels, plus the QP oracle for scale.

    python benchmarks/bench_kernels.py [--batches 1 16 128 1024] [--heads 6] [--constraints 3]
"""

import argparse
import time

import numpy as np

from posetsafe import kernels, qp


def best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--batches", type=int, nargs="+", default=[1, 16, 128, 1024])
    ap.add_argument("--heads", type=int, default=6)
    ap.add_argument("--constraints", type=int, default=3)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    backends = kernels.available_backends()
    rng = np.random.default_rng(args.seed)
    N, H, m = args.constraints, args.heads, 2
    cols = ["batch"] + [f"{b}_fwd_us" for b in backends] + [f"{b}_bwd_us" for b in backends] + ["oracle_us"]
    print(" ".join(f"{c:>14}" for c in cols))
    for B in args.batches:
        A = rng.normal(size=(B, N, m))
        U = rng.normal(size=(B, H, m))
        u0 = rng.normal(size=(B, m))
        c = np.minimum(rng.normal(size=(B, N)), np.einsum("bkm,bm->bk", A, u0))
        orders = np.stack([rng.permutation(N) for _ in range(H)]).astype(np.int64)
        G = rng.normal(size=(B, H, m))
        fwd, bwd = [], []
        for mod in backends.values():
            out = mod.project_heads(A, c, orders, U, True)
            active = out[1]
            fwd.append(best_of(lambda: mod.project_heads(A, c, orders, U, False), args.repeats))
            bwd.append(best_of(lambda: mod.project_heads_backward(A, c, orders, active, G), args.repeats))
        t_qp = best_of(lambda: qp.solve_batch(U[:, 0], A, c), max(1, args.repeats // 4))
        vals = [B] + [1e6 * t for t in fwd] + [1e6 * t for t in bwd] + [1e6 * t_qp]
        print(" ".join(f"{v:>14.1f}" if isinstance(v, float) else f"{v:>14d}" for v in vals))
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend was timed")


if __name__ == "__main__":
    main()
