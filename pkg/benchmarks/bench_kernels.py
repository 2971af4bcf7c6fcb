"""Time the numba kernels against their pure-numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Shapes follow the desk-scale model: N=256 source tokens in 32 sentences,
4 heads of width 16, GRU hidden 64 over the sentence batch. Numba compile
time is paid in an untimed warm-up call.
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from sentattn import kernels


def cases(rng):
    N, H, dh, n1, Hd = 256, 4, 16, 32, 64
    offsets = np.arange(0, N + 1, N // n1)
    k = rng.normal(size=(H, N, dh))
    v = rng.normal(size=(H, N, dh))
    x = rng.normal(size=(8, H, N))

    # 64 decoder rows, each attending to 4 of the 32 sentences
    B, r = 64, 4
    toks, row_ptr = [], [0]
    for _ in range(B):
        sel = np.sort(rng.choice(n1, r, replace=False))
        idx = np.concatenate([np.arange(offsets[s], offsets[s + 1]) for s in sel])
        toks.append(idx)
        row_ptr.append(row_ptr[-1] + len(idx))
    tok = np.concatenate(toks).astype(np.int64)
    row_ptr = np.array(row_ptr, dtype=np.int64)
    q = rng.normal(size=(B, H, dh)) / np.sqrt(dh)

    S, T, I = n1, N // n1, 64
    gx = rng.normal(size=(S, T, I))
    mask = np.ones((S, T), dtype=bool)
    w_ih = rng.normal(size=(I, 3 * Hd)) * 0.1
    w_hh = rng.normal(size=(Hd, 3 * Hd)) * 0.1
    b = np.zeros(3 * Hd)
    _, cache_np = kernels.np_gru_forward(gx, mask, w_ih, w_hh, b, b)
    dhs = rng.normal(size=(S, T, Hd))

    out = {
        "segment_sum": (x, offsets),
        "feature_sums": (k, offsets, 0),
        "subset_attend": (q, k, v, row_ptr, tok),
        "gru_forward": (gx, mask, w_ih, w_hh, b, b),
        "gru_backward": (dhs, gx, mask, w_ih, w_hh, cache_np),
    }
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    if not kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1

    rows = []
    with threadpool_limits(limits=1):
        for name, call_args in cases(np.random.default_rng(args.seed)).items():
            row = {"kernel": name}
            for prefix in ("np", "nb"):
                fn = getattr(kernels, f"{prefix}_{name}")
                fn(*call_args)  # warm-up, includes jit compile for nb
                best = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat))
                row[f"{prefix}_ms"] = best * 1e3
            row["speedup"] = row["np_ms"] / row["nb_ms"]
            rows.append(row)

    print(f"{'kernel':<15}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for row in rows:
        print(f"{row['kernel']:<15}{row['np_ms']:>12.4f}{row['nb_ms']:>12.4f}{row['speedup']:>9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"repeat": args.repeat, "results": rows}, fh, indent=2)
            fh.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
