"""Compare the compiled dense kernels against the numpy fallback.

Times the two operations that dominate attack and training loops: a batched
forward pass and a fused forward+backward (input gradients only, as in the
projected-gradient inner loop).

    python benchmarks/bench_backends.py [--reps 200]
"""

import argparse
import time

import numpy as np

from pbvote import backend, nets

CASES = [
    ("784-128-1", (784, 128, 1), 1),
    ("784-128-1", (784, 128, 1), 64),
    ("784-128-1", (784, 128, 1), 512),
    ("784-600-600-1", (784, 600, 600, 1), 64),
]


def bench(fn, reps):
    fn()  # warm up
    best = float("inf")
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(reps):
            fn()
        best = min(best, (time.perf_counter() - t0) / reps)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=100)
    args = ap.parse_args()

    names = backend.available_backends()
    if "compiled" not in names:
        print("compiled extension not built; timing the numpy fallback only")

    header = f"{'case':>16} {'batch':>5} {'op':>8}"
    for n in names:
        header += f" {n + ' (us)':>14}"
    if len(names) == 2:
        header += f" {'speedup':>8}"
    print(header)

    for label, dims, batch in CASES:
        spec = nets.mlp(dims[0], dims[1:-1])
        w = nets.init_weights(spec, 0)
        X = np.random.default_rng(0).random((batch, dims[0]))
        darr = np.asarray(dims, dtype=np.int64)
        ds = np.full(batch, 0.5)

        for op in ("fwd", "fwd+bwd"):
            times = {}
            for name in names:
                kern = backend.kernels(name)

                if op == "fwd":
                    fn = lambda: kern.fwd(w, darr, X, 0.01)
                else:
                    def fn():
                        scores, hidden = kern.fwd(w, darr, X, 0.01)
                        kern.bwd(w, darr, X, hidden, np.asarray(scores), ds,
                                 0.01, False, True)
                times[name] = bench(fn, args.reps)
            row = f"{label:>16} {batch:>5} {op:>8}"
            for name in names:
                row += f" {times[name] * 1e6:>14.1f}"
            if len(names) == 2:
                row += f" {times['python'] / times['compiled']:>7.2f}x"
            print(row)


if __name__ == "__main__":
    main()
