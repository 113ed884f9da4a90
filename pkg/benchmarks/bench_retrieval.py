"""Time exact top-k retrieval with the compiled and the numpy kernels.

Usage: python3 benchmarks/bench_retrieval.py [--sizes 170,100000] [--dim 512] [--k 3]
"""

import argparse
import timeit

import numpy as np

from refdx import backend


def bench(kernels, rows, query, k, repeat):
    def run():
        kernels.top_k_indices(kernels.cosine_scores(rows, query), k)
    number = max(1, int(2e6 // rows.size) or 1)
    best = min(timeit.repeat(run, number=number, repeat=repeat)) / number
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="170,100000", help="comma list of corpus sizes")
    ap.add_argument("--dim", type=int, default=512)
    ap.add_argument("--k", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    names = ["python"] + (["compiled"] if backend.compiled_available() else [])
    print(f"{'N':>8}  {'D':>4}  " + "  ".join(f"{n:>12}" for n in names) + "  speedup")
    for n in (int(s) for s in args.sizes.split(",")):
        rows = rng.standard_normal((n, args.dim))
        query = rng.standard_normal(args.dim)
        times = {name: bench(backend.get_kernels(name), rows, query, args.k, args.repeat) for name in names}
        idx = {name: backend.get_kernels(name).top_k_indices(backend.get_kernels(name).cosine_scores(rows, query), args.k)
               for name in names}
        agree = all(np.array_equal(idx[names[0]], v) for v in idx.values())
        cells = "  ".join(f"{times[name] * 1e3:>10.3f}ms" for name in names)
        speed = f"{times['python'] / times['compiled']:.2f}x" if "compiled" in times else "n/a"
        print(f"{n:>8}  {args.dim:>4}  {cells}  {speed}{'' if agree else '  MISMATCH'}")


if __name__ == "__main__":
    main()
