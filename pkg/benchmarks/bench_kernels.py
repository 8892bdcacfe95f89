"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the best wall time per kernel for each backend and checks that both
backends agree: the generator kernels bitwise, the RSA kernel to 1e-12.
"""
from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from memtangle._backend import compiled, fallback
from memtangle.analysis import compute_rdm
from memtangle.rng import Pcg32

_GEN = Pcg32.stream(1, "bench")
STATE, INC = _GEN.state, _GEN.inc


def _cases(n_fill: int, n_shuffle: int, n_rdm: int):
    rng = np.random.default_rng(0)
    rdm_c = compute_rdm(rng.normal(size=(n_rdm, 16))).values
    rdm_f = compute_rdm(rng.normal(size=(n_rdm, 64))).values

    def fill(mod):
        out = np.empty(n_fill, dtype=np.uint32)
        mod.pcg32_fill(STATE, INC, out)
        return out

    def shuffle(mod):
        arr = np.arange(n_shuffle, dtype=np.int64)
        mod.pcg32_shuffle(STATE, INC, arr)
        return arr

    def rows(mod):
        out = np.empty(n_rdm - 1)
        mod.trialwise_rows(rdm_c, rdm_f, 1, out)
        return out

    return {
        f"pcg32_fill n={n_fill}": fill,
        f"pcg32_shuffle n={n_shuffle}": shuffle,
        f"trialwise_rows n={n_rdm}": rows,
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--fill", type=int, default=1_000_000)
    ap.add_argument("--shuffle", type=int, default=100_000)
    ap.add_argument("--rdm", type=int, default=744)
    args = ap.parse_args(argv)

    fast = compiled()
    if fast is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    print(f"{'kernel':<28}{'compiled':>12}{'fallback':>12}{'speedup':>10}")
    for name, fn in _cases(args.fill, args.shuffle, args.rdm).items():
        a, b = fn(fast), fn(fallback)
        same = np.allclose(a, b, rtol=0, atol=1e-12, equal_nan=True) if a.dtype.kind == "f" else np.array_equal(a, b)
        if not same:
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t_fast = min(timeit.repeat(lambda: fn(fast), number=1, repeat=args.repeat))
        t_slow = min(timeit.repeat(lambda: fn(fallback), number=1, repeat=args.repeat))
        print(f"{name:<28}{t_fast * 1e3:>10.2f}ms{t_slow * 1e3:>10.2f}ms{t_slow / t_fast:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
