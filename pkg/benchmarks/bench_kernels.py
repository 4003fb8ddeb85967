"""Compare the compiled and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py [--sizes 1000,50890] [--repeat 200] [--end-to-end]

Kernel timings call both backend modules directly in one process.  The
end-to-end timing runs a short simulation twice in subprocesses, once with
``ASOFED_PURE_PYTHON=1``, because the backend is fixed at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from asofed import kernels

E2E = """
import time
from asofed import config, engine, kernels
cfg = config.parse_config("synthetic_noniid")
cfg.sim.max_iter = {iters}
t0 = time.perf_counter()
engine.run(cfg)
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def cases(n, rng):
    w, g, v, x, y = (rng.normal(size=n) for _ in range(5))
    out = np.empty(n)
    rows = max(1, n // 784)
    mat = rng.normal(size=(rows, n // rows))
    return {
        "sgd_step": (w, g, 1e-3),
        "asofed_step": (w, x, g, v, y, 0.5, 1e-3, out),
        "ema_update": (w, v, 0.001),
        "async_merge": (w, x, v, 0.05),
        "mix": (w, v, 0.6),
        "reweight": (mat, 1, 2),  # norm-preserving, so repeats stay in range
    }


def bench(backend, name, args, repeat):
    fn = getattr(backend, name)
    timer = timeit.Timer(lambda: fn(*args))
    return min(timer.repeat(repeat=5, number=repeat)) / repeat


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="1000,50890", help="flat parameter counts")
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--end-to-end", action="store_true", help="also time a short simulation")
    ap.add_argument("--iters", type=int, default=300, help="aggregations for --end-to-end")
    args = ap.parse_args(argv)

    if kernels.compiled is None:
        print("compiled backend not built; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'size':>8}{'python us':>12}{'cython us':>12}{'speedup':>9}")
    for n in (int(s) for s in args.sizes.split(",")):
        for name, fargs in cases(n, rng).items():
            # the kernels work in place; the repeated updates keep values finite
            tp = bench(kernels.python, name, fargs, args.repeat)
            tc = bench(kernels.compiled, name, fargs, args.repeat)
            print(f"{name:<14}{n:>8}{tp * 1e6:>12.2f}{tc * 1e6:>12.2f}{tp / tc:>9.2f}")

    if args.end_to_end:
        code = E2E.format(iters=args.iters)
        for pure in ("", "1"):
            env = dict(os.environ, ASOFED_PURE_PYTHON=pure)
            res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                                 text=True, check=True)
            name, secs = res.stdout.split()
            print(f"end-to-end {args.iters} aggregations, {name:<7}{float(secs):8.2f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
