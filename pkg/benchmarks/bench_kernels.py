"""Compare the compiled and numpy rollout kernels on the same workloads.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--threads 1]

Prints the best wall time per backend and checks that both return the same
costs (to 1e-12 relative).
"""

import argparse
import time

import numpy as np

from lqmfpg import rng
from lqmfpg.kernels import get_backend
from lqmfpg.model import table1_model
from lqmfpg.simulators import PopulationConfig, mkv_costs, pop_costs


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--M", type=int, default=1000)
    ap.add_argument("--T", type=int, default=50)
    args = ap.parse_args()

    model = table1_model()
    M, T = args.M, args.T
    keys = rng.derive_keys(2024, "bench", count=M)
    r = np.random.default_rng(0)
    Ks = 0.2 + 0.1 * r.standard_normal((M, 1, 1))
    Ls = 0.6 + 0.1 * r.standard_normal((M, 1, 1))
    try:
        backends = [get_backend("python"), get_backend("cython")]
    except ImportError:
        print("compiled extension not built; only the numpy backend is available")
        backends = [get_backend("python")]

    workloads = [("mkv", lambda impl: mkv_costs(model, Ks, Ls, T, keys, args.threads, impl))]
    for N in (1, 10, 50):
        pop = PopulationConfig.draw(model, N, 0.1, 0)
        workloads.append(
            (f"pop N={N}", lambda impl, pop=pop: pop_costs(model, pop, Ks, Ls, T, keys, args.threads, impl))
        )

    print(f"M = {M} rollouts, T = {T}, threads = {args.threads}")
    print(f"{'workload':<12}" + "".join(f"{b.BACKEND:>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in workloads:
        res = [best_of(lambda b=b: fn(b), args.repeat) for b in backends]
        line = f"{name:<12}" + "".join(f"{t:>11.4f}s" for t, _ in res)
        if len(res) == 2:
            ref, new = res[0][1], res[1][1]
            err = float(np.max(np.abs(ref - new) / np.maximum(1.0, np.abs(ref))))
            if err > 1e-12:
                raise SystemExit(f"{name}: backends disagree (max rel diff {err:.3g})")
            line += f"{res[0][0] / res[1][0]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
