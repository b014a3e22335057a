"""Times the compiled kernels against their numpy twins and checks they agree.

    python3 benchmarks/bench_kernels.py [--T 2000] [--repeat 3]
"""

import argparse
import time

import numpy as np

from magpc import config, kernels
from magpc.engine import build_configs, run_agents
from magpc.regret import DacProblem


def _time(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--T", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = kernels.available()
    if "compiled" not in backends:
        print("compiled extension not built; only the numpy path is available")
    cfg = config.resolve(config.preset("tracking"), {"T": args.T, "trials": 1})
    from magpc.runner import _agents

    sys, Ks, gen, costs, confs = _agents(cfg, args.T, 0)
    results = {}
    print(f"{'kernel':<22} {'backend':<9} {'seconds':>10}")
    for b in backends:
        sec, tr = _time(lambda: run_agents(sys, confs, costs, gen, args.T, backend=b), args.repeat)
        results.setdefault("run_gpc_core", {})[b] = (sec, tr.x)
        print(f"{'run_gpc_core':<22} {b:<9} {sec:>10.4f}")
    tr = run_agents(sys, confs, costs, gen, args.T)
    c = confs[0]
    for b in backends:
        sec, prob = _time(lambda: DacProblem(tr, sys, 0, costs[0], c.H, K=c.K, backend=b, held="policies",
                                             K_list=Ks), args.repeat)
        results.setdefault("affine_maps_core", {})[b] = (sec, prob.J)
        print(f"{'affine_maps_core':<22} {b:<9} {sec:>10.4f}")
    P, q, _ = prob.quadratic(0)
    radii = c.dac_set.radii
    L = 2.0 * float(np.linalg.eigvalsh(P)[-1])
    for b in backends:
        kern = kernels.get(b)

        def solve():
            x = np.zeros(q.size)
            kern.fista_blocks_core(P, q, radii, x, 2000, 0.0, L)
            return x

        sec, x = _time(solve, args.repeat)
        results.setdefault("fista_blocks_core", {})[b] = (sec, x)
        print(f"{'fista_blocks_core':<22} {b:<9} {sec:>10.4f}")
    if len(backends) == 2:
        print()
        for name, r in results.items():
            (tp, xp), (tc, xc) = r["python"], r["compiled"]
            err = float(np.max(np.abs(np.asarray(xp) - np.asarray(xc))))
            print(f"{name:<22} speedup {tp / tc:8.1f}x   max abs difference {err:.2e}")


if __name__ == "__main__":
    main()
