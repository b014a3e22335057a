"""Random instance generators shared by the tests."""

import numpy as np

from magpc.costs import QuadraticTracking
from magpc.engine import build_configs
from magpc.errors import NumericError
from magpc.lds import DisturbanceGenerator, LdsSystem
from magpc.stability import certify, certify_global, synthesize, synthesize_joint


def random_system(rng, d=None, N=None, kmax=2, rho=(0.3, 1.1), W=1.0):
    d = int(rng.integers(1, 5)) if d is None else d
    N = int(rng.integers(1, 4)) if N is None else N
    A = rng.standard_normal((d, d))
    A *= rng.uniform(*rho) / max(np.abs(np.linalg.eigvals(A)).max(), 1e-9)
    Bs = [rng.standard_normal((d, int(rng.integers(1, kmax + 1)))) for _ in range(N)]
    return LdsSystem(A, Bs, W=W)


def gains(sys, setting):
    """Joint LQR gains for setting 2, one LQR gain per agent for setting 1; certificates must exist."""
    if setting == 2:
        Ks = synthesize_joint(sys.A, sys.B)
        certify_global(sys.A, sys.B, Ks)
    else:
        Ks = [synthesize(sys.A, b) for b in sys.B]
        for b, k in zip(sys.B, Ks):
            certify(sys.A, b, k)
        # the agents act together, so the joint loop has to be stable as well
        certify_global(sys.A, sys.B, Ks)
    return Ks


def random_instance(rng, setting=2, d=None, N=None, kmax=2, tries=50):
    """A system with certified gains; retries when a random draw is not certifiable."""
    for _ in range(tries):
        sys = random_system(rng, d=d, N=N, kmax=kmax)
        try:
            return sys, gains(sys, setting)
        except NumericError:
            continue
    raise RuntimeError("no certifiable instance drawn")


def random_costs(rng, sys, lam=None):
    return [QuadraticTracking(sys.d, k, rng.uniform(0.1, 1.0) if lam is None else lam,
                              target_x=rng.uniform(-0.5, 0.5, sys.d)) for k in sys.k]


def random_gen(rng, sys, kind="clipped-gaussian"):
    if kind == "clipped-gaussian":
        return DisturbanceGenerator(kind, sys.d, sys.W, seed=int(rng.integers(2**31)), sigma=0.5)
    return DisturbanceGenerator("sinusoidal", sys.d, sys.W, seed=int(rng.integers(2**31)),
                                amplitude=sys.W / np.sqrt(sys.d) * 0.9, frequency=rng.uniform(0.05, 0.5, sys.d),
                                random_phase=True)


def manual_configs(rng, sys, Ks, costs, T, setting, H, eta, random_init=True):
    confs = build_configs(sys, Ks, costs, T, settings=setting, tuning="manual", H=H, eta=eta)
    if random_init:
        for c in confs:
            c.M_init = c.dac_set.sample(rng, 1)[0]
    return confs
