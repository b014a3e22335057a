"""Agent construction from the tuning rules and the fast multi-agent run."""

from __future__ import annotations

import numpy as np

from . import kernels
from .agent import AgentConfig, GpcAgent, tune_setting1, tune_setting2, tune_setting2_lipschitz
from .bounds import max_norm, uniform_bound
from .dac import DacSet
from .errors import ConfigError, DivergenceError
from .lds import DIVERGENCE_GUARD, LdsSystem, Trace, simulate
from .stability import certify, certify_global

TUNING_RULES = ("thm31", "thm33", "thm34", "manual")


def svd_project_block(blk, radius):
    """Clip singular values of one block; None when already feasible."""
    U, s, Vt = np.linalg.svd(np.asarray(blk, float), full_matrices=False)
    if s[0] <= radius:
        return None
    return (U * np.minimum(s, radius)) @ Vt


def _override(cert, override):
    if not override:
        return cert
    return cert.loosened(kappa=override.get("kappa"), gamma=override.get("gamma"))


def build_configs(sys: LdsSystem, K_list, costs, T, settings=2, tuning="thm33", c_eta=1.0, U=1.0,
                  H=None, eta=None, cert_override=None, norm="spectral", N_guess=None):
    """One AgentConfig per agent following the requested memory/step-size rule.

    `settings` and `tuning` may be scalars or per-agent lists. `N_guess` replaces the
    true population size in the independent-learner rule.
    """
    N = sys.N
    settings = [settings] * N if np.isscalar(settings) else list(settings)
    tunings = [tuning] * N if isinstance(tuning, str) else list(tuning)
    Ks = [np.asarray(k, float).reshape(b.shape[1], sys.d) for k, b in zip(K_list, sys.B)]
    if len(settings) != N or len(tunings) != N or len(Ks) != N:
        raise ConfigError("per-agent lists must have one entry per agent")
    glob = None
    if any(s == 2 for s in settings):
        glob = _override(certify_global(sys.A, sys.B, Ks), cert_override)
    bmax = max_norm(sys.B)
    out = []
    for i in range(N):
        s, rule = settings[i], tunings[i]
        if rule not in TUNING_RULES:
            raise ConfigError(f"unknown tuning rule {rule!r}")
        if s == 1 and rule in ("thm33", "thm34"):
            raise ConfigError(f"agent {i}: rule {rule} applies to setting 2")
        if s == 2 and rule == "thm31":
            raise ConfigError(f"agent {i}: rule thm31 applies to setting 1")
        cert = glob if s == 2 else _override(certify(sys.A, sys.B[i], Ks[i]), cert_override)
        kap, gam = cert.kappa, cert.gamma
        if rule == "thm33":
            Hi, ei = tune_setting2(N, kap, gam, T, c_eta)[:2]
        elif rule == "thm34":
            Hi, ei = tune_setting2_lipschitz(N, kap, gam, T, c_eta)[:2]
        elif rule == "thm31":
            n_used = N if N_guess is None else N_guess
            Hi = tune_setting1(1.0, sys.W, n_used, U, bmax, kap, gam, T, c_eta).H
            W_tilde = sys.W + (n_used - 1) * U * bmax
            D = uniform_bound(kap, gam, W_tilde, Hi, np.linalg.norm(sys.B[i], 2))
            G = costs[i].constants(D).G
            ei = tune_setting1(G, sys.W, n_used, U, bmax, kap, gam, T, c_eta).eta
        else:
            if H is None or eta is None:
                raise ConfigError("manual tuning needs explicit H and eta")
            Hi = int(H[i] if np.ndim(H) else H)
            ei = float(eta[i] if np.ndim(eta) else eta)
        dset = DacSet.from_certificate(cert, Hi, sys.B[i].shape[1], sys.d, norm=norm)
        S = None
        if s == 2:
            S = sum((sys.B[j] @ Ks[j] for j in range(N) if j != i), np.zeros((sys.d, sys.d)))
        out.append(AgentConfig(index=i, K=Ks[i], certificate=cert, H=Hi, eta=ei, setting=s,
                               dac_set=dset, others_feedback=S, U=U))
    return out


def make_agents(sys, configs, costs):
    return [GpcAgent(cfg, sys, c) for cfg, c in zip(configs, costs)]


def run_agents(sys: LdsSystem, configs, costs, gen, T, x0=None, guard=DIVERGENCE_GUARD,
               record_params=True, backend=None) -> Trace:
    """Simulate GPC agents. Uses the kernel loop when every cost has quadratic coefficients,
    else (or with backend="object") the object-level round loop."""
    quads = [c.quad_params(T) for c in costs] if backend != "object" else [None]
    if any(q is None for q in quads):
        return simulate(sys, make_agents(sys, configs, costs), gen, costs, T, x0=x0, guard=guard,
                        record_params=record_params)
    kern = kernels.get(backend)
    d, N = sys.d, sys.N
    ks = np.array(sys.k, dtype=np.intc)
    Hs = np.array([c.H for c in configs], dtype=np.intc)
    kmax, Hmax = int(ks.max()), int(Hs.max())
    B = np.zeros((N, d, kmax))
    K = np.zeros((N, kmax, d))
    C = np.zeros((N, d, d))
    S = np.zeros((N, d, d))
    radii = np.zeros((N, Hmax))
    M = np.zeros((N, Hmax, kmax, d))
    for i, cfg in enumerate(configs):
        k = ks[i]
        B[i, :, :k] = sys.B[i]
        K[i, :k] = cfg.K
        C[i] = sys.A - sys.B[i] @ cfg.K
        if cfg.setting == 2:
            S[i] = cfg.others_feedback
            C[i] -= S[i]
        radii[i, : cfg.H] = cfg.dac_set.radii
        M[i, : cfg.H, :k] = cfg.M_init
    setting = np.array([c.setting for c in configs], dtype=np.intc)
    eta = np.array([c.eta for c in configs], dtype=float)
    frob = np.array([c.dac_set.norm == "frobenius" for c in configs], dtype=np.intc)
    qx = np.array([q.qx for q in quads], dtype=float)
    qu = np.array([q.qu for q in quads], dtype=float)
    qa = np.ascontiguousarray(np.stack([q.a for q in quads]), dtype=float)
    hx = np.ascontiguousarray(np.stack([q.hx for q in quads]), dtype=float)
    qb = np.zeros((N, T, kmax))
    hu = np.zeros((N, T, kmax))
    for i, q in enumerate(quads):
        qb[i, :, : ks[i]] = q.b
        hu[i, :, : ks[i]] = q.h
    qe = np.ascontiguousarray(np.stack([q.e for q in quads]), dtype=float)
    w = np.ascontiguousarray(gen.sequence(T), dtype=float)
    if np.any(np.linalg.norm(w, axis=1) > sys.W * (1 + 1e-12)):
        raise ConfigError("generator emits disturbances above W")
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, float).reshape(d).copy()
    xs = np.zeros((T + 1, d))
    us = np.zeros((N, T, kmax))
    west = np.zeros((N, T, d))
    cost = np.zeros((N, T))
    loss = np.zeros((N, T))
    drive = np.zeros((N, T, d))
    Mhist = np.zeros((T + 1, N, Hmax, kmax, d)) if record_params else np.zeros((1, N, Hmax, kmax, d))
    status = kern.run_gpc_core(np.ascontiguousarray(sys.A), B, K, C, S, ks, Hs, setting, eta, radii, frob, M,
                               qx, qa, hx, qu, qb, hu, qe, w, x0, float(guard), int(bool(record_params)),
                               xs, us, west, cost, loss, Mhist, drive, svd_project_block)
    if status >= 0:
        raise DivergenceError(f"state norm exceeded {guard:g} at round {status}", round_index=int(status))
    hist = None
    if record_params:
        hist = [np.ascontiguousarray(Mhist[:, i, : Hs[i], : ks[i]]) for i in range(N)]
    return Trace(x=xs, u=[np.ascontiguousarray(us[i, :, : ks[i]]) for i in range(N)], w=w, w_est=west,
                 cost=cost, settings=[c.setting for c in configs], M_hist=hist,
                 meta={"backend": getattr(kern, "__name__", "?").rsplit(".", 1)[-1], "surrogate_loss": loss,
                       "final_params": [M[i, : Hs[i], : ks[i]].copy() for i in range(N)]})
