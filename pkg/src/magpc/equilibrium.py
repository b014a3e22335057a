"""Common-interest experiments: best-response gaps, equilibrium-gap tracking and its ledger."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .agent import AgentConfig, GpcAgent
from .bounds import sum_norms, uniform_bound
from .counterfactual import hankel, surrogate_affine
from .costs import delta_cost
from .dac import DacSet
from .errors import ConfigError, DivergenceError
from .lds import DIVERGENCE_GUARD, LdsSystem
from .regret import _fista_quadratic
from .stability import certify_global

EPS_BR = 1e-7
BR_ITERS = 10_000
SAFETY = 1.5
L_FLOOR = 1e-12


def default_stride(T):
    return 1 if T <= 2000 else math.ceil(T / 2000)


class JointLoss:
    """Stationary memory loss of the common-interest game at round t.

    All agents hold fixed parameters over the H+1 rollout steps, the state runs
    under A - sum_j B_j K_j driven by the true disturbance window, and the shared
    cost is evaluated on the state and the concatenated controls.
    `omega` holds the 2H+1 most recent disturbances, oldest first.
    """

    def __init__(self, sys: LdsSystem, K_list, cost, t, omega, H):
        self.sys, self.cost, self.t, self.H = sys, cost, int(t), int(H)
        self.B = [np.asarray(b, float) for b in sys.B]
        self.K = [np.asarray(k, float).reshape(b.shape[1], sys.d) for k, b in zip(K_list, self.B)]
        self.C = sys.A - sum(b @ k for b, k in zip(self.B, self.K))
        self.omega = np.asarray(omega, float)
        if self.omega.shape != (2 * H + 1, sys.d):
            raise ConfigError(f"disturbance window must have shape {(2 * H + 1, sys.d)}")
        self.Wq, self.Wv = hankel(self.omega, H)
        self.w = self.omega[H:]
        self.slices = np.cumsum([0] + [b.shape[1] for b in self.B])
        if cost.k != self.slices[-1] or cost.d != sys.d:
            raise ConfigError("shared cost must act on the state and the concatenated controls")

    def _dacs(self, Ms):
        return [np.einsum("pkd,qpd->qk", np.asarray(M, float), self.Wq) for M in Ms]

    def forward(self, Ms):
        dacs = self._dacs(Ms)
        z = np.zeros(self.sys.d)
        for q in range(self.H + 1):
            z = self.C @ z + self.w[q] + sum(b @ dq[q] for b, dq in zip(self.B, dacs))
        u = np.concatenate([-k @ z + np.einsum("pkd,pd->k", np.asarray(M, float), self.Wv)
                            for k, M in zip(self.K, Ms)])
        return z, u

    def value(self, Ms):
        y, u = self.forward(Ms)
        return self.cost.value(self.t, y, u)

    def value_grads(self, Ms):
        y, u = self.forward(Ms)
        val, gy, gu = self.cost.eval(self.t, y, u)
        gus = [gu[a:b] for a, b in zip(self.slices[:-1], self.slices[1:])]
        r = gy - sum(k.T @ g for k, g in zip(self.K, gus))
        rs = np.empty((self.H + 1, self.sys.d))
        rs[self.H] = r
        for q in range(self.H - 1, -1, -1):
            rs[q] = self.C.T @ rs[q + 1]
        grads = []
        for b, g in zip(self.B, gus):
            lam = rs @ b
            grads.append(np.einsum("qk,qpd->pkd", lam, self.Wq) + g[None, :, None] * self.Wv[:, None, :])
        return val, grads

    def grads(self, Ms):
        return self.value_grads(Ms)[1]

    def affine_in(self, i, Ms):
        """(y0, Jy, u0, Ju): state and joint control as affine maps of agent i's flattened parameters."""
        dacs = self._dacs(Ms)
        drive = self.w.copy()
        for j, (b, dq) in enumerate(zip(self.B, dacs)):
            if j != i:
                drive += dq @ b.T
        y0, Jy, vi0, Jvi = surrogate_affine(self.C, self.B[i], self.K[i], self.omega, drive, self.H)
        u0, Ju = [], []
        for j, (k, M) in enumerate(zip(self.K, Ms)):
            if j == i:
                u0.append(vi0)
                Ju.append(Jvi)
            else:
                u0.append(-k @ y0 + np.einsum("pkd,pd->k", np.asarray(M, float), self.Wv))
                Ju.append(-k @ Jy)
        return y0, Jy, np.concatenate(u0), np.vstack(Ju)


def _quadratic_in(loss: JointLoss, i, Ms, qp):
    """m'Pm + 2q'm + r for the shared quadratic cost as a function of agent i's parameters."""
    t = loss.t
    y0, Jy, u0, Ju = loss.affine_in(i, Ms)
    ex = y0 - qp.a[t]
    eu = u0 - qp.b[t]
    P = qp.qx * Jy.T @ Jy + qp.qu * Ju.T @ Ju
    q = qp.qx * Jy.T @ ex + 0.5 * Jy.T @ qp.hx[t] + qp.qu * Ju.T @ eu + 0.5 * Ju.T @ qp.h[t]
    r = float(qp.qx * ex @ ex + qp.hx[t] @ y0 + qp.qu * eu @ eu + qp.h[t] @ u0 + qp.e[t])
    return 0.5 * (P + P.T), q, r


@dataclass
class BrResult:
    gap: float
    raw: float
    M: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool


def _pgd(loss, i, Ms, dac_set, iters, tol):
    Ms = list(Ms)
    M = Ms[i]
    f = loss.value(Ms)
    step, gn, it = 1.0, math.inf, 0
    for it in range(1, iters + 1):
        Ms[i] = M
        g = loss.grads(Ms)[i]
        while True:
            Mn = dac_set.project(M - step * g)
            Ms[i] = Mn
            fn = loss.value(Ms)
            diff = Mn - M
            if fn <= f + np.sum(g * diff) + np.sum(diff * diff) / (2 * step) + 1e-14 * abs(f):
                break
            step *= 0.5
            if step < 1e-16:
                Ms[i] = M
                return M, it, gn
        gn = float(np.linalg.norm(diff)) / step
        M, f = Mn, fn
        step *= 1.25
        if gn <= tol:
            break
    return M, it, gn


def best_response_gap(loss: JointLoss, i, Ms, dac_set: DacSet, qp=None, eps=EPS_BR, iters=BR_ITERS,
                      tol=1e-10, start=None) -> BrResult:
    """l_t(M_t) - min over M_i of l_t(M_i, M_-i), clipped at 0 within eps."""
    Ms = [np.asarray(M, float) for M in Ms]
    current = loss.value(Ms)
    M0 = dac_set.project(Ms[i] if start is None else start)
    if qp is not None:
        P, q, r = _quadratic_in(loss, i, Ms, qp)
        M, it, gn = _fista_quadratic((P, q, r), dac_set, M0, iters, tol)
    else:
        trial = list(Ms)
        trial[i] = M0
        M, it, gn = _pgd(loss, i, trial, dac_set, iters, tol)
    trial = list(Ms)
    trial[i] = M
    best = loss.value(trial)
    raw = current - best
    gap = max(raw, 0.0) if raw >= -eps else raw
    return BrResult(gap=gap, raw=raw, M=M, iterations=it, grad_norm=gn, converged=bool(gn <= tol))


def estimate_smoothness(grad_fn, dac_sets, samples=64, seed=0, power_iters=30, safety=SAFETY) -> float:
    """Safety factor times the largest observed |grad(M) - grad(M')| / |M - M'| over feasible pairs.

    `grad_fn(Ms)` returns the joint gradient as a list of per-agent arrays. Random
    pairs are drawn from the feasible sets; a power iteration on gradient differences
    around the origin adds pairs aligned with the stiffest direction.
    """
    rng = np.random.default_rng(seed)

    def flat(gs):
        return np.concatenate([np.asarray(g).reshape(-1) for g in gs])

    best = 0.0
    for _ in range(int(samples)):
        Ma = [s.sample(rng, 1)[0] for s in dac_sets]
        Mb = [s.sample(rng, 1)[0] for s in dac_sets]
        dist = math.sqrt(sum(float(np.sum((a - b) ** 2)) for a, b in zip(Ma, Mb)))
        if dist <= 1e-14:
            continue
        best = max(best, float(np.linalg.norm(flat(grad_fn(Ma)) - flat(grad_fn(Mb)))) / dist)
    prng = np.random.default_rng([seed, 1])
    shapes = [s.shape for s in dac_sets]
    sizes = [int(np.prod(sh)) for sh in shapes]
    eps = 1e-3 * min(float(s.radii.min()) for s in dac_sets)
    base = [np.zeros(sh) for sh in shapes]
    g0 = flat(grad_fn(base))
    v = prng.standard_normal(sum(sizes))
    for _ in range(int(power_iters)):
        v /= np.linalg.norm(v)
        parts = np.split(eps * v, np.cumsum(sizes)[:-1])
        Mb = [p.reshape(sh) for p, sh in zip(parts, shapes)]
        diff = flat(grad_fn(Mb)) - g0
        best = max(best, float(np.linalg.norm(diff)) / eps)
        if not np.any(diff):
            break
        v = diff
    return max(safety * best, L_FLOOR)


# ---------------------------------------------------------------------------


@dataclass
class EqGapReport:
    T: int
    N: int
    H: int
    eta: float
    L_hat: float
    stride: int
    rounds: np.ndarray            # evaluated rounds
    br: np.ndarray                # (n_eval, N), clipped
    br_raw: np.ndarray
    eqgap: np.ndarray
    avg_eqgap_sq: float
    initial_gap: float            # l_1(M_1) - c_inf
    delta_cost: np.ndarray        # per round Delta_{c_t}
    delta_cost_estimated: bool
    dist_variation: np.ndarray    # per round |w_{t+1} - w_t|
    path_increments: np.ndarray   # per round sum_i |M_{i,t+1} - M_{i,t}|^2
    loss_drop: np.ndarray         # per round l_t(M_t) - l_t(M_{t+1})
    grad_sup: float
    diameters: list
    C_M: float
    d4_min_slack: float
    d4_violations: int
    solver_failures: int
    meta: dict = field(default_factory=dict)

    @property
    def path_length(self):
        return float(self.path_increments.sum())

    def ledger(self):
        return {"avg_eqgap_sq": self.avg_eqgap_sq, "initial_gap_over_T": self.initial_gap / self.T,
                "delta_cost_avg": float(self.delta_cost.sum()) / self.T,
                "dist_variation_avg": float(self.dist_variation.sum()) / self.T,
                "path_length": self.path_length, "C_M": self.C_M, "L_hat": self.L_hat,
                "strided": self.stride > 1, "stride": self.stride}

    def prop_d1(self):
        """(lhs, rhs): sum of squared gaps over evaluated rounds vs C_M times the path length there (+ slack)."""
        idx = self.rounds
        lhs = float(np.sum(self.eqgap ** 2))
        moved = float(self.path_increments[idx].sum())
        rhs = (self.C_M * moved if moved > 0 else 0.0) + len(idx) * EPS_BR
        return lhs, rhs

    def to_csv(self, path):
        cum_sq = np.cumsum(self.eqgap ** 2) / np.arange(1, len(self.eqgap) + 1)
        dc = np.cumsum(self.delta_cost)
        dv = np.cumsum(self.dist_variation)
        pl = np.cumsum(self.path_increments)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "i", "BR_i", "EQGAP", "cum_eqgap_sq_avg", "delta_cost_cum", "dist_variation_cum",
                         "path_length_cum"])
            for r, t in enumerate(self.rounds):
                for i in range(self.N):
                    wr.writerow([int(t), i] + [_fmt(v) for v in (self.br[r, i], self.eqgap[r], cum_sq[r], dc[t],
                                                                dv[t], pl[t])])


def _fmt(v):
    return format(float(v), ".17g")


def path_length_check(report: EqGapReport, tol=1e-8) -> bool:
    """sum_t sum_i |M_{i,t+1} - M_{i,t}|^2 <= 2 eta sum_t (l_t(M_t) - l_t(M_{t+1})) + tol."""
    lhs = report.path_length
    rhs = 2.0 * report.eta * float(report.loss_drop.sum())
    return bool(lhs <= rhs + tol)


def eqgap_run(sys: LdsSystem, K_list, cost, gen, T, H, eta=None, dac_sets=None, stride=None, x0=None,
              smooth_samples=64, seed=0, eps_br=EPS_BR, br_iters=BR_ITERS, d4_samples=2,
              guard=DIVERGENCE_GUARD) -> EqGapReport:
    """All agents run the projected gradient update on the shared memory loss.

    eta defaults to 1/L_hat. Gaps are evaluated every `stride` rounds.
    """
    N, d = sys.N, sys.d
    Ks = [np.asarray(k, float).reshape(b.shape[1], d) for k, b in zip(K_list, sys.B)]
    cert = certify_global(sys.A, sys.B, Ks)
    if dac_sets is None:
        dac_sets = [DacSet.from_certificate(cert, H, b.shape[1], d) for b in sys.B]
    stride = default_stride(T) if stride is None else int(stride)
    if stride < 1:
        raise ConfigError("stride must be at least 1")
    qp = cost.quad_params(T + 1)
    w = np.asarray(gen.sequence(T + 1), float)
    pad = np.vstack([np.zeros((2 * H + 1, d)), w])

    def window(t):
        # rounds t-1-2H .. t-1
        return pad[t: t + 2 * H + 1]

    # smoothness at the first round with a full disturbance window
    t_ref = min(2 * H + 1, T)
    ref = JointLoss(sys, Ks, cost, t_ref, window(t_ref), H)
    L_hat = estimate_smoothness(ref.grads, dac_sets, samples=smooth_samples, seed=seed)
    if eta is None:
        eta = 1.0 / L_hat
    S_list = [sum((sys.B[j] @ Ks[j] for j in range(N) if j != i), np.zeros((d, d))) for i in range(N)]
    agents = [GpcAgent(AgentConfig(index=i, K=Ks[i], certificate=cert, H=H, eta=eta, setting=2,
                                   dac_set=dac_sets[i], others_feedback=S_list[i]), sys, cost)
              for i in range(N)]
    x = np.zeros(d) if x0 is None else np.asarray(x0, float).reshape(d).copy()
    D = uniform_bound(cert.kappa, cert.gamma, sys.W, H, sum_norms(sys.B))
    diam = [max(s.diameter(), s.exact_diameter()) for s in dac_sets]
    rng = np.random.default_rng([seed, 2])

    rounds, brs, raws = [], [], []
    path = np.zeros(T)
    steps = np.zeros((T, N))
    drop = np.zeros(T)
    dcost = np.zeros(T)
    est = False
    grad_sup = 0.0
    d4_records = []
    failures = 0
    initial = None
    warm = [None] * N
    for t in range(T):
        us = [a.act(x) for a in agents]
        loss = JointLoss(sys, Ks, cost, t, window(t), H)
        Ms = [a.params.copy() for a in agents]
        val, grads = loss.value_grads(Ms)
        if initial is None:
            c_inf = cost.constants(D).c_inf
            initial = val - (c_inf if c_inf is not None else 0.0)
        grad_sup = max(grad_sup, max(float(np.linalg.norm(g)) for g in grads))
        if t % stride == 0:
            row, rrow = [], []
            for i in range(N):
                res = best_response_gap(loss, i, Ms, dac_sets[i], qp=qp, eps=eps_br, iters=br_iters,
                                        start=warm[i])
                warm[i] = res.M
                failures += int(not res.converged and res.raw < -eps_br)
                row.append(res.gap)
                rrow.append(res.raw)
                cand = [res.M] + list(dac_sets[i].sample(rng, d4_samples))
                for Mi in cand:
                    trial = list(Ms)
                    trial[i] = Mi
                    d4_records.append((t, i, loss.value(trial) - val))
            rounds.append(t)
            brs.append(row)
            raws.append(rrow)
        for a, g in zip(agents, grads):
            a.apply(g)
        new = [a.params for a in agents]
        steps[t] = [float(np.linalg.norm(m1 - m0)) for m0, m1 in zip(Ms, new)]
        path[t] = float(np.sum(steps[t] ** 2))
        drop[t] = val - loss.value(new)
        xn = sys.A @ x + sum(b @ u for b, u in zip(sys.B, us)) + w[t]
        if not np.all(np.isfinite(xn)) or np.linalg.norm(xn) > guard:
            raise DivergenceError(f"state norm exceeded {guard:g} at round {t + 1}", round_index=t + 1)
        total = sum(b @ u for b, u in zip(sys.B, us))
        for i, a in enumerate(agents):
            a.record(xn, total - sys.B[i] @ us[i])
        if t + 1 < T:
            dcost[t], e = delta_cost(cost, t, D)
            est = est or e
        x = xn
    dist = np.linalg.norm(np.diff(w[: T + 1], axis=0), axis=1)
    br = np.array(brs).reshape(-1, N)
    eqgap = br.max(axis=1) if br.size else np.zeros(0)
    consts = [dm / eta + grad_sup if eta > 0 else math.inf for dm in diam]
    C_M = sum(c * c for c in consts)
    # D.4: l(M_i, M_-i) - l(M_t) >= -(diam_i/eta + GD) |M_{i,t+1} - M_{i,t}|
    slack = math.inf
    viol = 0
    for t, i, lhs in d4_records:
        s_ = lhs + (consts[i] * steps[t, i] if steps[t, i] > 0 else 0.0)
        slack = min(slack, s_)
        viol += int(s_ < -1e-9 * max(1.0, abs(lhs)))
    return EqGapReport(T=T, N=N, H=H, eta=float(eta), L_hat=float(L_hat), stride=stride,
                       rounds=np.array(rounds, dtype=int), br=br, br_raw=np.array(raws).reshape(-1, N),
                       eqgap=eqgap, avg_eqgap_sq=float(np.mean(eqgap ** 2)) if eqgap.size else 0.0,
                       initial_gap=float(initial), delta_cost=dcost, delta_cost_estimated=est,
                       dist_variation=dist, path_increments=path, loss_drop=drop, grad_sup=grad_sup,
                       diameters=diam, C_M=C_M, d4_min_slack=slack, d4_violations=viol,
                       solver_failures=failures,
                       meta={"certificate": cert.as_dict(), "D": D, "final_params": [a.params.copy() for a in agents]})
