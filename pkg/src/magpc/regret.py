"""Counterfactual replays, best-in-hindsight comparators, regret curves and lower-bound experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dac import DacSet
from .errors import ConfigError, NotStabilizingError, DefectiveMatrixError
from .lds import LdsSystem, Trace
from .stability import certify

DEFAULT_SOLVER = {"iters": 20_000, "tol": 1e-8, "restarts": 5}


# ---------------------------------------------------------------------------
# policies for replay


@dataclass
class LinearPolicy:
    K: np.ndarray

    def __call__(self, t, x, omega):
        return -np.atleast_2d(self.K) @ x


@dataclass
class DacPolicy:
    K: np.ndarray
    M: np.ndarray

    def __call__(self, t, x, omega):
        H = self.M.shape[0]
        u = -np.atleast_2d(self.K) @ x
        for p in range(1, min(H, t) + 1):
            u = u + self.M[p - 1] @ omega[t - p]
        return u


@dataclass
class ControlSequence:
    u: np.ndarray

    def __call__(self, t, x, omega):
        return self.u[t]


HELD_MODES = ("controls", "policies")


def held_dynamics(trace: Trace, sys: LdsSystem, i: int, held="controls", K_list=None):
    """(A_eff, exogenous input per round) seen by agent i when it deviates alone.

    held="controls": the other agents' recorded inputs are replayed verbatim.
    held="policies": the other agents keep their linear feedback -K_j x on the
    counterfactual state and replay only their recorded feedforward parts.
    """
    if held == "controls":
        return sys.A, trace.others_input(sys, i) + trace.w
    if held != "policies":
        raise ConfigError(f"held must be one of {HELD_MODES}")
    if K_list is None:
        raise ConfigError("held='policies' needs every agent's K")
    A_eff = sys.A.copy()
    other = trace.w.copy()
    xs = trace.x[:-1]
    for j, (b, u) in enumerate(zip(sys.B, trace.u)):
        if j == i:
            continue
        Kj = np.asarray(K_list[j], float).reshape(b.shape[1], sys.d)
        A_eff = A_eff - b @ Kj
        other += (u + xs @ Kj.T) @ b.T
    return A_eff, other


def counterfactual_rollout(trace: Trace, sys: LdsSystem, i: int, policy, cost, start=0, end=None,
                           cost_from=None, return_path=False, held="controls", K_list=None):
    """Replay agent i's policy with the disturbance and the other agents held at their recorded behaviour."""
    T = trace.T
    end = T if end is None else end
    cost_from = start if cost_from is None else cost_from
    if not 0 <= start <= cost_from <= end <= T:
        raise ConfigError("need 0 <= start <= cost_from <= end <= T")
    A, other = held_dynamics(trace, sys, i, held, K_list)
    omega = trace.w_est[i]
    B = sys.B[i]
    x = trace.x[start].copy()
    xs = np.zeros((end - start, sys.d))
    us = np.zeros((end - start, B.shape[1]))
    for r, t in enumerate(range(start, end)):
        u = np.asarray(policy(t, x, omega), float).reshape(-1)
        xs[r], us[r] = x, u
        x = A @ x + B @ u + other[t]
    ts = np.arange(start, end)
    vals = cost.values(ts, xs, us)
    total = float(vals[cost_from - start:].sum())
    if return_path:
        return total, xs, us, vals
    return total


# ---------------------------------------------------------------------------
# linear comparator by certified grid


@dataclass
class LinearComparator:
    K: np.ndarray
    cost: float
    grid_size: int
    feasible: int
    resolution: list


def certified_grid(A, B, axes, kappa, gamma):
    """Grid points K (shape k x d) that are (kappa, gamma)-strongly stable for (A, B)."""
    A = np.atleast_2d(A)
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    k, d = B.shape[1], A.shape[0]
    if len(axes) != k * d:
        raise ConfigError(f"grid needs {k * d} axes")
    mesh = np.meshgrid(*[np.asarray(a, float) for a in axes], indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1).reshape(-1, k, d)
    keep = []
    for K in pts:
        try:
            c = certify(A, B, K)
        except (NotStabilizingError, DefectiveMatrixError):
            continue
        if c.kappa <= kappa + 1e-12 and c.gamma >= gamma - 1e-12:
            keep.append(K)
    return np.array(keep).reshape(-1, k, d), pts.shape[0]


def linear_costs(trace, sys, i, cost, Ks, start=0, end=None, cost_from=None, held="controls", K_list=None):
    """Counterfactual cost of each gain in `Ks` (G, k, d), vectorised over the grid."""
    T = trace.T
    end = T if end is None else end
    cost_from = start if cost_from is None else cost_from
    A, other = held_dynamics(trace, sys, i, held, K_list)
    B = sys.B[i]
    G = Ks.shape[0]
    X = np.tile(trace.x[start], (G, 1))
    tot = np.zeros(G)
    for t in range(start, end):
        U = -np.einsum("gkd,gd->gk", Ks, X)
        if t >= cost_from:
            tot += cost.values(np.full(G, t), X, U)
        X = X @ A.T + U @ B.T + other[t]
    return tot


def best_linear(trace, sys, i, cost, axes, kappa, gamma, start=0, end=None, cost_from=None,
                held="controls", K_list=None) -> LinearComparator:
    Ks, n = certified_grid(sys.A, sys.B[i], axes, kappa, gamma)
    if Ks.shape[0] == 0:
        raise ConfigError("no grid point is certified for the requested (kappa, gamma)")
    tot = linear_costs(trace, sys, i, cost, Ks, start, end, cost_from, held, K_list)
    j = int(np.argmin(tot))
    res = [float(np.diff(np.asarray(a, float))[0]) if len(a) > 1 else 0.0 for a in axes]
    return LinearComparator(K=Ks[j], cost=float(tot[j]), grid_size=n, feasible=Ks.shape[0], resolution=res)


# ---------------------------------------------------------------------------
# disturbance-action comparator by projected gradient on the exact affine rollout


@dataclass
class DacComparator:
    M: np.ndarray
    cost: float
    iterations: int
    grad_norm: float
    converged: bool
    candidates: dict = field(default_factory=dict)


class DacProblem:
    """Counterfactual states/inputs of agent i under a DAC comparator, affine in vec(M).

    The comparator consumes the signal agent i observed in the run (trace.w_est[i]).
    """

    def __init__(self, trace: Trace, sys: LdsSystem, i: int, cost, H: int, K=None, start=0, end=None,
                 backend=None, held="controls", K_list=None):
        T = trace.T
        self.start, self.end = start, (T if end is None else end)
        self.i, self.H, self.cost, self.backend = i, H, cost, backend
        A_eff, other = held_dynamics(trace, sys, i, held, K_list)
        A = np.ascontiguousarray(A_eff)
        B = np.ascontiguousarray(sys.B[i])
        k, d = B.shape[1], sys.d
        self.K = np.ascontiguousarray(np.asarray(K if K is not None else np.zeros((k, d)), float).reshape(k, d))
        self.shape = (H, k, d)
        n, m = self.end - self.start, H * k * d
        other = np.ascontiguousarray(other)
        omega = np.ascontiguousarray(trace.w_est[i])
        self.X0 = np.zeros((n, d))
        self.J = np.zeros((n, d, m))
        self.U0 = np.zeros((n, k))
        self.F = np.zeros((n, k, m))
        kernels.get(backend).affine_maps_core(A, B, self.K, omega, other,
                                              np.ascontiguousarray(trace.x[self.start]),
                                              self.start, self.end, H, self.X0, self.J, self.U0, self.F)
        self.ts = np.arange(self.start, self.end)
        self._quad = cost.quad_params(T)

    def path(self, M):
        m = np.asarray(M, float).reshape(-1)
        return self.X0 + self.J @ m, self.U0 + self.F @ m

    def costs(self, M):
        X, U = self.path(M)
        return self.cost.values(self.ts, X, U)

    def total(self, M, cost_from=None):
        c = self.costs(M)
        lo = 0 if cost_from is None else cost_from - self.start
        return float(c[lo:].sum())

    def quadratic(self, cost_from=None):
        """(P, q, r) with total cost m'Pm + 2q'm + r, or None for non-quadratic costs."""
        qp = self._quad
        if qp is None:
            return None
        lo = 0 if cost_from is None else cost_from - self.start
        sl = slice(self.start + lo, self.end)
        J, F, X0, U0 = self.J[lo:], self.F[lo:], self.X0[lo:], self.U0[lo:]
        ex = X0 - qp.a[sl]
        eu = U0 - qp.b[sl]
        P = qp.qx * np.einsum("tdm,tdn->mn", J, J) + qp.qu * np.einsum("tkm,tkn->mn", F, F)
        q = (qp.qx * np.einsum("tdm,td->m", J, ex) + 0.5 * np.einsum("tdm,td->m", J, qp.hx[sl])
             + qp.qu * np.einsum("tkm,tk->m", F, eu) + 0.5 * np.einsum("tkm,tk->m", F, qp.h[sl]))
        r = float(qp.qx * np.sum(ex * ex) + np.sum(qp.hx[sl] * X0) + qp.qu * np.sum(eu * eu)
                  + np.sum(qp.h[sl] * U0) + np.sum(qp.e[sl]))
        return 0.5 * (P + P.T), q, r

    def gradient(self, M, cost_from=None):
        X, U = self.path(M)
        lo = 0 if cost_from is None else cost_from - self.start
        gx, gu = _batch_grads(self.cost, self.ts[lo:], X[lo:], U[lo:])
        return (np.einsum("tdm,td->m", self.J[lo:], gx) + np.einsum("tkm,tk->m", self.F[lo:], gu)).reshape(self.shape)

    def solve(self, dac_set: DacSet, cost_from=None, solver=None, seed=0, candidates=()) -> DacComparator:
        opts = dict(DEFAULT_SOLVER)
        opts.update(solver or {})
        rng = np.random.default_rng(seed)
        starts = [np.zeros(self.shape)] + [np.asarray(c, float) for c in candidates]
        starts += list(dac_set.sample(rng, max(int(opts["restarts"]) - 1, 0)))
        quad = self.quadratic(cost_from)
        best = None
        scores = {}
        for j, M0 in enumerate(starts):
            M0 = dac_set.project(M0)
            if int(opts["iters"]) > 0:
                if quad is not None:
                    M, it, gn = _fista_quadratic(quad, dac_set, M0, int(opts["iters"]), float(opts["tol"]),
                                                 self.backend)
                else:
                    M, it, gn = _pgd_backtracking(self, dac_set, M0, cost_from, int(opts["iters"]), float(opts["tol"]))
            else:
                M, it, gn = M0, 0, math.nan
            val = self.total(M, cost_from)
            if j < 1 + len(candidates):
                scores["zero" if j == 0 else f"candidate{j - 1}"] = self.total(M0, cost_from)
            if best is None or val < best.cost:
                best = DacComparator(M=M, cost=val, iterations=it, grad_norm=gn, converged=bool(gn <= opts["tol"]))
        # never worse than a feasible candidate evaluated as-is
        for j, M0 in enumerate(starts[: 1 + len(candidates)]):
            M0 = dac_set.project(M0)
            val = self.total(M0, cost_from)
            if val < best.cost:
                best = DacComparator(M=M0, cost=val, iterations=0, grad_norm=math.nan, converged=False)
        best.candidates = scores
        return best


def _batch_grads(cost, ts, X, U):
    if hasattr(cost, "grads"):
        return cost.grads(ts, X, U)
    gx = np.zeros_like(X)
    gu = np.zeros_like(U)
    for r, t in enumerate(ts):
        gx[r], gu[r] = cost.grad(int(t), X[r], U[r])
    return gx, gu


def _fista_quadratic(quad, dac_set, M0, iters, tol, backend=None):
    P, q, _ = quad
    shape = M0.shape
    ev = np.linalg.eigvalsh(P)
    L = 2.0 * float(ev[-1])
    if L <= 0:
        return M0, 0, 0.0
    if ev[0] > 1e-10 * ev[-1]:
        # interior optimum: the unconstrained minimiser is already feasible
        m = np.linalg.solve(P, -q).reshape(shape)
        if dac_set.contains(m, tol=0.0):
            return m, 0, 0.0
    if dac_set.norm == "frobenius" or min(dac_set.k, dac_set.d) == 1:
        x = np.ascontiguousarray(M0.reshape(-1), dtype=float).copy()
        it, gn = kernels.get(backend).fista_blocks_core(np.ascontiguousarray(P), np.ascontiguousarray(q),
                                                        np.ascontiguousarray(dac_set.radii, dtype=float),
                                                        x, iters, tol, L)
        return x.reshape(shape), int(it), float(gn)
    x = M0.reshape(-1).copy()
    y = x.copy()
    tk = 1.0
    gn = math.inf
    it = 0
    for it in range(1, iters + 1):
        g = 2.0 * (P @ y + q)
        x_new = dac_set.project((y - g / L).reshape(shape)).reshape(-1)
        # gradient mapping at x (checked every few steps)
        if it % 10 == 0 or it == iters:
            gx = 2.0 * (P @ x_new + q)
            xm = dac_set.project((x_new - gx / L).reshape(shape)).reshape(-1)
            gn = L * float(np.linalg.norm(x_new - xm))
            if gn <= tol:
                x = x_new
                break
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * tk * tk))
        # adaptive restart on a non-descent step
        if (y - x_new) @ (x_new - x) > 0:
            t_new = 1.0
            y = x_new.copy()
        else:
            y = x_new + ((tk - 1) / t_new) * (x_new - x)
        x, tk = x_new, t_new
    return x.reshape(shape), it, gn


def _pgd_backtracking(problem, dac_set, M0, cost_from, iters, tol):
    M = M0
    f = problem.total(M, cost_from)
    step = 1.0
    gn = math.inf
    it = 0
    for it in range(1, iters + 1):
        g = problem.gradient(M, cost_from)
        while True:
            Mn = dac_set.project(M - step * g)
            fn = problem.total(Mn, cost_from)
            diff = Mn - M
            if fn <= f + np.sum(g * diff) + np.sum(diff * diff) / (2 * step) + 1e-12 * abs(f):
                break
            step *= 0.5
            if step < 1e-16:
                return M, it, gn
        gn = float(np.linalg.norm(diff)) / step
        M, f = Mn, fn
        step *= 1.25
        if gn <= tol:
            break
    return M, it, gn


def best_dac(trace, sys, i, dac_set: DacSet, cost, K=None, solver=None, start=0, end=None, cost_from=None,
             seed=0, candidates=(), backend=None, held="controls", K_list=None) -> DacComparator:
    prob = DacProblem(trace, sys, i, cost, dac_set.H, K=K, start=start, end=end, backend=backend,
                      held=held, K_list=K_list)
    return prob.solve(dac_set, cost_from=cost_from, solver=solver, seed=seed, candidates=candidates)


# ---------------------------------------------------------------------------


@dataclass
class RegretReport:
    agent: int
    comparator: str
    H_start: int
    realized_full: float
    comparator_full: float
    realized_post: float
    comparator_post: float
    argument: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def regret_full(self):
        return self.realized_full - self.comparator_full

    @property
    def regret_post(self):
        return self.realized_post - self.comparator_post

    @property
    def regret(self):
        return self.regret_full


def regret(trace: Trace, i: int, comparator_full: float, comparator_post: float, H_start: int,
           tag: str = "dac", argument=None, diagnostics=None) -> RegretReport:
    """Realized minus comparator cost, both over the full horizon and over rounds >= H_start."""
    if not 0 <= H_start <= trace.T:
        raise ConfigError(f"H_start={H_start} outside [0, T]")
    c = trace.cost[i]
    return RegretReport(agent=i, comparator=tag, H_start=H_start, realized_full=float(c.sum()),
                        comparator_full=float(comparator_full), realized_post=float(c[H_start:].sum()),
                        comparator_post=float(comparator_post), argument=argument, diagnostics=diagnostics or {})


def dac_regret(trace, sys, i, cost, dac_set, K, H_start, solver=None, seed=0, include_final=True,
               backend=None, held="controls", K_list=None) -> RegretReport:
    prob = DacProblem(trace, sys, i, cost, dac_set.H, K=K, backend=backend, held=held, K_list=K_list)
    cands = [trace.M_hist[i][-1]] if include_final and trace.M_hist is not None else []
    full = prob.solve(dac_set, solver=solver, seed=seed, candidates=cands)
    post = prob.solve(dac_set, cost_from=H_start, solver=solver, seed=seed, candidates=cands + [full.M])
    diag = {"iterations_full": full.iterations, "grad_norm_full": full.grad_norm,
            "iterations_post": post.iterations, "grad_norm_post": post.grad_norm}
    diag["held"] = held
    return regret(trace, i, full.cost, post.cost, H_start, "dac", argument=full.M, diagnostics=diag)


def linear_regret(trace, sys, i, cost, axes, kappa, gamma, H_start, held="controls", K_list=None) -> RegretReport:
    full = best_linear(trace, sys, i, cost, axes, kappa, gamma, held=held, K_list=K_list)
    post = best_linear(trace, sys, i, cost, axes, kappa, gamma, cost_from=H_start, held=held, K_list=K_list)
    return regret(trace, i, full.cost, post.cost, H_start, "linear", argument=full.K,
                  diagnostics={"grid_size": full.grid_size, "feasible": full.feasible, "resolution": full.resolution})


# ---------------------------------------------------------------------------


def loglog_slope(Ts, values):
    """Least-squares slope of log(value) on log(T); None with fewer than 3 usable points."""
    Ts = np.asarray(Ts, float)
    v = np.asarray(values, float)
    ok = v > 0
    if ok.sum() < 3:
        return None
    return float(np.polyfit(np.log(Ts[ok]), np.log(v[ok]), 1)[0])


@dataclass
class CurveTable:
    Ts: list
    mean: np.ndarray
    stderr: np.ndarray
    mean_post_pos: np.ndarray
    slope: float | None
    slope_post: float | None
    rows: list


def regret_curve(cell, Ts, trials, seed=0, jobs=1) -> CurveTable:
    """`cell(T, trial, seed)` returns a list of RegretReports (one per agent)."""
    tasks = [(T, n) for T in Ts for n in range(trials)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_call_cell, [(cell, T, n, seed) for T, n in tasks]))
    else:
        results = [cell(T, n, seed) for T, n in tasks]
    rows = []
    mean, se, post = [], [], []
    for T in Ts:
        vals, pos = [], []
        for (Tc, n), reps in zip(tasks, results):
            if Tc != T:
                continue
            for r in reps:
                rows.append((T, n, r))
            vals.append(np.mean([r.regret_full for r in reps]))
            pos.append(np.mean([max(r.regret_post, 0.0) for r in reps]))
        vals = np.asarray(vals)
        mean.append(vals.mean())
        se.append(vals.std(ddof=1) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0)
        post.append(np.mean(pos))
    mean, se, post = np.array(mean), np.array(se), np.array(post)
    full_for_slope = mean if np.all(mean > 0) else np.maximum(mean, 0.0)
    return CurveTable(Ts=list(Ts), mean=mean, stderr=se, mean_post_pos=post,
                      slope=loglog_slope(Ts, full_for_slope), slope_post=loglog_slope(Ts, post), rows=rows)


def _call_cell(args):
    cell, T, n, seed = args
    return cell(T, n, seed)


# ---------------------------------------------------------------------------
# lower-bound instances


def lower_bound_phi_linear(bits, gains, x0=1.0):
    """Total cost of the feedback u = g x on the scalar plant x' = u/2 started at x0.

    The state is (g/2)^t x0, so the total is sum_t g (g/2)^t x0 (b_t - 1/2) + T/2.
    For |g| <= 1 the geometric factor underflows to exactly zero after about 1100
    rounds, so later rounds only contribute the constant 1/2.
    """
    bits = np.asarray(bits, float)
    g = np.asarray(gains, float)[:, None]
    n = bits.size
    span = n if np.max(np.abs(g), initial=0.0) > 1 else min(n, 1100)
    t = np.arange(span)[None, :]
    with np.errstate(under="ignore"):
        terms = g * np.power(g / 2.0, t) * x0 * (bits[None, :span] - 0.5)
    return terms.sum(axis=1) + 0.5 * n


def lower_bound_phi_dac(bits, levels, H):
    """Total cost of the equal-block DAC family with w = 1, B = 1, A = 0, K = 0."""
    bits = np.asarray(bits, float)
    t = np.arange(bits.size)
    lagsum = np.minimum(t, H)
    lv = np.asarray(levels, float)[:, None]
    return (lv * lagsum[None, :] * (bits[None, :] - 0.5)).sum(axis=1) + 0.5 * bits.size


@dataclass
class LowerBoundReport:
    kind: str
    Ts: list
    trials: int
    mean_regret: np.ndarray
    stderr: np.ndarray
    ratio: np.ndarray
    mean_cost_per_round: np.ndarray
    per_trial: dict


def lower_bound_experiment(kind, Ts, trials, seed=0, agent="gpc", H=2, eta_rule="sqrt", c_eta=1.0,
                           kappa=1.0, gamma=0.5, x0=1.0, grid_points=101, backend=None) -> LowerBoundReport:
    from .costs import LowerBoundCost
    from .engine import run_agents
    from .agent import AgentConfig
    from .lds import DisturbanceGenerator
    from .stability import StabilityCertificate

    if kind not in ("linear", "dac"):
        raise ConfigError("kind must be 'linear' or 'dac'")
    means, ses, ratios, per_round = [], [], [], []
    per_trial = {}
    for T in Ts:
        regs, costs_pr = [], []
        for n in range(trials):
            cseed = int(np.random.SeedSequence([int(seed), int(T), n]).generate_state(1)[0])
            cost = LowerBoundCost(seed=cseed)
            if kind == "linear":
                sys = LdsSystem(np.zeros((1, 1)), [np.full((1, 1), 0.5)], W=1.0)
                gen = DisturbanceGenerator("constant-vector", 1, 1.0, value=[0.0])
                start = np.array([x0])
            else:
                sys = LdsSystem(np.zeros((1, 1)), [np.ones((1, 1))], W=1.0)
                gen = DisturbanceGenerator("constant-vector", 1, 1.0, value=[1.0])
                start = np.zeros(1)
            cert = StabilityCertificate(kappa=kappa, gamma=gamma, Q=np.eye(1), Lmat=np.zeros((1, 1)), residual=0.0)
            dset = DacSet(H, 1, 1, kappa, gamma, certificate=cert)
            eta = 0.0 if agent == "zero" else c_eta / math.sqrt(T)
            cfg = AgentConfig(index=0, K=np.zeros((1, 1)), certificate=cert, H=H, eta=eta, setting=2,
                              dac_set=dset, others_feedback=np.zeros((1, 1)))
            tr = run_agents(sys, [cfg], [cost], gen, T, x0=start, record_params=False, backend=backend)
            bits = cost.bits(np.arange(T))
            realized = float(tr.cost[0].sum())
            if kind == "linear":
                grid = np.linspace(0.0, 1.0, grid_points)
                ok = (grid <= kappa + 1e-12) & (grid / 2 <= 1 - gamma + 1e-12)
                comp = float(lower_bound_phi_linear(bits, grid[ok], x0).min())
            else:
                r = float(dset.radii.min())
                comp = float(lower_bound_phi_dac(bits, np.linspace(-r, r, grid_points), H).min())
            regs.append(realized - comp)
            costs_pr.append(realized / T)
        regs = np.array(regs)
        per_trial[T] = regs
        means.append(regs.mean())
        ses.append(regs.std(ddof=1) / math.sqrt(trials) if trials > 1 else 0.0)
        ratios.append(regs.mean() / math.sqrt(T))
        per_round.append(float(np.mean(costs_pr)))
    return LowerBoundReport(kind=kind, Ts=list(Ts), trials=trials, mean_regret=np.array(means), stderr=np.array(ses),
                            ratio=np.array(ratios), mean_cost_per_round=np.array(per_round), per_trial=per_trial)
