"""Acceptance criteria 1-11. Each test records one PASS/FAIL line, printed at the end of the session.

Thresholds and runtime budgets are pinned below; a criterion passes only when both hold.
"""

import math
import os
import time

import numpy as np
import pytest

from magpc import cli, config, runner
from magpc.bounds import (gradient_bound, memory_condition, memory_ogd_bound, state_bounds, sum_norms,
                          surrogate_deviation_bound, transfer_bound, uniform_bound, max_norm)
from magpc.counterfactual import (TransferStack, finite_difference_grad, ideal_state_rollout, matrix_powers,
                                  surrogate_loss, unroll_state)
from magpc.costs import QuadraticTracking
from magpc.dac import DacSet
from magpc.engine import build_configs, run_agents, svd_project_block
from magpc.agent import BallSet, QuadraticMemoryLoss, ogd_with_memory
from magpc.lds import step
from magpc.stability import certify_global, closed_loop

from helpers import random_costs, random_gen, random_instance

UNROLL_TOL = 1e-8
GRAD_TOL = 1e-5
PROJ_MARGIN = -1e-9
IDEMPOTENT_TOL = 1e-12
SLOPE_S2 = 0.65
SLOPE_S1 = 0.70
LB_RATIO = (0.05, 5.0)
LB_SPREAD = 2.0
LB_COST = (0.5, 0.01)
EQGAP_DECAY = 0.6
PATH_TOL = 1e-8
RECOVERY_TOL = 1e-12

BUDGET = {1: 10, 2: 30, 3: 10, 4: 60, 5: 300, 6: 300, 7: 120, 8: 60, 9: 300, 10: 60, 11: 120}
NAMES = {1: "state-evolution unrolling", 2: "gradient correctness", 3: "projection optimality",
         4: "bound suites", 5: "sublinear regret, setting 2", 6: "setting-1 robustness",
         7: "lower bound", 8: "OGD-with-memory bound", 9: "equilibrium tracking",
         10: "disturbance recovery", 11: "determinism"}

RESULTS = {}
RECOVERY = []


def record(n, ok, detail, t0):
    sec = time.perf_counter() - t0
    within = sec < BUDGET[n]
    RESULTS[n] = (bool(ok) and within, f"{detail}; {sec:.1f}s (budget {BUDGET[n]}s)")
    return RESULTS[n][0]


def summary_lines():
    out = []
    for n in range(1, 12):
        if n in RESULTS:
            ok, detail = RESULTS[n]
            out.append(f"{'PASS' if ok else 'FAIL'} criterion {n:>2} ({NAMES[n]}): {detail}")
        else:
            out.append(f"---- criterion {n:>2} ({NAMES[n]}): not run")
    return out


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _lagged(seq, t, n, d):
    return np.array([seq[t - l] if t - l >= 0 else np.zeros(d) for l in range(n)])


def _dac_input(M, sig, t, d):
    return np.einsum("pkd,pd->k", M, _lagged(sig, t - 1, M.shape[0], d))


# ---------------------------------------------------------------------------


def test_c01_unrolling_matches_simulation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst, checks, T = 0.0, 0, 30
    for _ in range(100):
        H = int(rng.integers(1, 6))
        sys, Ks = random_instance(rng, 2, d=int(rng.integers(1, 5)), N=int(rng.integers(1, 4)))
        cert = certify_global(sys.A, sys.B, Ks)
        sets = [DacSet.from_certificate(cert, H, k, sys.d) for k in sys.k]
        Ms = [s.sample(rng, T) for s in sets]
        w = rng.uniform(-1, 1, (T, sys.d)) / math.sqrt(sys.d)
        d = sys.d
        # global form: every agent feeds back the true disturbance
        x = np.zeros((T + 1, d))
        x[0] = rng.standard_normal(d)
        for t in range(T):
            us = [-K @ x[t] + _dac_input(M[t], w, t, d) for K, M in zip(Ks, Ms)]
            x[t + 1] = step(sys, x[t], us, w[t], check_bound=False)
        C = closed_loop(sys.A, sys.B, Ks)
        for t in range(T):
            for h in range(min(t, 4) + 1):
                st = TransferStack(C, sys.B, [np.stack([M[t - k] for k in range(h + 1)]) for M in Ms])
                pred = unroll_state(st, x[t - h], _lagged(w, t, H + h + 1, d))
                worst = max(worst, _rel(pred, x[t + 1]))
                checks += 1
        # proxy form: agent i feeds back w + the other agents' inputs, the others play arbitrary inputs
        i = int(rng.integers(sys.N))
        x = np.zeros((T + 1, d))
        x[0] = rng.standard_normal(d)
        proxy = np.zeros((T, d))
        other_u = [rng.uniform(-1, 1, (T, k)) for k in sys.k]
        for t in range(T):
            us = [other_u[j][t] for j in range(sys.N)]
            us[i] = -Ks[i] @ x[t] + _dac_input(Ms[i][t], proxy, t, d)
            x[t + 1] = step(sys, x[t], us, w[t], check_bound=False)
            proxy[t] = w[t] + sum(sys.B[j] @ us[j] for j in range(sys.N) if j != i)
        Ci = sys.A - sys.B[i] @ Ks[i]
        for t in range(T):
            for h in range(min(t, 4) + 1):
                st = TransferStack(Ci, [sys.B[i]], [np.stack([Ms[i][t - k] for k in range(h + 1)])])
                pred = unroll_state(st, x[t - h], _lagged(proxy, t, H + h + 1, d))
                worst = max(worst, _rel(pred, x[t + 1]))
                checks += 1
    ok = record(1, worst <= UNROLL_TOL, f"{checks} unrolls, max relative error {worst:.2e} (tol {UNROLL_TOL})", t0)
    assert ok, RESULTS[1]


def test_c02_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(100):
        H = int(rng.integers(1, 6))
        sys, Ks = random_instance(rng, 2, d=int(rng.integers(1, 5)), N=int(rng.integers(1, 4)))
        cert = certify_global(sys.A, sys.B, Ks)
        sets = [DacSet.from_certificate(cert, H, k, sys.d) for k in sys.k]
        C = closed_loop(sys.A, sys.B, Ks)
        i = int(rng.integers(sys.N))
        wins = [np.stack([s.sample(rng, 1)[0] for _ in range(H + 1)]) for s in sets]
        om = rng.uniform(-1, 1, (2 * H + 1, sys.d)) / math.sqrt(sys.d)
        cost = QuadraticTracking(sys.d, sys.k[i], rng.uniform(0.1, 1), target_x=rng.uniform(-1, 1, sys.d),
                                 target_u=rng.uniform(-0.5, 0.5, sys.k[i]))
        t = int(rng.integers(100))
        M = sets[i].sample(rng, 1)[0]
        g = surrogate_loss(i, M, C, sys.B, Ks, wins, om, cost, t).grad
        fd = finite_difference_grad(
            lambda X: surrogate_loss(i, X, C, sys.B, Ks, wins, om, cost, t, with_grad=False).loss, M)
        worst = max(worst, _rel(g, fd))
    ok = record(2, worst <= GRAD_TOL, f"100 instances, max relative error {worst:.2e} (tol {GRAD_TOL})", t0)
    assert ok, RESULTS[2]


def test_c03_projection_optimal_and_idempotent():
    t0 = time.perf_counter()
    rng = np.random.default_rng(103)
    margin, idem = math.inf, 0.0
    for _ in range(50):
        k, d = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        r = float(rng.uniform(0.2, 3.0))
        s = DacSet(1, k, d, 1.0, 0.5, tau=2 * r)
        M = rng.standard_normal((1, k, d)) * rng.uniform(0.5, 4) * r
        P = s.project(M)
        Q = svd_project_block(M[0], r)
        if Q is not None:
            assert np.allclose(Q, P[0], atol=1e-12)
        cand = s.sample(rng, 10_000)
        dist = np.sqrt(np.sum((cand - M) ** 2, axis=(1, 2, 3)))
        margin = min(margin, float(dist.min() - np.linalg.norm(P - M)))
        idem = max(idem, float(np.max(np.abs(s.project(P) - P))))
    ok = margin >= PROJ_MARGIN and idem <= IDEMPOTENT_TOL
    ok = record(3, ok, f"50 blocks, min margin {margin:.3g} (>= {PROJ_MARGIN}), idempotence {idem:.1e} "
                       f"(<= {IDEMPOTENT_TOL})", t0)
    assert ok, RESULTS[3]


def _bound_run(rng):
    """One all-agent setting-2 run whose memory satisfies the condition; None when no such draw."""
    sys, Ks = random_instance(rng, 2, d=int(rng.integers(1, 5)), N=int(rng.integers(1, 4)))
    cert = certify_global(sys.A, sys.B, Ks)
    kap, gam = cert.kappa, cert.gamma
    H = max(1, math.ceil(math.log(2 * kap) / gam) - 1) + int(rng.integers(0, 2))
    if H > 10:
        return None
    assert memory_condition(kap, gam, H)
    costs = random_costs(rng, sys)
    T = 120
    confs = build_configs(sys, Ks, costs, T, settings=2, tuning="manual", H=H, eta=float(rng.uniform(0.01, 0.2)))
    for c in confs:
        c.M_init = c.dac_set.sample(rng, 1)[0]
    gen = random_gen(rng, sys, kind="clipped-gaussian" if rng.random() < 0.5 else "sinusoidal")
    tr = run_agents(sys, confs, costs, gen, T)
    return sys, Ks, cert, confs, costs, tr, H


def test_c04_bound_suites():
    t0 = time.perf_counter()
    rng = np.random.default_rng(104)
    runs, checks, violations = 0, 0, []
    while runs < 50:
        got = _bound_run(rng)
        if got is None:
            continue
        runs += 1
        sys, Ks, cert, confs, costs, tr, H = got
        kap, gam, W, sB, mB, d = cert.kappa, cert.gamma, sys.W, sum_norms(sys.B), max_norm(sys.B), sys.d
        tau = confs[0].dac_set.tau
        C = closed_loop(sys.A, sys.B, Ks)
        Cp = matrix_powers(C, H + 1)[H + 1]
        D = uniform_bound(kap, gam, W, H, sB)
        sb = state_bounds(kap, gam, tau, W, H, sB)
        T = tr.T
        for t in range(H + 1, T):
            wins = [tr.M_hist[j][t - 1 - H: t] for j in range(sys.N)]
            om = np.array([tr.w[s] if s >= 0 else np.zeros(d) for s in range(t - 1 - 2 * H, t)])
            st = TransferStack(C, sys.B, [w[::-1] for w in wins])
            for l in range(2 * H + 1):
                checks += 1
                if np.linalg.norm(st.psi(l), 2) > transfer_bound(kap, gam, tau, H, sB, l) * (1 + 1e-9):
                    violations.append(("transfer", t, l))
            y = ideal_state_rollout(C, sys.B, wins, om)
            x = tr.x[t]
            gap = np.linalg.norm(x - y - Cp @ tr.x[t - 1 - H])
            qty = {"x": np.linalg.norm(x), "y": np.linalg.norm(y), "x_minus_y": np.linalg.norm(x - y)}
            if gap > 1e-9 * max(1.0, np.linalg.norm(x)):
                violations.append(("identity", t, gap))
            for i in range(sys.N):
                cur = tr.M_hist[i][t]
                ff = np.einsum("pkd,pd->k", cur, om[H + 1:][::-1])
                u = tr.u[i][t]
                v = -Ks[i] @ y + ff
                qty[f"u{i}"] = np.linalg.norm(u)
                qty[f"v{i}"] = np.linalg.norm(v)
                qty[f"u_minus_v{i}"] = np.linalg.norm(u - v)
                G = costs[i].constants(D).G
                dev = abs(tr.cost[i, t] - costs[i].value(t, y, v))
                checks += 1
                if dev > surrogate_deviation_bound(G, D, gam, H) * (1 + 1e-9):
                    violations.append(("surrogate", t, i, dev))
                g = surrogate_loss(i, tr.M_hist[i][t], C, sys.B, Ks, wins, om, costs[i], t).grad
                checks += 1
                if np.linalg.norm(g) > gradient_bound(G, D, H, d, W, kap, gam, mB) * (1 + 1e-9):
                    violations.append(("gradient", t, i))
            for name, val in qty.items():
                key = name.rstrip("0123456789")
                for lim in (sb[key], D):
                    checks += 1
                    if val > lim * (1 + 1e-9):
                        violations.append((name, t, val, lim))
    ok = record(4, not violations, f"{runs} runs, {checks} checks, {len(violations)} violations", t0)
    assert ok, (RESULTS[4], violations[:5])


def _regret_run(tmp, setting):
    cfg = config.resolve(config.preset("tracking"), {"setting": setting, "out": str(tmp)})
    assert cfg["T"] == [2 ** k for k in range(8, 15)] and cfg["trials"] == 20
    assert cfg["check"]["slope_max"] == {"1": SLOPE_S1, "2": SLOPE_S2}
    res = runner.run(cfg, "regret")
    RECOVERY.extend(c for c in res.checks if c.name == "recovery")
    return {c.name: c for c in res.checks}, res


def test_c05_sublinear_regret_setting2(tmp_path):
    t0 = time.perf_counter()
    checks, res = _regret_run(tmp_path, 2)
    s, p = checks["slope"], checks["post_slope"]
    ok = s.passed and p.passed and "limit 0.65" in s.detail
    ok = record(5, ok, f"slope {s.detail}, post slope {p.detail}", t0)
    assert ok, RESULTS[5]


def test_c06_setting1_robustness(tmp_path):
    t0 = time.perf_counter()
    checks, res = _regret_run(tmp_path, 1)
    s, p = checks["slope"], checks["post_slope"]
    ok = s.passed and "limit 0.7" in s.detail
    ok = record(6, ok, f"slope {s.detail}, post slope {p.detail} (informational)", t0)
    assert ok, RESULTS[6]


def test_c07_lower_bound(tmp_path):
    t0 = time.perf_counter()
    parts, good = [], True
    for name in ("lower-bound-linear", "lower-bound-dac"):
        cfg = config.resolve(config.preset(name), {"out": str(tmp_path / name)})
        assert cfg["T"] == [100, 1000, 10000] and cfg["trials"] == 200
        assert cfg["lower_bound"]["grid_points"] == 101
        assert tuple(cfg["check"]["ratio_range"]) == LB_RATIO and cfg["check"]["ratio_spread"] == LB_SPREAD
        if name == "lower-bound-linear":
            assert tuple(cfg["check"]["cost_per_round"]) == LB_COST
        res = runner.run(cfg, "lower-bound")
        good &= res.passed
        kind = name.rsplit("-", 1)[1]
        parts.append(kind + ": " + ", ".join(f"{c.name} {'ok' if c.passed else 'FAILED'} [{c.detail}]"
                                            for c in res.checks))
    ok = record(7, good, "; ".join(parts), t0)
    assert ok, RESULTS[7]


def test_c08_memory_ogd_bound():
    t0 = time.perf_counter()
    rng = np.random.default_rng(108)
    worst, violations = -math.inf, 0
    for _ in range(20):
        dim, H, T = int(rng.integers(1, 5)), int(rng.integers(0, 5)), int(rng.integers(100, 400))
        ball = BallSet(dim, float(rng.uniform(0.5, 2.0)))
        mats = rng.standard_normal((H + 1, dim, dim)) / (H + 1)
        losses = [QuadraticMemoryLoss(mats * rng.uniform(0.5, 1.5), rng.uniform(-1, 1, dim)) for _ in range(T)]
        r = ball.radius
        D0 = ball.diameter()
        G0 = max(l.gradient_bound(r) for l in losses)
        L = max(l.lipschitz(r) for l in losses)
        eta = D0 / math.sqrt((G0 ** 2 + L * H * H * G0) * T) * float(rng.uniform(0.3, 3))
        res = ogd_with_memory(losses, ball, eta, H, x_init=ball.project(rng.standard_normal(dim)))
        bound = memory_ogd_bound(D0, G0, L, H, eta, T)
        worst = max(worst, res.regret / bound)
        violations += res.regret > bound
    ok = record(8, violations == 0, f"20 instances, {violations} violations, max regret/bound {worst:.3g}", t0)
    assert ok, RESULTS[8]


def test_c09_equilibrium_tracking(tmp_path):
    t0 = time.perf_counter()
    cfg = config.resolve(config.preset("common-interest"), {"out": str(tmp_path)})
    assert cfg["T"] == [1024, 4096] and cfg["eqgap"]["eta"] is None and len(cfg["system"]["B"]) == 2
    assert cfg["check"]["eqgap_decay"] == EQGAP_DECAY and cfg["check"]["path_tol"] == PATH_TOL
    res = runner.run(cfg, "eqgap")
    checks = {c.name: c for c in res.checks}
    need = ("eqgap_decay", "static_ledgers", "path_length")
    ok = all(n in checks and checks[n].passed for n in need)
    ok = record(9, ok, "; ".join(f"{n}: {checks[n].detail}" for n in need if n in checks), t0)
    assert ok, RESULTS[9]


def test_c10_recovery_identity(tmp_path):
    t0 = time.perf_counter()
    worst = max((float(c.detail.rsplit(" ", 1)[1]) for c in RECOVERY), default=0.0)
    runs = len(RECOVERY)
    for name in ("tracking", "scalar-duopoly", "formation-toy", "grid-toy"):
        for setting in (1, 2):
            out = tmp_path / f"{name}-{setting}"
            cfg = config.resolve(config.preset(name), {"T": "512", "trials": 2, "setting": setting, "out": str(out)})
            res = runner.run(cfg, "simulate")
            rec = [c for c in res.checks if c.name == "recovery"][0]
            worst = max(worst, float(rec.detail.rsplit(" ", 1)[1]))
            runs += 1
    ok = record(10, worst <= RECOVERY_TOL, f"{runs} runs, max recovery error {worst:.2e} (tol {RECOVERY_TOL})", t0)
    assert ok, RESULTS[10]


def _csvs(d):
    out = {}
    for root, _, files in os.walk(d):
        for f in files:
            if f.endswith(".csv"):
                p = os.path.join(root, f)
                out[os.path.relpath(p, d)] = open(p, "rb").read()
    return out


def test_c11_manifest_rerun_is_byte_identical(tmp_path):
    t0 = time.perf_counter()
    jobs = [("regret", ["--preset", "tracking", "--T", "256,512,1024", "--trials", "3"]),
            ("regret", ["--preset", "tracking", "--setting", "1", "--T", "256,512", "--trials", "2"]),
            ("simulate", ["--preset", "grid-toy", "--T", "500", "--trials", "2"]),
            ("lower-bound", ["--preset", "lower-bound-linear", "--T", "100,1000", "--trials", "20"]),
            ("lower-bound", ["--preset", "lower-bound-dac", "--T", "100,1000", "--trials", "20"]),
            ("eqgap", ["--preset", "common-interest", "--T", "256,512"])]
    same, files = 0, 0
    for n, (cmd, args) in enumerate(jobs):
        a, b = tmp_path / f"a{n}", tmp_path / f"b{n}"
        assert cli.main([cmd, *args, "--out", str(a)]) == 0
        assert cli.main([cmd, "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
        fa, fb = _csvs(a), _csvs(b)
        files += len(fa)
        same += fa == fb and len(fa) > 0
    ok = record(11, same == len(jobs), f"{same}/{len(jobs)} manifests rerun byte-identically ({files} CSVs)", t0)
    assert ok, RESULTS[11]
