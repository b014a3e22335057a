import numpy as np
import pytest

from magpc.agent import AgentConfig
from magpc.costs import LowerBoundCost, QuadraticTracking
from magpc.dac import DacSet
from magpc.engine import run_agents
from magpc.errors import ConfigError
from magpc.lds import DisturbanceGenerator, LdsSystem, step
from magpc.regret import (ControlSequence, DacPolicy, LinearPolicy, best_dac, best_linear, counterfactual_rollout,
                          dac_regret, linear_regret, loglog_slope, lower_bound_experiment, lower_bound_phi_dac,
                          lower_bound_phi_linear, regret, regret_curve)
from magpc.stability import StabilityCertificate, certify

from helpers import manual_configs, random_costs, random_gen, random_instance


def _run(seed=0, setting=2, T=80, H=3, eta=0.05, N=2, d=2, kmax=2):
    rng = np.random.default_rng(seed)
    sys, Ks = random_instance(rng, setting, d=d, N=N, kmax=kmax)
    if setting == 1:
        eta = eta / 20
    costs = random_costs(rng, sys)
    # proxy-driven agents feed their own controls back through the signal, so they start at zero
    confs = manual_configs(rng, sys, Ks, costs, T, setting, H, eta, random_init=setting == 2)
    tr = run_agents(sys, confs, costs, random_gen(rng, sys), T)
    return sys, Ks, costs, confs, tr


def _scalar_lb(T=200, x0=1.0, seed=0, eta=0.0):
    sys = LdsSystem([[0.0]], [[[0.5]]])
    cert = StabilityCertificate(1.0, 0.5, np.eye(1), np.zeros((1, 1)), 0.0)
    dset = DacSet(2, 1, 1, 1.0, 0.5, certificate=cert)
    cfg = AgentConfig(index=0, K=np.zeros((1, 1)), certificate=cert, H=2, eta=eta, setting=2, dac_set=dset,
                      others_feedback=np.zeros((1, 1)))
    cost = LowerBoundCost(seed=seed)
    gen = DisturbanceGenerator("constant-vector", 1, 1.0, value=[0.0])
    tr = run_agents(sys, [cfg], [cost], gen, T, x0=np.array([x0]))
    return sys, cost, tr


@pytest.mark.parametrize("setting", [1, 2])
def test_replay_identity(setting):
    sys, Ks, costs, confs, tr = _run(setting=setting)
    for i in range(sys.N):
        for held in ("controls", "policies"):
            c = counterfactual_rollout(tr, sys, i, ControlSequence(tr.u[i]), costs[i], held=held, K_list=Ks)
            assert c == pytest.approx(tr.cost[i].sum(), rel=1e-12, abs=1e-12)


def test_lower_bound_linear_counterfactual_state():
    sys, cost, tr = _scalar_lb(T=30)
    for K in (0.0, 0.4, -0.9):
        _, xs, _, _ = counterfactual_rollout(tr, sys, 0, LinearPolicy(np.array([[-K]])), cost, return_path=True)
        assert np.allclose(xs[:, 0], (K / 2) ** np.arange(30), atol=1e-15)


def test_rollout_matches_independent_resimulation():
    sys, Ks, costs, confs, tr = _run(seed=3, d=3)
    i = 1
    M = confs[i].dac_set.sample(np.random.default_rng(0), 1)[0]
    pol = DacPolicy(Ks[i], M)
    got = counterfactual_rollout(tr, sys, i, pol, costs[i])
    x, total = tr.x[0].copy(), 0.0
    for t in range(tr.T):
        u = -Ks[i] @ x
        for p in range(1, 4):
            if t - p >= 0:
                u = u + M[p - 1] @ tr.w_est[i][t - p]
        total += costs[i].value(t, x, u)
        ctrl = [u if j == i else tr.u[j][t] for j in range(sys.N)]
        x = step(sys, x, ctrl, tr.w[t])
    assert got == pytest.approx(total, rel=1e-10)


def test_best_linear_lower_bound_grid():
    sys, cost, tr = _scalar_lb(T=500)
    axes = [-np.linspace(0, 1, 101)]
    res = best_linear(tr, sys, 0, cost, axes, 1.0, 0.5)
    phi0 = counterfactual_rollout(tr, sys, 0, LinearPolicy(np.zeros((1, 1))), cost)
    assert phi0 == pytest.approx(250.0)
    assert res.cost <= 250.0 + 1e-12
    bits = cost.bits(np.arange(500))
    assert res.cost == pytest.approx(lower_bound_phi_linear(bits, np.linspace(0, 1, 101)).min(), abs=1e-9)


def test_best_linear_plateau_without_excitation():
    A, B = np.array([[0.5]]), np.array([[1.0]])
    sys = LdsSystem(A, [B])
    cert = certify(A, B, [[0.0]])
    cfg = AgentConfig(index=0, K=np.zeros((1, 1)), certificate=cert, H=1, eta=0.0, setting=1,
                      dac_set=DacSet(1, 1, 1, cert.kappa, cert.gamma))
    cost = QuadraticTracking(1, 1, 1.0, target_x=[0.3])
    tr = run_agents(sys, [cfg], [cost], DisturbanceGenerator("constant-vector", 1, 1.0, value=[0.0]), 50)
    res = best_linear(tr, sys, 0, cost, [np.linspace(-0.5, 0.5, 11)], 3.0, 0.01)
    assert res.cost == pytest.approx(50 * 0.09)


def test_best_linear_refinement():
    sys, Ks, costs, confs, tr = _run(seed=4, N=1, d=1, setting=1, kmax=1)
    k = Ks[0][0, 0]
    coarse = best_linear(tr, sys, 0, costs[0], [np.linspace(k - 0.5, k + 0.5, 101)], 50.0, 0.01)
    fine = best_linear(tr, sys, 0, costs[0], [np.linspace(k - 0.5, k + 0.5, 1001)], 50.0, 0.01)
    assert coarse.cost - fine.cost <= 1e-3 * max(1.0, abs(fine.cost))


def test_singleton_set_zero_regret():
    sys, Ks, costs, confs, tr = _run(seed=5, eta=0.0)
    for i, c in enumerate(confs):
        single = DacSet(c.H, sys.k[i], sys.d, 1.0, 0.5, tau=0.0)
        frozen = _rerun_zero(sys, Ks, costs, confs, tr)
        r = dac_regret(frozen, sys, i, costs[i], single, Ks[i], c.H, held="policies", K_list=Ks)
        assert abs(r.regret_full) <= 1e-9 * max(1.0, r.realized_full)


def _rerun_zero(sys, Ks, costs, confs, tr):
    for c in confs:
        c.M_init = np.zeros(c.dac_set.shape)
    gen = DisturbanceGenerator("explicit-sequence", sys.d, sys.W, values=tr.w)
    return run_agents(sys, confs, costs, gen, tr.T)


def test_scalar_h1_solver_matches_grid():
    sys, Ks, costs, confs, tr = _run(seed=6, N=1, d=1, H=1, setting=1, T=120, kmax=1)
    c = confs[0]
    res = best_dac(tr, sys, 0, c.dac_set, costs[0], K=Ks[0])
    r = c.dac_set.radii[0]
    grid = np.linspace(-r, r, 4001)
    vals = [counterfactual_rollout(tr, sys, 0, DacPolicy(Ks[0], np.array([[[g]]])), costs[0]) for g in grid]
    assert res.cost == pytest.approx(min(vals), abs=1e-4)
    assert res.cost <= min(vals) + 1e-9


@pytest.mark.parametrize("setting", [1, 2])
def test_solver_dominates_feasible_points(setting):
    sys, Ks, costs, confs, tr = _run(seed=7, setting=setting, T=150)
    held = "policies" if setting == 2 else "controls"
    for i, c in enumerate(confs):
        res = best_dac(tr, sys, i, c.dac_set, costs[i], K=Ks[i], held=held, K_list=Ks)
        zero = counterfactual_rollout(tr, sys, i, DacPolicy(Ks[i], np.zeros(c.dac_set.shape)), costs[i],
                                      held=held, K_list=Ks)
        final = counterfactual_rollout(tr, sys, i, DacPolicy(Ks[i], tr.M_hist[i][-1]), costs[i], held=held,
                                       K_list=Ks)
        assert res.cost <= zero + 1e-9 and res.cost <= final + 1e-9


def test_time_split_regret():
    sys, Ks, costs, confs, tr = _run(seed=8, T=150)
    for i, c in enumerate(confs):
        kw = dict(K=Ks[i], held="policies", K_list=Ks)
        full = best_dac(tr, sys, i, c.dac_set, costs[i], **kw).cost
        head = best_dac(tr, sys, i, c.dac_set, costs[i], end=c.H, **kw).cost
        tail = best_dac(tr, sys, i, c.dac_set, costs[i], cost_from=c.H, **kw).cost
        realized = tr.cost[i].sum()
        assert realized - full <= (tr.cost[i][: c.H].sum() - head) + (tr.cost[i][c.H:].sum() - tail) + 1e-6


def test_regret_report_and_errors():
    sys, Ks, costs, confs, tr = _run(seed=9)
    r = regret(tr, 0, 1.0, 0.5, 3)
    assert r.regret_full == pytest.approx(tr.cost[0].sum() - 1.0)
    assert r.regret_post == pytest.approx(tr.cost[0][3:].sum() - 0.5)
    with pytest.raises(ConfigError):
        regret(tr, 0, 1.0, 0.5, tr.T + 1)


def test_linear_regret_runs():
    sys, Ks, costs, confs, tr = _run(seed=10, N=1, d=1, setting=1, kmax=1)
    k = Ks[0][0, 0]
    c = confs[0].certificate
    r = linear_regret(tr, sys, 0, costs[0], [np.linspace(k - 0.3, k + 0.3, 31)], c.kappa * 2, c.gamma / 2, 3)
    assert r.comparator == "linear" and np.isfinite(r.regret_full)


def _frozen_cell(T, trial, seed):
    # a frozen agent whose fixed feedforward fights a constant disturbance it could cancel
    A, B = np.array([[0.5]]), np.array([[1.0]])
    sys = LdsSystem(A, [B])
    cert = certify(A, B, [[0.0]])
    dset = DacSet(1, 1, 1, cert.kappa, cert.gamma)
    cfg = AgentConfig(index=0, K=np.zeros((1, 1)), certificate=cert, H=1, eta=0.0, setting=1, dac_set=dset,
                      M_init=np.full((1, 1, 1), dset.radii[0]))
    cost = QuadraticTracking(1, 1, 0.1)
    gen = DisturbanceGenerator("constant-vector", 1, 1.0, value=[0.5])
    tr = run_agents(sys, [cfg], [cost], gen, T)
    return [dac_regret(tr, sys, 0, cost, dset, np.zeros((1, 1)), 1)]


def test_frozen_agent_linear_regret_slope():
    curve = regret_curve(_frozen_cell, [100, 200, 400, 800], 1)
    assert curve.slope == pytest.approx(1.0, abs=0.1)
    assert np.all(curve.stderr == 0)


def test_loglog_slope_needs_three_points():
    assert loglog_slope([1, 2], [1, 2]) is None
    assert loglog_slope([1, 2, 4], [1, 4, 16]) == pytest.approx(2.0)


def test_lower_bound_phi_identities():
    rng = np.random.default_rng(0)
    bits = (rng.random(300) < 0.5).astype(float)
    assert lower_bound_phi_linear(bits, [0.0])[0] == pytest.approx(150.0)
    assert lower_bound_phi_dac(bits, [0.0], 2)[0] == pytest.approx(150.0)
    g = 0.6
    direct = sum(g * (g / 2) ** t * (b - 0.5) for t, b in enumerate(bits)) + 150.0
    assert lower_bound_phi_linear(bits, [g])[0] == pytest.approx(direct, rel=1e-12)


def test_lower_bound_zero_agent_cost_is_half():
    rep = lower_bound_experiment("linear", [50], 3, agent="zero")
    assert rep.mean_cost_per_round[0] == pytest.approx(0.5, abs=1e-12)


def test_lower_bound_kind_validation():
    with pytest.raises(ConfigError):
        lower_bound_experiment("quadratic", [10], 1)
