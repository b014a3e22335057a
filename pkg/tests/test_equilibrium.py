import numpy as np
import pytest

from magpc.costs import LinearCost, QuadraticTracking
from magpc.dac import DacSet
from magpc.equilibrium import (EPS_BR, JointLoss, L_FLOOR, best_response_gap, default_stride, eqgap_run,
                               estimate_smoothness, path_length_check)
from magpc.lds import DisturbanceGenerator, LdsSystem
from magpc.stability import certify_global, synthesize_joint


def _game(H=2):
    A = np.array([[0.6, 0.8], [0.0, 0.4]])
    sys = LdsSystem(A, [np.array([[1.0], [0.0]]), np.array([[0.3], [1.0]])])
    Ks = synthesize_joint(A, sys.B)
    cert = certify_global(A, sys.B, Ks)
    sets = [DacSet.from_certificate(cert, H, 1, 2) for _ in range(2)]
    cost = QuadraticTracking(2, 2, 0.5, target_x=[1.0, 0.5])
    gen = DisturbanceGenerator("constant-vector", 2, 1.0, value=[0.5, -0.3])
    return sys, Ks, sets, cost, gen


def _scalar_game():
    sys = LdsSystem([[0.5]], [[[1.0]], [[0.5]]])
    Ks = [np.zeros((1, 1)), np.zeros((1, 1))]
    cert = certify_global(sys.A, sys.B, Ks)
    sets = [DacSet.from_certificate(cert, 1, 1, 1) for _ in range(2)]
    cost = QuadraticTracking(1, 2, 0.3, target_x=[0.4])
    return sys, Ks, sets, cost


def test_joint_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    sys, Ks, sets, cost, gen = _game(H=3)
    loss = JointLoss(sys, Ks, cost, 0, rng.standard_normal((7, 2)) * 0.4, 3)
    Ms = [s.sample(rng, 1)[0] for s in sets]
    g = loss.grads(Ms)
    for i in range(2):
        fd = np.zeros_like(Ms[i])
        for j in np.ndindex(Ms[i].shape):
            e = np.zeros_like(Ms[i])
            e[j] = 1e-6
            lo, hi = list(Ms), list(Ms)
            lo[i], hi[i] = Ms[i] - e, Ms[i] + e
            fd[j] = (loss.value(hi) - loss.value(lo)) / 2e-6
        assert np.allclose(g[i], fd, atol=1e-6)


def test_gap_zero_at_inner_minimizer():
    rng = np.random.default_rng(1)
    sys, Ks, sets, cost, gen = _game()
    loss = JointLoss(sys, Ks, cost, 0, rng.standard_normal((5, 2)) * 0.4, 2)
    Ms = [s.sample(rng, 1)[0] for s in sets]
    first = best_response_gap(loss, 0, Ms, sets[0])
    Ms[0] = first.M
    again = best_response_gap(loss, 0, Ms, sets[0])
    assert 0 <= again.gap <= EPS_BR


def test_scalar_gap_matches_grid():
    sys, Ks, sets, cost = _scalar_game()
    loss = JointLoss(sys, Ks, cost, 0, np.array([[0.7], [-0.4], [0.9]]), 1)
    Ms = [np.array([[[0.1]]]), np.array([[[-0.2]]])]
    res = best_response_gap(loss, 1, Ms, sets[1])
    r = sets[1].radii[0]
    vals = [loss.value([Ms[0], np.array([[[m]]])]) for m in np.linspace(-r, r, 200_001)]
    assert res.gap == pytest.approx(loss.value(Ms) - min(vals), abs=1e-4)
    qp = cost.quad_params(1)
    fast = best_response_gap(loss, 1, Ms, sets[1], qp=qp)
    assert fast.gap == pytest.approx(res.gap, abs=1e-8)


def test_long_static_run_gaps_vanish():
    sys, Ks, sets, cost, gen = _game()
    rep = eqgap_run(sys, Ks, cost, gen, 3000, H=2, stride=500)
    assert np.all(rep.br[-1] <= 10 * EPS_BR)


def test_static_ledgers_and_path_check():
    sys, Ks, sets, cost, gen = _game()
    rep = eqgap_run(sys, Ks, cost, gen, 300, H=2)
    assert np.all(rep.delta_cost == 0) and np.all(rep.dist_variation == 0)
    assert path_length_check(rep)
    assert np.all(rep.br >= 0) and np.all(rep.br_raw >= -EPS_BR)
    assert np.array_equal(rep.eqgap, rep.br.max(axis=1))
    assert rep.d4_violations == 0
    lhs, rhs = rep.prop_d1()
    assert lhs <= rhs


def test_frozen_agents_path_sides_zero():
    sys, Ks, sets, cost, gen = _game()
    rep = eqgap_run(sys, Ks, cost, gen, 50, H=2, eta=0.0)
    assert rep.path_length == 0 and 2 * rep.eta * rep.loss_drop.sum() == 0
    assert path_length_check(rep)


def test_oversized_step_is_flagged():
    sys, Ks, sets, cost, gen = _game()
    base = eqgap_run(sys, Ks, cost, gen, 60, H=2)
    rep = eqgap_run(sys, Ks, cost, gen, 60, H=2, eta=50 * base.eta)
    assert not path_length_check(rep)


def test_smoothness_linear_loss_floored():
    sys, Ks, sets, _, gen = _game()
    cost = LinearCost([1.0, -1.0], [0.5, 0.2])
    loss = JointLoss(sys, Ks, cost, 0, np.full((5, 2), 0.3), 2)
    assert estimate_smoothness(loss.grads, sets, samples=16) == L_FLOOR


def test_smoothness_scalar_within_factor_two():
    sys, Ks, sets, cost = _scalar_game()
    loss = JointLoss(sys, Ks, cost, 0, np.array([[0.7], [-0.4], [0.9]]), 1)
    # the joint loss is quadratic in (m1, m2); its Hessian is constant
    H = np.zeros((2, 2))
    e = 1e-4
    base = np.array([0.0, 0.0])

    def grad(v):
        g = loss.grads([np.array([[[v[0]]]]), np.array([[[v[1]]]])])
        return np.array([g[0].item(), g[1].item()])

    for j in range(2):
        d = np.zeros(2)
        d[j] = e
        H[:, j] = (grad(base + d) - grad(base - d)) / (2 * e)
    L = np.linalg.norm(H, 2)
    est = estimate_smoothness(loss.grads, sets, samples=64)
    assert L / 2 <= est <= 2 * L


def test_smoothness_monotone_in_samples():
    sys, Ks, sets, cost, gen = _game()
    loss = JointLoss(sys, Ks, cost, 0, np.full((5, 2), 0.3), 2)
    vals = [estimate_smoothness(loss.grads, sets, samples=n, power_iters=0) for n in (4, 16, 64, 256)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_default_stride():
    assert default_stride(2000) == 1 and default_stride(2001) == 2 and default_stride(4096) == 3


def test_report_csv(tmp_path):
    sys, Ks, sets, cost, gen = _game()
    rep = eqgap_run(sys, Ks, cost, gen, 20, H=2)
    rep.to_csv(tmp_path / "e.csv")
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0].split(",") == ["t", "i", "BR_i", "EQGAP", "cum_eqgap_sq_avg", "delta_cost_cum",
                                  "dist_variation_cum", "path_length_cum"]
    assert len(rows) == 1 + 20 * 2
