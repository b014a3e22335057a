import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magpc.dac import DacParams, DacSet, DisturbanceBuffer, control, diameter, membership, project


def test_zero_M_is_linear_controller():
    buf = DisturbanceBuffer(2)
    buf.push([1.0, 2.0])
    K = np.array([[0.5, -1.0]])
    x = np.array([0.3, 0.1])
    assert np.allclose(control(K, np.zeros((3, 1, 2)), buf, x), -K @ x)


def test_scalar_dac_evaluation():
    buf = DisturbanceBuffer(1)
    buf.push([1.0])
    buf.push([1.0])
    u = control(np.zeros((1, 1)), np.array([0.5, 0.25]).reshape(2, 1, 1), buf, np.zeros(1))
    assert u[0] == pytest.approx(0.75)


def test_empty_buffer_zero_padding():
    buf = DisturbanceBuffer(2)
    K = np.array([[1.0, 0.0]])
    M = np.ones((4, 1, 2))
    assert np.allclose(control(K, M, buf, np.array([2.0, 1.0])), [-2.0])


def test_projection_examples():
    s = DacSet(1, 1, 1, 1.0, 0.5, tau=2.0)  # radius 1
    assert project(np.array([[[5.0]]]), s)[0, 0, 0] == pytest.approx(1.0)
    inside = np.array([[[0.3]]])
    assert np.array_equal(project(inside, s), inside)


def test_membership_boundary_and_zero():
    s = DacSet(3, 2, 2, 1.5, 0.3)
    assert membership(np.zeros(s.shape), s)
    M = np.zeros(s.shape)
    for p in range(3):
        M[p] = np.diag([s.radii[p], 0.0])
    assert membership(M, s)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1),
       st.sampled_from(["spectral", "frobenius"]))
def test_projection_lands_inside_and_is_idempotent(H, k, d, seed, norm):
    rng = np.random.default_rng(seed)
    s = DacSet(H, k, d, 1.3, 0.4, norm=norm)
    M = 5 * rng.standard_normal(s.shape)
    P = s.project(M)
    assert s.contains(P)
    assert np.max(np.abs(s.project(P) - P)) <= 1e-12


def test_projection_beats_random_feasible_points():
    rng = np.random.default_rng(3)
    s = DacSet(1, 2, 2, 1.0, 0.5)
    for _ in range(10):
        M = 3 * rng.standard_normal(s.shape)
        P = s.project(M)
        C = s.sample(rng, 10_000)
        dist = np.sqrt(np.sum((C - M) ** 2, axis=(1, 2, 3)))
        assert np.linalg.norm(P - M) <= dist.min() + 1e-9


def test_diameter_formula():
    assert diameter(DacSet(2, 1, 1, 1.0, 0.5)) == pytest.approx(8 * np.sqrt(2))
    assert diameter(DacSet(2, 1, 1, 1.0, 1 - 1e-9)) == pytest.approx(4 * np.sqrt(2), rel=1e-6)


def test_sampled_distances_within_diameter():
    rng = np.random.default_rng(5)
    s = DacSet(4, 2, 3, 1.2, 0.3)
    a, b = s.sample(rng, 10_000), s.sample(rng, 10_000)
    dist = np.sqrt(np.sum((a - b) ** 2, axis=(1, 2, 3)))
    assert dist.max() <= s.exact_diameter() <= s.diameter()


def test_params_container():
    p = DacParams.zeros(3, 1, 2)
    assert p.H == 3 and np.asarray(p).shape == (3, 1, 2) and len(p.blocks) == 3
