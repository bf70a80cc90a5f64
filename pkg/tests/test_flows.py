"""Vector fields, Jacobians, adaptive integration, equilibrium classification."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorenzlab import (
    classical_lorenz,
    classify_equilibria,
    eval_jacobian,
    eval_rhs,
    extended_lorenz,
    integrate,
    linear_saddle,
    polynomial_field,
)
from lorenzlab.flows import LORENZ_LIKE, HYPERBOLIC, classify_equilibrium
from lorenzlab.integrate import flow_map

from _oracles import fd_jacobian

LORENZ = classical_lorenz()
SADDLE = linear_saddle(1.0, -0.5, -2.0)
EXT = extended_lorenz(lam=1.0, gamma=2.0, alpha=1.0, beta=1.0, delta=1.0)


# -- eval_rhs ---------------------------------------------------------------


def test_rhs_extended_origin_is_equilibrium():
    assert np.allclose(eval_rhs(EXT, [0.0, 0.0, 0.0]), 0.0)


def test_rhs_classical_at_ones():
    # direct substitution into sigma(y-x), x(rho-z)-y, xy-beta z
    out = eval_rhs(LORENZ, [1.0, 1.0, 1.0])
    assert np.allclose(out, [0.0, 26.0, -5.0 / 3.0], atol=1e-14)


def test_rhs_linear_saddle_diagonal():
    assert np.allclose(eval_rhs(SADDLE, [1.0, 1.0, 1.0]), [1.0, -0.5, -2.0])


def test_rhs_rejects_bad_input():
    with pytest.raises(ValueError):
        eval_rhs(LORENZ, [1.0, 2.0])
    with pytest.raises(ValueError):
        eval_rhs(LORENZ, [np.nan, 0.0, 0.0])


def test_rhs_broadcasts_over_batches():
    pts = np.random.default_rng(1).normal(size=(7, 4, 3))
    out = eval_rhs(LORENZ, pts)
    assert out.shape == pts.shape
    assert np.allclose(out[3, 2], eval_rhs(LORENZ, pts[3, 2]))


# -- eval_jacobian ----------------------------------------------------------


def test_jacobian_classical_origin():
    J = eval_jacobian(LORENZ, [0.0, 0.0, 0.0])
    assert np.allclose(J, [[-10, 10, 0], [28, -1, 0], [0, 0, -8 / 3]])


def test_jacobian_extended_origin():
    J = eval_jacobian(EXT, [0.0, 0.0, 0.0])
    assert np.allclose(J, [[0, 1, 0], [2.0, -1.0, 0], [0, 0, -1.0]])


@pytest.mark.parametrize("system", [LORENZ, SADDLE, EXT], ids=["lorenz", "saddle", "ext"])
def test_jacobian_matches_finite_differences(system):
    rng = np.random.default_rng(7)
    for _ in range(5):
        x = rng.uniform(-3, 3, size=3)
        J = eval_jacobian(system, x)
        J_fd = fd_jacobian(system.rhs, x, h=1e-6)
        denom = np.maximum(np.abs(J), 1.0)
        assert np.max(np.abs(J - J_fd) / denom) <= 1e-5


def test_classical_trace_is_constant():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-20, 20, size=(50, 3))
    tr = LORENZ.jac_trace(pts)
    assert np.allclose(tr, -(10 + 1 + 8 / 3))


def test_polynomial_field_round_trip():
    poly = LORENZ.to_polynomial()
    rng = np.random.default_rng(5)
    pts = rng.uniform(-10, 10, size=(20, 3))
    assert np.allclose(poly.rhs(pts), LORENZ.rhs(pts), atol=1e-12)
    assert np.allclose(poly.jac(pts), LORENZ.jac(pts), atol=1e-12)


def test_reversed_field_negates():
    rev = LORENZ.reversed()
    pts = np.random.default_rng(9).uniform(-5, 5, size=(10, 3))
    assert np.allclose(rev.rhs(pts), -LORENZ.rhs(pts), atol=1e-12)


# -- integrate ---------------------------------------------------------------


def test_integrate_zero_time_identity():
    seg = integrate(LORENZ, np.array([1.0, 2.0, 3.0]), 0.0, with_tangent=True)
    assert len(seg.times) == 1
    assert np.allclose(seg.states[0], [1, 2, 3])
    assert np.allclose(seg.fundamental_at(0.0), np.eye(3))


def test_integrate_liouville_classical():
    # constant divergence -(sigma+1+beta) = -41/3 makes det DZ_1 exact
    seg = integrate(LORENZ, np.array([1.2, 1.3, 25.0]), 1.0, tol=1e-10, with_tangent=True)
    det = np.linalg.det(seg.fundamental_at(1.0))
    ref = np.exp(-41.0 / 3.0)
    assert abs(det - ref) / ref <= 1e-6
    assert seg.liouville_residual() <= 1e-6


def test_integrate_liouville_extended():
    seg = integrate(EXT, np.array([0.4, -0.2, 0.3]), 2.0, tol=1e-10, with_tangent=True)
    # divergence of the extended field is -(lam + alpha), constant
    det = np.linalg.det(seg.fundamental_at(2.0))
    ref = np.exp(-(1.0 + 1.0) * 2.0)
    assert abs(det - ref) / ref <= 1e-6


def test_integrate_saddle_closed_form():
    x0 = np.array([0.3, 1.1, -0.7])
    tol = 1e-11
    seg = integrate(SADDLE, x0, 3.0, tol=tol, with_tangent=True)
    exact = x0 * np.exp(np.array([1.0, -0.5, -2.0]) * 3.0)
    assert np.max(np.abs(seg.states[-1] - exact)) <= 100 * tol
    M = seg.fundamental_at(3.0)
    assert np.max(np.abs(M - np.diag(np.exp([3.0, -1.5, -6.0])))) <= 100 * tol


def test_integrate_rejects_bad_tol():
    with pytest.raises(ValueError):
        integrate(LORENZ, np.zeros(3), 1.0, tol=1e-3)
    with pytest.raises(ValueError):
        integrate(LORENZ, np.zeros(3), 1.0, tol=1e-14)


def test_integrate_time_grid_strictly_increasing():
    seg = integrate(LORENZ, np.array([1.0, 1.0, 1.0]), 2.5, tol=1e-8, with_tangent=True)
    assert np.all(np.diff(seg.times) > 0)
    assert np.allclose(seg.states[0], seg.x0)


@settings(max_examples=6, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(0.1, 5.0))
def test_flow_property_saddle(t, s):
    # Z_{t+s} = Z_t o Z_s, error measured against the integrator scale
    tol = 1e-10
    x0 = np.array([[0.8, -1.1, 0.4]])
    a = flow_map(SADDLE, x0, t + s, tol=tol)[0]
    b = flow_map(SADDLE, flow_map(SADDLE, x0, s, tol=tol), t, tol=tol)[0]
    assert np.linalg.norm(a - b) / max(1.0, np.linalg.norm(a)) <= 10 * tol


def test_flow_property_lorenz():
    tol = 1e-10
    rng = np.random.default_rng(11)
    x0 = np.array([[-2.0, 3.0, 22.0]])
    for _ in range(3):
        t, s = rng.uniform(0.0, 5.0, size=2)
        a = flow_map(LORENZ, x0, t + s, tol=tol)[0]
        b = flow_map(LORENZ, flow_map(LORENZ, x0, s, tol=tol), t, tol=tol)[0]
        assert np.linalg.norm(a - b) / max(1.0, np.linalg.norm(a)) <= 10 * tol


def test_tangent_cocycle_lorenz():
    tol = 1e-10
    x0 = np.array([-2.0, 3.0, 22.0])
    rng = np.random.default_rng(13)
    for _ in range(2):
        s, t = rng.uniform(0.3, 2.0, size=2)
        seg_full = integrate(LORENZ, x0, s + t, tol=tol, with_tangent=True, window=10.0)
        M_full = seg_full.fundamental_at(s + t)
        seg_s = integrate(LORENZ, x0, s, tol=tol, with_tangent=True, window=10.0)
        M_s = seg_s.fundamental_at(s)
        x_s = seg_s.states[-1]
        seg_t = integrate(LORENZ, x_s, t, tol=tol, with_tangent=True, window=10.0)
        M_t = seg_t.fundamental_at(t)
        err = np.linalg.norm(M_t @ M_s - M_full, 2) / np.linalg.norm(M_full, 2)
        assert err <= 100 * tol


def test_window_restart_matches_single_window():
    x0 = np.array([1.5, -0.5, 20.0])
    a = integrate(LORENZ, x0, 4.0, tol=1e-10, with_tangent=True, window=2.0)
    b = integrate(LORENZ, x0, 4.0, tol=1e-10, with_tangent=True, window=10.0)
    Ma = a.fundamental_at(4.0)
    Mb = b.fundamental_at(4.0)
    assert np.linalg.norm(Ma - Mb, 2) / np.linalg.norm(Mb, 2) <= 1e-7


# -- classify_equilibria ------------------------------------------------------


def test_classify_classical_lorenz_origin():
    reports = classify_equilibria(LORENZ, [(-20, 20), (-20, 20), (-5, 40)])
    assert len(reports) == 3
    origin = min(reports, key=lambda r: np.linalg.norm(r.state))
    assert np.linalg.norm(origin.state) <= 1e-9
    lam_u = (-11 + np.sqrt(1201)) / 2
    lam_ss = (-11 - np.sqrt(1201)) / 2
    expected = np.sort([lam_u, lam_ss, -8.0 / 3.0])[::-1]
    assert np.max(np.abs(np.sort(origin.eigenvalues.real)[::-1] - expected)) <= 1e-9
    assert origin.flag == LORENZ_LIKE
    assert abs(origin.lam_s - (-8.0 / 3.0)) <= 1e-9
    assert abs(origin.lam_u - lam_u) <= 1e-9
    assert abs(origin.omega - (8.0 / 3.0) / lam_u) <= 1e-12
    # wing equilibria are saddle-foci: hyperbolic but not Lorenz-like
    wings = [r for r in reports if np.linalg.norm(r.state) > 1]
    assert all(w.flag == HYPERBOLIC for w in wings)
    assert all(0 < (r.omega or 0.5) < 1 or r.flag != LORENZ_LIKE for r in reports)


def test_classify_extended_lorenz_origin_eigenvalues():
    # quadratic s^2 + lam*s - gamma = 0 gives {1, -2}; third eigenvalue -alpha
    rep = classify_equilibrium(EXT, np.zeros(3))
    assert np.allclose(np.sort(rep.eigenvalues.real), [-2.0, -1.0, 1.0], atol=1e-12)
    # boundary case -lam_u == lam_s: strict inequality fails, not Lorenz-like
    assert rep.flag == HYPERBOLIC


def test_classify_extended_lorenz_off_boundary():
    sys_ = extended_lorenz(lam=1.0, gamma=2.0, alpha=0.75, beta=1.0, delta=1.0)
    rep = classify_equilibrium(sys_, np.zeros(3))
    assert rep.flag == LORENZ_LIKE
    # weak contracting direction in the center-unstable plane is -alpha
    assert abs(rep.lam_s - (-0.75)) <= 1e-12
    assert abs(rep.lam_u - 1.0) <= 1e-12
    assert abs(rep.omega - 0.75) <= 1e-12
    assert 0 < rep.omega < 1


def test_classify_linear_saddle_exact():
    reports = classify_equilibria(SADDLE, [(-1, 1)] * 3)
    assert len(reports) == 1
    rep = reports[0]
    assert np.allclose(np.sort(rep.eigenvalues.real), [-2.0, -0.5, 1.0], atol=1e-14)
    assert rep.flag == LORENZ_LIKE
    assert abs(rep.omega - 0.5) <= 1e-14


def test_classify_requires_bounded_box():
    with pytest.raises(ValueError):
        classify_equilibria(LORENZ, [(-np.inf, np.inf)] * 3)
