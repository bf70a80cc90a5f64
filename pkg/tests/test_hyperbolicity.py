"""Splitting estimation, cone invariance, contraction/domination, volume expansion."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorenzlab import classical_lorenz, eval_rhs, integrate, integrate_windows, linear_saddle
from lorenzlab.hyperbolicity import (
    check_cone_invariance,
    check_contraction_domination,
    cone_check_points,
    cone_membership_margin,
    estimate_splitting,
    fit_volume_expansion,
    principal_angle,
    restricted_log_det,
    reversed_volume_control,
    splitting_pairs,
    subspace_angle_to_vector,
    _forward_sweep,
)

SADDLE = linear_saddle(1.0, -0.5, -2.0)
LORENZ = classical_lorenz()


@pytest.fixture(scope="module")
def saddle_setup():
    pts = np.random.default_rng(0).uniform(-1, 1, size=(4, 3))
    ens = integrate_windows(SADDLE, pts, n_windows=44, window=0.5, tol=1e-10)
    spl = estimate_splitting(SADDLE, ens, transient=9.0)
    return ens, spl


@pytest.fixture(scope="module")
def lorenz_setup():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(8, 3)) * 5 + np.array([0.0, 0.0, 25.0])
    ens = integrate_windows(LORENZ, x0, n_windows=100, window=0.5, tol=1e-8)
    spl = estimate_splitting(LORENZ, ens, transient=10.0, equilibria=[np.zeros(3)])
    return ens, spl


# -- splitting ---------------------------------------------------------------


def test_saddle_splitting_exact(saddle_setup):
    ens, spl = saddle_setup
    assert all(e.converged for e in spl)
    for e in spl[:6]:
        # cu plane is span{e_x, e_y} (unstable + weak stable), s is the z-axis
        assert np.abs(e.basis_cu[2]).max() <= 1e-5
        assert abs(abs(e.basis_s[2, 0]) - 1.0) <= 1e-8
        assert np.allclose(sorted(e.exponents_cu), [-0.5, 1.0], atol=1e-6)
        assert np.allclose(e.exponents_s, [-2.0], atol=1e-6)


def test_splitting_dimensions_and_angle_floor(lorenz_setup):
    _, spl = lorenz_setup
    for e in spl:
        assert e.basis_cu.shape == (3, 2) and e.basis_s.shape == (3, 1)
        gap = principal_angle(np.hstack([e.basis_cu]), e.basis_s)
        # minimal principal angle between the subspaces stays off zero
        assert gap >= 1e-3


def test_flow_direction_in_cu_plane(lorenz_setup):
    _, spl = lorenz_setup
    for e in spl:
        if not e.converged:
            continue
        ang = subspace_angle_to_vector(e.basis_cu, eval_rhs(LORENZ, e.state))
        assert ang <= 1e-2


def test_splitting_idempotent_under_reseeding(lorenz_setup):
    ens, spl = lorenz_setup
    spl2 = estimate_splitting(LORENZ, ens, transient=10.0, rng_seed=0xBEEF)
    for a, b in zip(spl, spl2):
        if a.converged and b.converged:
            assert principal_angle(a.basis_cu, b.basis_cu) < 1e-6
            assert principal_angle(a.basis_s, b.basis_s) < 1e-6


def test_subspace_equivariance(lorenz_setup):
    ens, spl = lorenz_setup
    pairs = splitting_pairs(spl, ens, ens.window)
    checked = 0
    for ex, ey in pairs:
        if not (ex.converged and ey.converged):
            continue
        M = ens.propagators[ex.orbit_index, ex.window_index]
        img_s = M @ ex.basis_s
        img_s /= np.linalg.norm(img_s, axis=0)
        assert principal_angle(img_s, ey.basis_s) <= 1e-3
        img_cu, _ = np.linalg.qr(M @ ex.basis_cu)
        assert principal_angle(img_cu, ey.basis_cu) <= 1e-3
        checked += 1
    assert checked > 100


def test_splitting_requires_tangent_data():
    seg = integrate(LORENZ, np.array([1.0, 1.0, 20.0]), 5.0, tol=1e-8)
    with pytest.raises(ValueError):
        estimate_splitting(LORENZ, seg, transient=1.0)


def test_splitting_requires_long_enough_orbit():
    seg = integrate(LORENZ, np.array([1.0, 1.0, 20.0]), 5.0, tol=1e-8, with_tangent=True)
    with pytest.raises(ValueError):
        estimate_splitting(LORENZ, seg, transient=20.0)


def test_splitting_accepts_orbit_segment():
    seg = integrate(LORENZ, np.array([1.0, 1.0, 20.0]), 30.0, tol=1e-8,
                    with_tangent=True, window=1.0)
    spl = estimate_splitting(LORENZ, seg, transient=10.0)
    assert len(spl) >= 5
    assert any(e.converged for e in spl)


def test_lorenz_top_exponent_matches_qr_oracle(lorenz_setup):
    from _oracles import lyapunov_spectrum_qr

    _, spl = lorenz_setup
    # anchors with >= 40 time units of trailing average
    late = [e for e in spl if e.converged and e.time >= 40.0]
    assert late
    lam1 = np.mean([max(e.exponents_cu) for e in late])
    oracle = lyapunov_spectrum_qr(LORENZ, np.array([1.3, 1.1, 22.0]), t_total=300.0, dt=0.02)
    assert abs(lam1 - oracle.max()) <= 0.15 * 0.9
    assert abs(lam1 - 0.9) <= 0.15 * 0.9


# -- cone invariance -----------------------------------------------------------


def test_cone_pure_cu_vector_contained(saddle_setup):
    ens, spl = saddle_setup
    e = next(x for x in spl if x.converged)
    # vector with zero stable component lies inside every cone
    v = (e.basis_cu @ np.array([0.6, 0.8]))[None, :]
    assert cone_membership_margin(v, e.basis_cu, e.basis_s, a=0.3) > 0


def test_cone_saddle_boundary_vector():
    pts = np.random.default_rng(3).uniform(-1, 1, size=(3, 3))
    recs = cone_check_points(SADDLE, pts, a=1.0, T=1.0, transient=8.0, window=0.5, tol=1e-10)
    assert len(recs) == 3
    assert all(r.verdict == "contained" for r in recs)
    # image stable/unstable ratio improves by e^{-2}/e^{-0.5} = e^{-1.5}
    assert all(r.margin > 0.5 for r in recs)


def test_cone_lorenz_ensemble(lorenz_setup):
    ens, spl = lorenz_setup
    recs = check_cone_invariance(LORENZ, ens, spl, a=0.5, T=1.0, n_probe=8)
    assert len(recs) > 300
    frac = np.mean([r.verdict == "contained" for r in recs])
    assert frac >= 0.99


def test_cone_margin_sign_matches_verdict(lorenz_setup):
    ens, spl = lorenz_setup
    recs = check_cone_invariance(LORENZ, ens, spl, a=0.5, T=1.0)
    for r in recs:
        assert (r.margin > 0) == (r.verdict == "contained")


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 0.9), st.floats(1.01, 4.0))
def test_cone_monotone_in_aperture(a, factor):
    rng = np.random.default_rng(17)
    Q = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    basis_cu, basis_s = Q[:, :2], Q[:, 2:]
    w = rng.normal(size=(8, 3))
    m1 = cone_membership_margin(w, basis_cu, basis_s, a)
    m2 = cone_membership_margin(w, basis_cu, basis_s, a * factor)
    if m1 > 0:
        assert m2 > 0


def test_cone_rejects_nonpositive_aperture(lorenz_setup):
    ens, spl = lorenz_setup
    with pytest.raises(ValueError):
        check_cone_invariance(LORENZ, ens, spl, a=0.0, T=1.0)


# -- contraction / domination ----------------------------------------------------


def test_saddle_contraction_domination_closed_form(saddle_setup):
    ens, spl = saddle_setup
    out = check_contraction_domination(ens, spl, T=2.0)
    assert abs(out["lam_contr"] - np.exp(-2.0)) <= 1e-8
    assert abs(out["lam_dom"] - np.exp(-1.5)) <= 1e-8
    assert out["violations"] == []


def test_lorenz_contraction_domination(lorenz_setup):
    ens, spl = lorenz_setup
    out = check_contraction_domination(ens, spl, T=2.0)
    assert out["lam_contr"] < 1.0
    assert out["lam_dom"] < 1.0
    # slow passages toward the origin give a heavy upper residual tail; the
    # envelope flags them, they stay rare
    assert len(out["violations"]) <= 0.01 * out["n_samples"]


def test_domination_rejects_bad_horizon(lorenz_setup):
    ens, spl = lorenz_setup
    with pytest.raises(ValueError):
        check_contraction_domination(ens, spl, T=0.1)


# -- volume expansion -------------------------------------------------------------


def test_saddle_volume_expansion_slope(saddle_setup):
    ens, spl = saddle_setup
    fit = fit_volume_expansion(ens, spl, horizon=2.0)
    assert abs(fit.slope - 0.5) <= 1e-8
    assert fit.r2 >= 0.999


def test_saddle_reversed_control(saddle_setup):
    _, spl = saddle_setup
    fit = reversed_volume_control(SADDLE, spl, horizon=1.0, window=0.5, tol=1e-10)
    assert abs(fit.slope - (-0.5)) <= 1e-8


def test_lorenz_volume_expansion(lorenz_setup):
    ens, spl = lorenz_setup
    fit = fit_volume_expansion(ens, spl, horizon=2.0)
    assert fit.slope > 0
    assert fit.r2 >= 0.9


def test_gram_det_equals_qr_growth_on_saddle(saddle_setup):
    ens, _ = saddle_setup
    basis = np.eye(3)[:, :2]  # exact cu plane of the diagonal saddle
    M = ens.propagator_range(0, 4, 8)
    ld = restricted_log_det(M, basis)
    _, growth = _forward_sweep(ens.propagators[:1, 4:8], basis)
    assert abs(ld - growth[0].sum()) <= 1e-8
