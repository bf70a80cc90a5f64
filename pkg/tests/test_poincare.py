"""Cross-sections, return location, singular set, roof law, return derivative."""

import numpy as np
import pytest

from lorenzlab import classical_lorenz, linear_saddle
from lorenzlab.poincare import (
    CrossSection,
    DiscontinuityProximityError,
    EscapeError,
    InsufficientSamplesError,
    ReturnSample,
    annotate_distances,
    attractor_seeds,
    batch_returns,
    branch_id_from_itinerary,
    first_crossing,
    fit_roof_law,
    locate_return,
    locate_singular_set,
    lorenz_default_section,
    return_derivative,
    sample_roof_near_gamma0,
)

LORENZ = classical_lorenz()
SADDLE = linear_saddle(1.0, -0.5, -2.0)

SADDLE_ENTRY = CrossSection(
    p=(0, 1.0, 0), normal=(0, 1.0, 0), e1=(1.0, 0, 0), e2=(0, 0, 1.0),
    bounds=((-0.9, 0.9), (-0.9, 0.9)), orientation=-1, T1=0.1, inset_frac=0.0,
)
SADDLE_EXIT = CrossSection(
    p=(1.0, 0, 0), normal=(1.0, 0, 0), e1=(0, 1.0, 0), e2=(0, 0, 1.0),
    bounds=((-2, 2), (-2, 2)), orientation=+1, T1=0.1, inset_frac=0.0,
)


@pytest.fixture(scope="module")
def section():
    return lorenz_default_section(LORENZ)


@pytest.fixture(scope="module")
def seeds(section):
    return attractor_seeds(section, LORENZ, 120, tol=1e-8)


@pytest.fixture(scope="module")
def gamma0(section):
    return locate_singular_set(section, LORENZ, escape_time=4.0, resolution=1e-8,
                               tol=1e-8, t_max=60.0)


def origin_line_index(g0):
    return g0.component_for_equilibrium(np.zeros(3))


# -- CrossSection -------------------------------------------------------------


def test_section_validates_geometry():
    with pytest.raises(ValueError):
        CrossSection(p=(0, 0, 0), normal=(0, 0, 2.0), e1=(1, 0, 0), e2=(0, 1, 0),
                     bounds=((-1, 1), (-1, 1)))
    with pytest.raises(ValueError):
        CrossSection(p=(0, 0, 0), normal=(0, 0, 1.0), e1=(1, 0, 0), e2=(1, 0, 0),
                     bounds=((-1, 1), (-1, 1)))
    with pytest.raises(ValueError):
        CrossSection(p=(0, 0, 0), normal=(0, 0, 1.0), e1=(1, 0, 0), e2=(0, 1, 0),
                     bounds=((-1, 1), (-1, 1)), T1=0.0)


def test_chart_round_trip(section):
    pts = np.random.default_rng(0).uniform(-5, 5, size=(10, 2))
    back = section.to_chart(section.to_world(pts))
    assert np.allclose(back, pts, atol=1e-12)
    assert np.allclose(section.offset(section.to_world(pts)), 0.0, atol=1e-12)


# -- locate_return -------------------------------------------------------------


def test_lorenz_return_basic(section):
    s = locate_return(section, LORENZ, np.array([2.0, 3.0]), tol=1e-10)
    assert s.tau > section.T1
    assert s.residual <= section.event_tol
    assert s.gdot < 0  # downward orientation
    assert section.in_bounds(s.fx)


def test_return_respects_t1_gate(section, seeds):
    # seeds sit exactly on the section; the immediate crossing is not a return
    samples, _ = batch_returns(section, LORENZ, seeds[:40], n_returns=1, tol=1e-8)
    for s in samples:
        assert s is not None
        assert s[0].tau > section.T1


def test_return_outside_bounds_rejected(section):
    with pytest.raises(ValueError):
        locate_return(section, LORENZ, np.array([100.0, 0.0]))


def test_saddle_flight_time_closed_form():
    # section {x=1}, start at x0 = e^-5 with lam_u = 1: tau = 5 exactly
    ev = first_crossing(SADDLE, np.array([np.exp(-5.0), 0.5, 0.5]), SADDLE_EXIT,
                        t_min=0.2, tol=1e-11)
    assert abs(ev.tau - 5.0) <= 1e-8


def test_saddle_has_no_return():
    # no recurrence: a return map on the entry section must report escape
    with pytest.raises(EscapeError):
        locate_return(SADDLE_ENTRY, SADDLE, np.array([0.5, 0.5]), tol=1e-9, t_max=30.0)


def test_semigroup_composition(section):
    x = np.array([2.0, 3.0])
    s1 = locate_return(section, LORENZ, x, tol=1e-10)
    s2 = locate_return(section, LORENZ, s1.fx, tol=1e-10)
    pair = locate_return(section, LORENZ, x, n_returns=2, tol=1e-10)
    assert np.max(np.abs(pair[1].fx - s2.fx)) <= 1e-9
    assert abs((pair[0].tau + pair[1].tau) - (s1.tau + s2.tau)) <= 1e-9
    # branch itineraries concatenate
    assert pair[0].itinerary == s1.itinerary
    assert pair[1].itinerary == s2.itinerary


def test_branch_id_hash_distinguishes_lengths():
    assert branch_id_from_itinerary((1,)) != branch_id_from_itinerary((1, 1))
    assert branch_id_from_itinerary((1, -1)) != branch_id_from_itinerary((-1, 1))


def test_event_residuals_bounded(section, seeds):
    samples, _ = batch_returns(section, LORENZ, seeds, n_returns=2, tol=1e-8)
    res = [ev.residual for s in samples if s for ev in s]
    assert len(res) > 150
    assert max(res) <= section.event_tol


# -- singular set ----------------------------------------------------------------


def test_lorenz_singular_set_origin_component(gamma0):
    li = origin_line_index(gamma0)
    line = gamma0.polylines[li]
    # a single near-line sweeping through the chart center
    assert len(line) >= 8
    assert line[:, 0].min() < 0 < line[:, 0].max()
    # funnel check: tau blows up approaching the polyline
    assert np.allclose(np.linalg.norm(
        gamma0.equilibria[gamma0.equilibrium_index[li]]), 0.0, atol=1e-8)


def test_singular_set_tau_blowup(section, gamma0):
    li = origin_line_index(gamma0)
    samples = sample_roof_near_gamma0(section, LORENZ, gamma0,
                                      depths=np.geomspace(1e-9, 1e-7, 3),
                                      n_stations=4, tol=1e-12, line_index=li)
    assert all(s.tau > 2.2 for s in samples)


def test_saddle_singular_set_is_x_zero_line():
    g0 = locate_singular_set(SADDLE_ENTRY, SADDLE, escape_time=10.0, resolution=1e-9,
                             n_lines=7, n_scan=15, tol=1e-10, t_max=40.0,
                             target=SADDLE_EXIT)
    verts = np.vstack(g0.polylines)
    assert np.max(np.abs(verts[:, 0])) <= 1e-7


def test_singular_set_bisection_convergence():
    coarse = locate_singular_set(SADDLE_ENTRY, SADDLE, escape_time=10.0,
                                 resolution=1e-4, n_lines=5, n_scan=11,
                                 tol=1e-10, t_max=40.0, target=SADDLE_EXIT)
    fine = locate_singular_set(SADDLE_ENTRY, SADDLE, escape_time=10.0,
                               resolution=5e-5, n_lines=5, n_scan=11,
                               tol=1e-10, t_max=40.0, target=SADDLE_EXIT)
    a = np.vstack(coarse.polylines)
    b = np.vstack(fine.polylines)
    hausdorff = max(np.atleast_1d(fine.distance(a)).max(),
                    np.atleast_1d(coarse.distance(b)).max())
    assert hausdorff <= 1e-4


def test_singular_set_empty_warning():
    # a section far away from the attractor: no branch changes anywhere
    far = CrossSection(p=(0, 0, 200.0), normal=(0, 0, 1.0), e1=(1.0, 0, 0),
                       e2=(0, 1.0, 0), bounds=((-1, 1), (-1, 1)), orientation=-1,
                       T1=0.5)
    with pytest.warns(UserWarning):
        g0 = locate_singular_set(far, LORENZ, n_lines=3, n_scan=5, tol=1e-6,
                                 t_max=5.0)
    assert g0.polylines == []


# -- roof law ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def roof_samples(section, gamma0):
    li = origin_line_index(gamma0)
    return sample_roof_near_gamma0(
        section, LORENZ, gamma0,
        depths=np.geomspace(1e-10, 1e-2, 25), n_stations=10, tol=1e-12,
        line_index=li)


def test_saddle_roof_slope_exact():
    # flight time to {x=1} is -log(x0)/lam_u: slope exactly 1/lam_u, here 1
    x0 = np.geomspace(1e-8, 1e-2, 40)
    samples = []
    for v in x0:
        ev = first_crossing(SADDLE, np.array([v, 1.0, 0.2]), SADDLE_EXIT,
                            t_min=0.0, tol=1e-11, t_max=60.0)
        ev.x = np.array([v, 0.2])
        ev.dist_gamma0 = v  # Gamma0 = {x=0}
        samples.append(ev)
    fit = fit_roof_law(samples, cutoff=2.0, min_samples=10, lam_u=1.0)
    assert abs(fit["slope"] - 1.0) <= 1e-6
    assert fit["r2"] >= 0.999999


def test_lorenz_roof_law(roof_samples, section):
    lam_u = (-11 + np.sqrt(1201)) / 2
    fit = fit_roof_law(roof_samples, cutoff=section.T1 + 2, min_samples=50,
                       lam_u=lam_u)
    assert abs(fit["slope"] * lam_u - 1.0) <= 0.25
    assert fit["r2"] >= 0.8


def test_roof_positivity_and_monotone_trend(roof_samples, section):
    taus = np.array([s.tau for s in roof_samples])
    dists = np.array([s.dist_gamma0 for s in roof_samples])
    assert np.all(taus > section.T1)
    # bin by log-distance: mean tau decreases as distance grows
    bins = np.geomspace(dists.min() * 0.99, dists.max() * 1.01, 7)
    idx = np.digitize(dists, bins)
    means = [taus[idx == k].mean() for k in range(1, 7) if np.any(idx == k)]
    assert all(a > b for a, b in zip(means[:-1], means[1:]))


def test_roof_fit_requires_deep_samples(section, seeds):
    samples, _ = batch_returns(section, LORENZ, seeds[:50], n_returns=1, tol=1e-8)
    flat = [s[0] for s in samples if s]
    for s in flat:
        s.x = s.fx * 0 + 1.0
        s.dist_gamma0 = 1.0
    with pytest.raises(InsufficientSamplesError):
        fit_roof_law(flat, cutoff=section.T1 + 2, min_samples=100)


def test_annotate_distances(gamma0, section, seeds):
    samples, _ = batch_returns(section, LORENZ, seeds[:10], n_returns=1, tol=1e-8)
    flat = [s[0] for s in samples if s]
    for s, x in zip(flat, seeds[:10]):
        s.x = x
    annotate_distances(flat, gamma0)
    assert all(np.isfinite(s.dist_gamma0) and s.dist_gamma0 >= 0 for s in flat)


# -- return derivative --------------------------------------------------------------


def test_return_derivative_cross_validates(section):
    Df, sv, base = return_derivative(section, LORENZ, np.array([2.0, 3.0]), tol=1e-10)
    assert Df.shape == (2, 2)
    assert sv[0] >= 1.0 and sv[1] <= 1e-3


def test_return_derivative_saddle_crossing_map():
    # flow-box map (x0, z0) -> (x0^omega, z0 x0^2): compare with tangent result
    # via finite differences of the crossing map itself
    v = 0.3
    ev1 = first_crossing(SADDLE, np.array([v + 1e-6, 1.0, 0.1]), SADDLE_EXIT, t_min=0.0, tol=1e-12)
    ev2 = first_crossing(SADDLE, np.array([v - 1e-6, 1.0, 0.1]), SADDLE_EXIT, t_min=0.0, tol=1e-12)
    d_num = (ev1.fx - ev2.fx) / 2e-6
    # d(x0^0.5)/dx0 = 0.5 v^-0.5 ; d(z0 x0^2)/dx0 = 2 z0 v
    assert abs(d_num[0] - 0.5 * v**-0.5) <= 1e-5
    assert abs(d_num[1] - 2 * 0.1 * v) <= 1e-5


def test_return_derivative_symmetry(section):
    Df1, _, _ = return_derivative(section, LORENZ, np.array([2.0, 3.0]), tol=1e-10)
    Df2, _, _ = return_derivative(section, LORENZ, np.array([-2.0, -3.0]), tol=1e-10)
    assert np.max(np.abs(Df1 - Df2)) <= 1e-6


def test_return_derivative_singular_values_straddle(section, seeds):
    straddle = 0
    total = 0
    for x in seeds[:20]:
        try:
            _, sv, _ = return_derivative(section, LORENZ, x, tol=1e-9)
        except (DiscontinuityProximityError, EscapeError):
            continue
        total += 1
        if sv[0] >= 1.0 and sv[1] <= 0.95:
            straddle += 1
    assert total >= 15
    assert straddle / total >= 0.95


def test_return_derivative_near_branch_cut_rejected(section, gamma0):
    li = origin_line_index(gamma0)
    line = gamma0.polylines[li]
    mid = line[len(line) // 2]
    with pytest.raises(DiscontinuityProximityError):
        return_derivative(section, LORENZ, mid + np.array([1e-5, 0.0]),
                          finite_diff_step=5e-4, tol=1e-9)
