"""Splitting estimation and numerical hyperbolicity diagnostics.

The center-unstable plane at an anchor is the limit of forward QR power
iteration of the window propagators; the stable line is the orthogonal
complement of the leading plane of the adjoint cocycle iterated backwards.
Convergence is diagnosed by running each sweep from two independent frames
and recording the principal angle between the results.

Backward quantities are never obtained by backward integration: following
the stated convention, ||DZ_{-t} restricted to E^cu at Z_t x|| is computed
as 1/sigma_min of the forward propagator restricted to the estimated plane.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fitting import linear_fit
from .integrate import WindowEnsemble, integrate_windows


# -- small batched linear algebra helpers -----------------------------------


def _batched_qr(M):
    return np.linalg.qr(M)


def principal_angle(Q1, Q2):
    """Largest principal angle between equal-dimension subspaces (radians)."""
    s = np.linalg.svd(Q1.T @ Q2, compute_uv=False)
    return float(np.arccos(np.clip(s.min(), -1.0, 1.0)))


def _complement(Q):
    """Orthonormal basis of the orthogonal complement of span(Q), Q is (d, k)."""
    d, k = Q.shape
    full, _ = np.linalg.qr(np.hstack([Q, np.eye(d)]))
    return full[:, k:d]


def subspace_angle_to_vector(Q, v):
    """Angle between vector v and the subspace spanned by orthonormal Q."""
    v = v / np.linalg.norm(v)
    proj = Q @ (Q.T @ v)
    return float(np.arcsin(np.clip(np.linalg.norm(v - proj), -1.0, 1.0)))


# -- types -------------------------------------------------------------------


@dataclass
class SplittingEstimate:
    """Estimated stable/center-unstable splitting at one orbit anchor."""

    orbit_index: int
    window_index: int  # boundary index within the ensemble
    time: float
    state: np.ndarray
    basis_cu: np.ndarray  # (d, 2) orthonormal
    basis_s: np.ndarray  # (d, d_s) orthonormal
    exponents_cu: np.ndarray  # finite-time rates, 1/time
    exponents_s: np.ndarray
    residual: float  # principal-angle disagreement between seed frames
    converged: bool
    near_equilibrium: bool = False


@dataclass
class ConeCheckRecord:
    point: np.ndarray
    aperture: float
    elapsed: float
    verdict: str  # 'contained' | 'violated'
    margin: float
    orbit_index: int = -1
    window_index: int = -1


@dataclass
class ExpansionFit:
    times: np.ndarray  # positive, increasing
    mean_log_det: np.ndarray  # anchor-average of log |det DZ_t| restricted to cu
    slope: float  # theta-hat
    intercept: float  # log K-hat
    r2: float
    samples: np.ndarray  # (n_anchor, n_times) raw log-dets

    def to_dict(self):
        return {
            "times": self.times.tolist(),
            "mean_log_det": self.mean_log_det.tolist(),
            "theta_hat": self.slope,
            "log_K_hat": self.intercept,
            "r2": self.r2,
        }


# -- splitting estimation ------------------------------------------------------


def _forward_sweep(props, seed):
    """QR power iteration along the window propagators; returns per-boundary
    frames (n, m+1, d, k) and per-window log growth factors (n, m, k)."""
    n, m, d, _ = props.shape
    k = seed.shape[1]
    Q = np.broadcast_to(seed, (n, d, k)).copy()
    frames = np.empty((n, m + 1, d, k))
    growth = np.empty((n, m, k))
    frames[:, 0] = Q
    for j in range(m):
        Z = props[:, j] @ Q
        Q, R = _batched_qr(Z)
        diag = np.abs(np.diagonal(R, axis1=-2, axis2=-1))
        growth[:, j] = np.log(np.maximum(diag, 1e-300))
        frames[:, j + 1] = Q
    return frames, growth


def _backward_adjoint_sweep(props, seed):
    """Adjoint cocycle iterated from the far end back to each boundary."""
    n, m, d, _ = props.shape
    k = seed.shape[1]
    W = np.broadcast_to(seed, (n, d, k)).copy()
    frames = np.empty((n, m + 1, d, k))
    frames[:, m] = W
    for j in range(m - 1, -1, -1):
        Z = np.swapaxes(props[:, j], -1, -2) @ W
        W, _ = _batched_qr(Z)
        frames[:, j] = W
    return frames


def _as_ensemble(orbit) -> WindowEnsemble:
    if isinstance(orbit, WindowEnsemble):
        return orbit
    # OrbitSegment with tangent data: repackage its windows
    if not getattr(orbit, "has_tangent", False):
        raise ValueError("orbit carries no tangent data")
    starts = orbit.window_starts
    m = len(starts)
    d = orbit.system.d
    props = np.empty((1, m, d, d))
    states = np.empty((1, m + 1, d))
    traces = np.empty((1, m))
    for j in range(m):
        props[0, j] = orbit.window_matrix(j)
        k = int(np.searchsorted(orbit.times, starts[j], side="left"))
        states[0, j] = orbit.states[k]
        w_end = starts[j + 1] if j + 1 < m else orbit.times[-1]
        ke = int(np.searchsorted(orbit.times, w_end, side="right")) - 1
        traces[0, j] = orbit.trace_integrals[ke]
    states[0, m] = orbit.states[-1]
    return WindowEnsemble(orbit.system, float(orbit.window), orbit.tol,
                          states, props, traces, orbit.stats)


def estimate_splitting(
    system,
    orbit,
    d_s: int = 1,
    transient: float = 20.0,
    residual_threshold: float = 1e-4,
    equilibria=None,
    delta_exclude: float = 0.5,
    rng_seed: int = 0x5EED,
) -> list[SplittingEstimate]:
    """Estimate E^s and E^cu along integrated orbits.

    ``orbit`` is an OrbitSegment with tangent data or a WindowEnsemble.
    Anchors are window boundaries with at least ``transient`` flow time on
    both sides.  Estimates whose two-seed disagreement exceeds
    ``residual_threshold`` are flagged unconverged (kept, for reporting, but
    downstream checks skip them).
    """
    ens = _as_ensemble(orbit)
    d = system.d
    if d_s + 2 != d:
        raise ValueError("d_s must equal d - 2")
    w = ens.window
    m = ens.n_windows
    total = m * w
    if total < 2 * transient + w:
        raise ValueError(
            f"orbit too short: total time {total} < 2*transient + window = {2 * transient + w}"
        )
    props = ens.propagators

    # generic fixed frames: coordinate axes can be invariant (e.g. diagonal
    # systems) and would stall the power iteration
    rng = np.random.default_rng(rng_seed)
    seed_a = np.linalg.qr(rng.normal(size=(d, 2)))[0]
    seed_b = np.linalg.qr(rng.normal(size=(d, 2)))[0]
    seed_full = np.linalg.qr(rng.normal(size=(d, d)))[0]
    fwd_a, growth_cu = _forward_sweep(props, seed_a)
    fwd_b, _ = _forward_sweep(props, seed_b)
    bwd_a = _backward_adjoint_sweep(props, seed_a)
    bwd_b = _backward_adjoint_sweep(props, seed_b)
    # full-frame sweep for the complete finite-time spectrum
    _, growth_all = _forward_sweep(props, seed_full)

    j_lo = int(np.ceil(transient / w - 1e-9))
    j_hi = m - int(np.ceil(transient / w - 1e-9))
    eq_states = None
    if equilibria is not None and len(equilibria):
        eq_states = np.atleast_2d(np.asarray(
            [getattr(e, "state", e) for e in equilibria], dtype=float))

    out: list[SplittingEstimate] = []
    for i in range(ens.n_orbits):
        for j in range(j_lo, j_hi + 1):
            Qcu = fwd_a[i, j]
            res_f = principal_angle(Qcu, fwd_b[i, j])
            Wadj = bwd_a[i, j]
            res_b = principal_angle(Wadj, bwd_b[i, j])
            basis_s = _complement(Wadj)[:, :d_s]
            # finite-time exponents: trailing average since the transient
            # (at the first anchor, the immediate next window stands in)
            if j > j_lo:
                exps_all = growth_all[i, j_lo:j].mean(axis=0) / w
                exps_cu = growth_cu[i, j_lo:j].mean(axis=0) / w
            else:
                exps_all = growth_all[i, j] / w
                exps_cu = growth_cu[i, j] / w
            state = ens.states[i, j]
            near = bool(eq_states is not None and
                        np.min(np.linalg.norm(eq_states - state, axis=1)) < delta_exclude)
            residual = max(res_f, res_b)
            out.append(
                SplittingEstimate(
                    orbit_index=i,
                    window_index=j,
                    time=j * w,
                    state=state,
                    basis_cu=Qcu,
                    basis_s=basis_s,
                    exponents_cu=exps_cu,
                    exponents_s=np.sort(exps_all)[:d_s],
                    residual=residual,
                    converged=residual <= residual_threshold,
                    near_equilibrium=near,
                )
            )
    return out


def splitting_pairs(splittings, ensemble, T):
    """Index pairs (est_x, est_y) with y = Z_T x on the same orbit."""
    w = ensemble.window
    k = T / w
    if abs(k - round(k)) > 1e-9:
        raise ValueError("T must be a multiple of the ensemble window")
    k = int(round(k))
    by_key = {(e.orbit_index, e.window_index): e for e in splittings}
    pairs = []
    for e in splittings:
        partner = by_key.get((e.orbit_index, e.window_index + k))
        if partner is not None:
            pairs.append((e, partner))
    return pairs


# -- cone invariance ----------------------------------------------------------


def _cone_probes(basis_cu, basis_s, a, n_probe, boundary=True):
    """Probe vectors on (or inside) the cone boundary ||v_s|| = a ||v_cu||."""
    angles = np.linspace(0.0, np.pi, n_probe, endpoint=False)
    d_s = basis_s.shape[1]
    probes = []
    for phi in angles:
        vcu = basis_cu @ np.array([np.cos(phi), np.sin(phi)])
        if not boundary:
            probes.append(vcu)
            continue
        for sgn in (1.0, -1.0):
            vs = basis_s @ (sgn * np.ones(d_s) / np.sqrt(d_s))
            probes.append(vcu + a * vs)
    return np.asarray(probes)


def cone_membership_margin(w, basis_cu, basis_s, a):
    """min margin (a ||w_cu|| - ||w_s||) / ||w|| for image vectors w (rows)."""
    B = np.hstack([basis_cu, basis_s])
    coef = np.linalg.solve(B, w.T).T  # (n, d)
    wcu = coef[:, :2] @ basis_cu.T
    ws = coef[:, 2:] @ basis_s.T
    ncu = np.linalg.norm(wcu, axis=1)
    ns = np.linalg.norm(ws, axis=1)
    nn = np.linalg.norm(w, axis=1)
    margins = (a * ncu - ns) / np.maximum(nn, 1e-300)
    return float(margins.min())


def check_cone_invariance(
    system,
    ensemble: WindowEnsemble,
    splittings,
    a: float = 0.5,
    T: float = 1.0,
    n_probe: int = 8,
) -> list[ConeCheckRecord]:
    """Push cone-boundary probes by DZ_T and test membership at the image.

    Anchors come from the splitting estimates; only converged pairs
    (x, Z_T x) are checked.
    """
    if a <= 0:
        raise ValueError("aperture must be positive")
    records = []
    w = ensemble.window
    k = int(round(T / w))
    for ex, ey in splitting_pairs(splittings, ensemble, T):
        if not (ex.converged and ey.converged):
            continue
        M = ensemble.propagator_range(ex.orbit_index, ex.window_index, ex.window_index + k)
        probes = _cone_probes(ex.basis_cu, ex.basis_s, a, n_probe)
        images = probes @ M.T
        margin = cone_membership_margin(images, ey.basis_cu, ey.basis_s, a)
        records.append(
            ConeCheckRecord(
                point=ex.state,
                aperture=a,
                elapsed=T,
                verdict="contained" if margin > 0 else "violated",
                margin=margin,
                orbit_index=ex.orbit_index,
                window_index=ex.window_index,
            )
        )
    return records


def cone_check_points(system, points, a=0.5, T=1.0, n_probe=8,
                      transient=6.0, window=None, tol=1e-8) -> list[ConeCheckRecord]:
    """Cone check for explicit seed points: each seed yields one anchor after
    a forward transient (splittings estimated on the seed's own orbit)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    w = window or min(T, 2.0)
    n_lead = int(np.ceil(transient / w))
    kT = int(round(T / w))
    if abs(kT * w - T) > 1e-9:
        raise ValueError("T must be a multiple of the window")
    m = 2 * n_lead + kT
    ens = integrate_windows(system, points, n_windows=m, window=w, tol=tol)
    spl = estimate_splitting(system, ens, transient=n_lead * w - 1e-9)
    keep = [e for e in spl if e.window_index == n_lead or e.window_index == n_lead + kT]
    return check_cone_invariance(system, ens, keep, a=a, T=T, n_probe=n_probe)


# -- contraction / domination -------------------------------------------------


def check_contraction_domination(ensemble, splittings, T, envelope_factor=2.0):
    """Fit C, lambda for the stable-contraction and domination families.

    Values are sampled at window multiples T' <= T over all converged anchor
    pairs away from equilibria.  lambda comes from the least-squares slope of
    log value vs T'; the envelope constant C is set at the 99.5th percentile
    of the fit residuals (local rates fluctuate along the orbit, so the mean
    line is not a bound).  Samples exceeding the envelope by more than
    ``envelope_factor`` are reported as violations.
    """
    w = ensemble.window
    kmax = int(round(T / w))
    if kmax < 1:
        raise ValueError("horizon shorter than one window")
    ts, contr, dom, tags = [], [], [], []
    excluded = 0
    for k in range(1, kmax + 1):
        for ex, ey in splitting_pairs(splittings, ensemble, k * w):
            if not (ex.converged and ey.converged):
                continue
            if ex.near_equilibrium or ey.near_equilibrium:
                excluded += 1
                continue
            M = ensemble.propagator_range(ex.orbit_index, ex.window_index,
                                          ex.window_index + k)
            c = np.linalg.norm(M @ ex.basis_s, 2)
            A = ey.basis_cu.T @ (M @ ex.basis_cu)
            smin = np.linalg.svd(A, compute_uv=False)[-1]
            ts.append(k * w)
            contr.append(c)
            dom.append(c / max(smin, 1e-300))
            tags.append((ex.orbit_index, ex.window_index, k))
    if not ts:
        raise ValueError("no converged anchor pairs available")
    ts = np.asarray(ts)
    out = {"n_samples": len(ts), "n_excluded_near_equilibrium": excluded}
    for name, vals in (("contr", np.asarray(contr)), ("dom", np.asarray(dom))):
        fit = linear_fit(ts, np.log(vals))
        resid = np.log(vals) - fit.predict(ts)
        C = float(np.exp(fit.intercept + np.percentile(resid, 99.5)))
        lam = float(np.exp(fit.slope))
        envelope = np.log(envelope_factor * C) + ts * fit.slope
        bad = np.where(np.log(vals) > envelope)[0]
        out[f"C_{name}"] = C
        out[f"lam_{name}"] = lam
        out[f"r2_{name}"] = fit.r2
        out[f"violations_{name}"] = [tags[i] for i in bad]
    out["violations"] = out["violations_contr"] + out["violations_dom"]
    return out


# -- volume expansion ----------------------------------------------------------


def restricted_log_det(M, basis_cu):
    """log |det(M restricted to span(basis_cu))| via the 2-plane Gram ratio."""
    W = M @ basis_cu
    g = W.T @ W
    det = np.linalg.det(g)
    return 0.5 * np.log(max(det, 1e-300))


def fit_volume_expansion(ensemble, splittings, horizon) -> ExpansionFit:
    """Fit log|det(DZ_t | E^cu)| = log K + theta t on anchor-averaged samples.

    Per-anchor curves fluctuate with the local expansion along the orbit, so
    the line is fitted to the per-time anchor average; raw samples are kept
    in the report.
    """
    w = ensemble.window
    kmax = int(round(horizon / w))
    anchors = [e for e in splittings
               if e.converged and not e.near_equilibrium
               and e.window_index + kmax <= ensemble.n_windows]
    if not anchors:
        raise ValueError("no usable anchors for the requested horizon")
    times = np.arange(1, kmax + 1) * w
    samples = np.empty((len(anchors), kmax))
    for idx, e in enumerate(anchors):
        M = np.eye(ensemble.system.d)
        for k in range(1, kmax + 1):
            M = ensemble.propagators[e.orbit_index, e.window_index + k - 1] @ M
            samples[idx, k - 1] = restricted_log_det(M, e.basis_cu)
    mean_curve = samples.mean(axis=0)
    fit = linear_fit(np.concatenate([[0.0], times]), np.concatenate([[0.0], mean_curve]))
    return ExpansionFit(
        times=times,
        mean_log_det=mean_curve,
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        r2=float(fit.r2),
        samples=samples,
    )


def reversed_volume_control(system, splittings, horizon, window=None, tol=1e-10):
    """Volume-expansion fit for the time-reversed flow on the forward planes.

    On the attracting set E^cu is backward invariant, so the restricted
    determinant of the reversed propagator decays at rate -theta; a positive
    fitted slope flags a non-example.
    """
    rev = system.reversed()
    anchors = [e for e in splittings if e.converged and not e.near_equilibrium]
    if not anchors:
        raise ValueError("no converged anchors")
    states = np.stack([e.state for e in anchors])
    w = window or min(1.0, horizon)
    m = int(round(horizon / w))
    ens = integrate_windows(rev, states, n_windows=m, window=w, tol=tol)
    times = np.arange(1, m + 1) * w
    samples = np.empty((len(anchors), m))
    for i, e in enumerate(anchors):
        M = np.eye(system.d)
        for k in range(m):
            M = ens.propagators[i, k] @ M
            samples[i, k] = restricted_log_det(M, e.basis_cu)
    mean_curve = samples.mean(axis=0)
    fit = linear_fit(np.concatenate([[0.0], times]), np.concatenate([[0.0], mean_curve]))
    return ExpansionFit(times, mean_curve, float(fit.slope), float(fit.intercept),
                        float(fit.r2), samples)
