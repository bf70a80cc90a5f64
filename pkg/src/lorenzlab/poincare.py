"""Cross-sections, event-located return maps, roof functions, singular set.

The crossing driver integrates a whole batch of trajectories through one
adaptive stepper.  Crossings of the section plane are bracketed with a cubic
Hermite interpolant on each accepted step and refined by vectorized Newton
iterations on short fixed substeps, so the located event point sits on the
computed trajectory to the event tolerance.

Return-time gating follows the first-return definition: a crossing counts as
a return only if it is oriented, transversal, inside the (inset) chart
bounds, and occurs more than T1 after the previous return.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._rk import CubicHermite, dp54_stream
from .fitting import linear_fit
from .integrate import _check_tol, integrate, plain_rhs


class EscapeError(RuntimeError):
    """No return located within t_max (or trajectory left the box)."""


class TangencyError(RuntimeError):
    """Only near-tangential crossings were found."""


class DiscontinuityProximityError(RuntimeError):
    """Derivative methods disagree: the point sits too close to a branch cut."""


class InsufficientSamplesError(RuntimeError):
    """Not enough qualifying samples for the requested fit."""


# -- cross-sections ----------------------------------------------------------


@dataclass(frozen=True)
class CrossSection:
    """Oriented affine section with an in-plane orthonormal chart."""

    p: tuple  # base point
    normal: tuple  # unit normal
    e1: tuple  # chart basis, orthonormal, orthogonal to normal
    e2: tuple
    bounds: tuple  # ((u1_lo, u1_hi), (u2_lo, u2_hi))
    orientation: int = -1  # required sign of <G, n> at crossings
    T1: float = 0.5
    transversality_floor: float = 1e-3
    event_tol: float = 1e-10
    inset_frac: float = 0.05  # chart inset standing in for the subcross-section

    def __post_init__(self):
        n = np.asarray(self.normal)
        if abs(np.linalg.norm(n) - 1) > 1e-12:
            raise ValueError("normal must be a unit vector")
        for e in (self.e1, self.e2):
            v = np.asarray(e)
            if abs(np.linalg.norm(v) - 1) > 1e-12 or abs(v @ n) > 1e-12:
                raise ValueError("chart basis must be orthonormal and orthogonal to normal")
        if abs(np.asarray(self.e1) @ np.asarray(self.e2)) > 1e-12:
            raise ValueError("chart basis vectors must be mutually orthogonal")
        if self.T1 <= 0:
            raise ValueError("T1 must be positive")

    @property
    def _p(self):
        return np.asarray(self.p, dtype=float)

    @property
    def _n(self):
        return np.asarray(self.normal, dtype=float)

    @property
    def _chart(self):
        return np.stack([np.asarray(self.e1, dtype=float), np.asarray(self.e2, dtype=float)])

    def offset(self, X):
        return (np.asarray(X, dtype=float) - self._p) @ self._n

    def to_chart(self, X):
        return (np.asarray(X, dtype=float) - self._p) @ self._chart.T

    def to_world(self, U):
        U = np.asarray(U, dtype=float)
        return self._p + U @ self._chart

    def inset_bounds(self, inset=True):
        b = np.asarray(self.bounds, dtype=float)
        if not inset:
            return b
        shrink = self.inset_frac * (b[:, 1] - b[:, 0]) / 2
        return np.stack([b[:, 0] + shrink, b[:, 1] - shrink], axis=1)

    def in_bounds(self, U, inset=True):
        b = self.inset_bounds(inset)
        U = np.asarray(U, dtype=float)
        return np.all((U >= b[:, 0]) & (U <= b[:, 1]), axis=-1)


def lorenz_default_section(system, T1=0.5) -> CrossSection:
    """Plane z = rho - 1 through both wing equilibria, downward oriented."""
    if system.family == "classical-lorenz":
        z = system.p["rho"] - 1.0
        # attractor trace reaches roughly the wing-equilibrium abscissa
        span = 2.0 * np.sqrt(system.p["beta"] * z)
    elif system.family == "extended-lorenz":
        al, be, ga, de = (system.p[k] for k in ("alpha", "beta", "gamma", "delta"))
        z = be * ga / (al * de + be * ga)
        span = 4.0 * np.sqrt(max(ga * (1 - z) / de, 1.0))
    else:
        raise ValueError("no default section for this family")
    return CrossSection(
        p=(0.0, 0.0, z),
        normal=(0.0, 0.0, 1.0),
        e1=(1.0, 0.0, 0.0),
        e2=(0.0, 1.0, 0.0),
        bounds=((-span, span), (-span, span)),
        orientation=-1,
        T1=T1,
    )


# -- samples -------------------------------------------------------------------


@dataclass
class ReturnSample:
    """One record of the section map: x -> f(x) with roof value tau."""

    x: np.ndarray  # chart coordinates of the start point
    fx: np.ndarray  # chart coordinates of the return point
    tau: float
    branch: int
    itinerary: tuple
    residual: float
    gdot: float  # <G, n> at the located event
    state: np.ndarray  # world coordinates of the event
    dist_gamma0: float = math.nan

    def row(self):
        return [self.x[0], self.x[1], self.fx[0], self.fx[1], self.tau,
                self.dist_gamma0, self.branch, self.residual]


def branch_id_from_itinerary(itinerary) -> int:
    """Hash a sign itinerary to a stable small integer (length marker bit)."""
    bits = 0
    for i, s in enumerate(itinerary):
        if s > 0:
            bits |= 1 << i
    return bits | (1 << len(itinerary))


# -- the crossing driver --------------------------------------------------------


@dataclass
class _Traj:
    idx: int
    y: np.ndarray
    f: np.ndarray
    t: float = 0.0
    t_ref: float = 0.0  # time of the previous accepted return
    events: list = field(default_factory=list)  # accepted ReturnSamples
    itinerary: list = field(default_factory=list)
    status: str = "running"
    had_tangential: bool = False
    min_dist: np.ndarray | None = None


def _hermite_brackets(sec, t0, y0, f0, t1, y1, f1):
    g0 = float(sec.offset(y0))
    g1 = float(sec.offset(y1))
    dg0 = float(f0 @ sec._n)
    dg1 = float(f1 @ sec._n)
    ch = CubicHermite(t0, t1, g0, g1, dg0, dg1)
    if g0 == 0.0:
        return [(t0, t0)] + ch.roots()
    return ch.roots()


def _dp54_step_vec(system, y, f, h):
    """One DP54 step with per-row step sizes h (shape (k, 1))."""
    from ._rk import _A, _C

    ks = [f]
    for i in range(1, 7):
        acc = ks[0] * _A[i][0]
        for j in range(1, i):
            if _A[i][j] != 0.0:
                acc = acc + ks[j] * _A[i][j]
        yi = y + h * acc
        ks.append(system.rhs(yi))
    return y + h * (ks[0] * _A[6][0] + ks[2] * _A[6][2] + ks[3] * _A[6][3]
                    + ks[4] * _A[6][4] + ks[5] * _A[6][5])


def _advance_vec(system, y0, f0, dt, nsub=2):
    """Vectorized fixed advance by per-row dt (shape (k,))."""
    y = y0.copy()
    f = f0.copy()
    h = (dt / nsub)[:, None]
    for step in range(nsub):
        y = _dp54_step_vec(system, y, f, h)
        if step + 1 < nsub:
            f = system.rhs(y)
    return y


def _refine_events(system, sec, pend, event_tol):
    """Vectorized Newton refinement of bracketed crossings.

    pend rows: (traj, t_base, y_base(3), f_base(3), t_lo, t_hi).
    Returns arrays (t_event, state, gdot, residual).
    """
    k = len(pend)
    tb = np.array([p[1] for p in pend])
    yb = np.stack([p[2] for p in pend])
    fb = np.stack([p[3] for p in pend])
    t_lo = np.array([p[4] for p in pend])
    t_hi = np.array([p[5] for p in pend])
    t = 0.5 * (t_lo + t_hi)
    for _ in range(12):
        y = _advance_vec(system, yb, fb, t - tb)
        g = sec.offset(y)
        if np.all(np.abs(g) <= 0.1 * event_tol):
            break
        gd = system.rhs(y) @ sec._n
        gd = np.where(np.abs(gd) < 1e-14, np.sign(gd + 1e-300) * 1e-14, gd)
        t = np.clip(t - g / gd, t_lo, t_hi)
    y = _advance_vec(system, yb, fb, t - tb)
    g = sec.offset(y)
    gdot = system.rhs(y) @ sec._n
    return t, y, gdot, np.abs(g)


def drive_crossings(
    system,
    starts_world,
    section: CrossSection,
    n_events=1,
    t_gate=None,
    tol=1e-8,
    t_max=1000.0,
    chunk=2.0,
    max_step=0.25,
    box_radius=1e3,
    track_points=None,
):
    """Integrate a batch and collect oriented transversal section crossings.

    t_gate defaults to section.T1 (return-map semantics: the clock resets at
    each accepted event).  Pass t_gate=0 for plain section-to-section
    crossing maps.  ``track_points``: optional (m, d) array; per-trajectory
    minimum distances to these points are recorded (equilibrium
    identification for the singular set).

    Returns the list of per-trajectory records (statuses: 'ok', 'escape',
    'tangency-only', 'no-return').
    """
    _check_tol(tol)
    if t_gate is None:
        t_gate = section.T1
    starts = np.atleast_2d(np.asarray(starts_world, dtype=float))
    n, d = starts.shape
    f0 = system.rhs(starts)
    tp = None if track_points is None else np.asarray(track_points, dtype=float)
    trajs = [
        _Traj(i, starts[i].copy(), f0[i].copy(),
              min_dist=None if tp is None else np.full(len(tp), np.inf))
        for i in range(n)
    ]
    active = list(trajs)

    while active:
        Y0 = np.stack([tr.y for tr in active]).ravel()
        m = len(active)

        def rhs_flat(t, y, _m=m):
            return system.rhs(y.reshape(_m, d)).ravel()

        pend = []

        def cb(t0, y0, f0c, t1, y1, f1c, _pend=pend, _act=active, _m=m):
            Y0c = y0.reshape(_m, d)
            Y1c = y1.reshape(_m, d)
            F0c = f0c.reshape(_m, d)
            F1c = f1c.reshape(_m, d)
            g0 = section.offset(Y0c)
            g1 = section.offset(Y1c)
            hit = (g0 * g1 < 0) | (g0 == 0.0)
            if tp is not None:
                dists = np.linalg.norm(Y1c[:, None, :] - tp[None, :, :], axis=2)
                for i, tr in enumerate(_act):
                    np.minimum(tr.min_dist, dists[i], out=tr.min_dist)
            for i in np.nonzero(hit)[0]:
                tr = _act[i]
                for (tl, th) in _hermite_brackets(section, t0, Y0c[i], F0c[i], t1, Y1c[i], F1c[i]):
                    _pend.append((tr, t0, Y0c[i].copy(), F0c[i].copy(), tl, th))
            return False

        _, y_end, _ = dp54_stream(rhs_flat, 0.0, Y0, chunk, rtol=tol, atol=tol,
                                  max_step=max_step, callback=cb)
        Y_end = y_end.reshape(m, d)

        if pend:
            te, ye, gde, res = _refine_events(system, section, pend, section.event_tol)
            by_traj: dict[int, list] = {}
            for j, entry in enumerate(pend):
                by_traj.setdefault(entry[0].idx, []).append(j)
            for idx, js in by_traj.items():
                tr = trajs[idx]
                if tr.status != "running":
                    continue
                for j in sorted(js, key=lambda jj: te[jj]):
                    t_abs = tr.t + te[j]
                    if t_abs <= 1e-9:
                        continue  # the seed point itself
                    state = ye[j]
                    gdot = float(gde[j])
                    chart = section.to_chart(state)
                    if gdot * section.orientation <= 0:
                        continue
                    if not section.in_bounds(chart):
                        continue
                    if abs(gdot) < section.transversality_floor:
                        tr.had_tangential = True
                        continue
                    tr.itinerary.append(1 if chart[0] > 0 else -1)
                    if t_abs - tr.t_ref <= t_gate:
                        continue
                    itin = tuple(tr.itinerary)
                    tr.events.append(
                        ReturnSample(
                            x=np.full(2, np.nan),
                            fx=chart,
                            tau=t_abs - tr.t_ref,
                            branch=branch_id_from_itinerary(itin),
                            itinerary=itin,
                            residual=float(res[j]),
                            gdot=gdot,
                            state=state.copy(),
                        )
                    )
                    tr.t_ref = t_abs
                    tr.itinerary = []
                    if len(tr.events) >= n_events:
                        tr.status = "ok"
                        break

        still = []
        for i, tr in enumerate(active):
            tr.t += chunk
            tr.y = Y_end[i]
            tr.f = system.rhs(tr.y)
            if tr.status != "running":
                continue
            if np.linalg.norm(tr.y) > box_radius:
                tr.status = "escape"
            elif tr.t >= t_max:
                tr.status = "tangency-only" if tr.had_tangential and not tr.events else "no-return"
            else:
                still.append(tr)
        active = still
    return trajs


# -- return-map front ends -------------------------------------------------------


def _finalize_samples(trajs, starts_chart, n_returns):
    """Stitch start coordinates through composed returns; None where failed."""
    out = []
    for tr, x0 in zip(trajs, starts_chart):
        if tr.status != "ok" or len(tr.events) < n_returns:
            out.append(None)
            continue
        samples = []
        prev = np.asarray(x0, dtype=float)
        for ev in tr.events[:n_returns]:
            ev.x = prev
            samples.append(ev)
            prev = ev.fx
        out.append(samples)
    return out


def batch_returns(section, system, pts_chart, n_returns=1, tol=1e-8, t_max=1000.0,
                  chunk=2.0, max_step=0.25, target=None, t_gate=None):
    """Composed returns for a batch of chart points.

    When ``target`` is given, events are located on that section instead
    (section-to-section crossing map, gate defaulting to 0).  Returns
    (samples, statuses): samples[i] is a list of ReturnSample of length
    n_returns, or None when trajectory i failed ('escape', 'tangency-only',
    'no-return').
    """
    pts = np.atleast_2d(np.asarray(pts_chart, dtype=float))
    starts = section.to_world(pts)
    event_sec = section if target is None else target
    if t_gate is None:
        t_gate = section.T1 if target is None else 0.0
    trajs = drive_crossings(system, starts, event_sec, n_events=n_returns, tol=tol,
                            t_max=t_max, chunk=chunk, max_step=max_step, t_gate=t_gate)
    return _finalize_samples(trajs, pts, n_returns), [tr.status for tr in trajs]


def locate_return(section, system, x, n_returns=1, tol=1e-8, t_max=1000.0):
    """First oriented transversal return of the chart point x (or the
    n_returns-fold composition; itineraries concatenate through branch ids).
    """
    x = np.asarray(x, dtype=float)
    if not section.in_bounds(x, inset=False):
        raise ValueError("start point outside chart bounds")
    samples, statuses = batch_returns(section, system, x[None], n_returns=n_returns,
                                      tol=tol, t_max=t_max)
    if samples[0] is None:
        if statuses[0] == "tangency-only":
            raise TangencyError(f"only tangential crossings for x={x}")
        raise EscapeError(f"no return within t_max={t_max} for x={x} ({statuses[0]})")
    if n_returns == 1:
        return samples[0][0]
    return samples[0]


def first_crossing(system, x0_world, target: CrossSection, t_min=0.0, tol=1e-8,
                   t_max=1000.0, chunk=2.0):
    """First oriented transversal crossing of a (possibly different) section,
    starting from a world point.  t_min plays the role of T1."""
    trajs = drive_crossings(system, np.asarray(x0_world, dtype=float)[None], target,
                            n_events=1, t_gate=t_min, tol=tol, t_max=t_max, chunk=chunk)
    tr = trajs[0]
    if tr.status != "ok":
        if tr.status == "tangency-only":
            raise TangencyError("only tangential crossings located")
        raise EscapeError(f"no crossing within t_max ({tr.status})")
    return tr.events[0]


def attractor_seeds(section, system, n, transient=50.0, tol=1e-8, seed_state=None,
                    n_orbits=8):
    """Chart points on the section attractor, harvested from long orbits."""
    base = np.array([1.3, 1.2, 25.0]) if seed_state is None else np.asarray(seed_state)
    rng = np.random.default_rng(42)
    starts = base + rng.normal(scale=0.5, size=(n_orbits, 3))
    from .integrate import flow_map

    starts = flow_map(system, starts, transient, tol=tol)
    per = int(np.ceil(n / n_orbits))
    samples, _ = batch_returns(section, system, section.to_chart(starts),
                               n_returns=per + 1, tol=tol)
    pts = []
    for s in samples:
        if s is None:
            continue
        pts.extend(ev.fx for ev in s[1:])
    if len(pts) < n:
        raise EscapeError("insufficient attractor returns harvested")
    return np.asarray(pts[:n])


# -- singular set -----------------------------------------------------------------


@dataclass
class SingularSetEstimate:
    """Polyline approximation of the singular set in chart coordinates."""

    polylines: list  # list of (m, 2) arrays, ordered along the scan axis
    resolution: float
    equilibrium_index: list  # per polyline, index into `equilibria`
    equilibria: np.ndarray  # (k, d) world states

    def distance(self, pts_chart):
        """Distance of chart points to the nearest polyline (segment metric)."""
        pts = np.atleast_2d(np.asarray(pts_chart, dtype=float))
        best = np.full(len(pts), np.inf)
        for line in self.polylines:
            a = line[:-1]
            b = line[1:]
            if len(line) == 1:
                dv = np.linalg.norm(pts[:, None, :] - line[None, :, :], axis=2).min(axis=1)
                best = np.minimum(best, dv)
                continue
            ab = b - a
            denom = np.maximum((ab**2).sum(axis=1), 1e-300)
            tpar = ((pts[:, None, :] - a[None]) * ab[None]).sum(axis=2) / denom
            tpar = np.clip(tpar, 0.0, 1.0)
            proj = a[None] + tpar[:, :, None] * ab[None]
            dv = np.linalg.norm(pts[:, None, :] - proj, axis=2).min(axis=1)
            best = np.minimum(best, dv)
        return best if len(best) > 1 else float(best[0])

    def local_tangent(self, idx_line, u2):
        """Unit tangent of polyline idx_line nearest scan coordinate u2."""
        line = self.polylines[idx_line]
        k = int(np.clip(np.searchsorted(line[:, 1], u2) - 1, 0, len(line) - 2))
        t = line[k + 1] - line[k]
        return t / np.linalg.norm(t)

    def component_for_equilibrium(self, eq_state, atol=1e-6):
        """Index of the longest polyline associated with the given equilibrium."""
        eq_state = np.asarray(eq_state, dtype=float)
        dists = np.linalg.norm(self.equilibria - eq_state, axis=1)
        k = int(np.argmin(dists))
        if dists[k] > max(atol, 1e-6):
            raise ValueError("no tracked equilibrium matches the given state")
        cands = [i for i, e in enumerate(self.equilibrium_index) if e == k]
        if not cands:
            raise ValueError("no singular-set component associated with this equilibrium")
        return max(cands, key=lambda i: len(self.polylines[i]))


def _branch_key(section, system, pts_chart, tol, t_max, target=None):
    """Coarse classifier for bisection: first-return wing sign or failure mode."""
    samples, statuses = batch_returns(section, system, pts_chart, n_returns=1,
                                      tol=tol, t_max=t_max, target=target)
    keys = []
    for s, st in zip(samples, statuses):
        if s is None:
            keys.append(("fail", st))
        else:
            keys.append(("ok", s[0].itinerary[0]))
    return keys, samples


def locate_singular_set(section, system, escape_time=4.0, resolution=1e-6,
                        n_lines=41, n_scan=61, tol=1e-8, t_max=60.0,
                        target=None) -> SingularSetEstimate:
    """Approximate the singular set by bisecting branch-identity changes.

    Scans chart grid lines u2 = const; adjacent scan points whose first
    return lands on different branches (or fails differently) bracket a
    singular-line crossing, refined by bisection on u1 to ``resolution``.
    """
    b = section.inset_bounds()
    u2s = np.linspace(b[1, 0], b[1, 1], n_lines)
    u1s = np.linspace(b[0, 0], b[0, 1], n_scan)
    grid = np.stack(np.meshgrid(u1s, u2s, indexing="ij"), axis=-1).reshape(-1, 2)
    keys, _ = _branch_key(section, system, grid, tol, t_max, target=target)
    keys = np.asarray([hash(k) for k in keys]).reshape(n_scan, n_lines)

    # bisect each sign change (vectorized across all brackets at once)
    brackets = []  # (u2_index, lo, hi)
    for j in range(n_lines):
        col = keys[:, j]
        for i in range(n_scan - 1):
            if col[i] != col[i + 1]:
                brackets.append([j, u1s[i], u1s[i + 1]])
    if not brackets:
        import warnings

        warnings.warn("no branch change found on any grid line; empty singular set")
        return SingularSetEstimate([], resolution, [], np.zeros((0, system.d)))

    brackets = np.asarray(brackets, dtype=float)
    n_iter = int(np.ceil(np.log2((u1s[1] - u1s[0]) / resolution)))
    lo = brackets[:, 1].copy()
    hi = brackets[:, 2].copy()
    v = u2s[brackets[:, 0].astype(int)]
    key_lo, _ = _branch_key(section, system, np.stack([lo, v], axis=1), tol, t_max, target=target)
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        key_mid, _ = _branch_key(section, system, np.stack([mid, v], axis=1), tol, t_max, target=target)
        same = np.asarray([km == kl for km, kl in zip(key_mid, key_lo)])
        lo = np.where(same, mid, lo)
        key_lo = [km if s else kl for km, kl, s in zip(key_mid, key_lo, same)]
        hi = np.where(same, hi, mid)

    verts = np.stack([0.5 * (lo + hi), v], axis=1)
    # drop duplicate vertices on the same scan line (grid points that sat
    # exactly on the singular line produce twin brackets)
    keep_idx = []
    for k in range(len(verts)):
        dup = any(
            brackets[k, 0] == brackets[m, 0]
            and abs(verts[k, 0] - verts[m, 0]) < max(10 * resolution, 1e-9)
            for m in keep_idx
        )
        if not dup:
            keep_idx.append(k)
    verts = verts[keep_idx]
    brackets = brackets[keep_idx]
    # associate each vertex with the equilibrium its deep orbit approaches
    eqs = _known_equilibria(system)
    trajs = drive_crossings(system, section.to_world(verts), section, n_events=1,
                            tol=tol, t_max=escape_time + section.T1,
                            chunk=min(2.0, escape_time), track_points=eqs)
    eq_idx_v = np.array([int(np.argmin(tr.min_dist)) for tr in trajs])

    # chain vertices into polylines across consecutive scan lines: a vertex
    # extends the chain whose tip is nearest in u1 (within a jump tolerance);
    # each chain gets the majority equilibrium of its vertices
    width = float(b[0, 1] - b[0, 0])
    jump_tol = max(0.06 * width, 3.0 * (u2s[1] - u2s[0]) if n_lines > 1 else width)
    line_of_vertex = brackets[:, 0].astype(int)
    chains: list[dict] = []  # {'verts': [...], 'eqs': [...], 'tip': u1, 'line': j}
    for j in range(n_lines):
        here = np.nonzero(line_of_vertex == j)[0]
        used = set()
        for k in here:
            u1v = verts[k, 0]
            best, best_d = None, jump_tol
            for ci, ch in enumerate(chains):
                if ci in used or j - ch["line"] > 2:
                    continue
                dd = abs(ch["tip"] - u1v)
                if dd < best_d:
                    best, best_d = ci, dd
            if best is None:
                chains.append({"verts": [verts[k]], "eqs": [eq_idx_v[k]],
                               "tip": u1v, "line": j})
                used.add(len(chains) - 1)
            else:
                ch = chains[best]
                ch["verts"].append(verts[k])
                ch["eqs"].append(eq_idx_v[k])
                ch["tip"] = u1v
                ch["line"] = j
                used.add(best)
    polylines, eq_ids = [], []
    for ch in sorted(chains, key=lambda c: -len(c["verts"])):
        polylines.append(np.asarray(ch["verts"]))
        vals, counts = np.unique(ch["eqs"], return_counts=True)
        eq_ids.append(int(vals[np.argmax(counts)]))
    return SingularSetEstimate(polylines, resolution, eq_ids, eqs)


def _known_equilibria(system):
    from .flows import classify_equilibria

    span = 30.0 if system.family == "classical-lorenz" else 5.0
    box = [(-span, span)] * (system.d - 1) + [(min(-span, -5.0), max(span, 45.0))]
    if system.family == "classical-lorenz":
        box = [(-20, 20), (-20, 20), (-5, 40)]
    reps = classify_equilibria(system, box)
    return np.stack([r.state for r in reps]) if reps else np.zeros((1, system.d))


def refine_gamma0_crossing(section, system, u2, u1_lo, u1_hi, depth=1e-12,
                           tol=1e-10, t_max=60.0):
    """Bisect the singular-line crossing on the line u2=const to high depth.

    Returns (u1_star, key_lo, key_hi); used by the roof-law sampler, which
    needs vertex accuracy far beyond the polyline resolution.
    """
    lo, hi = float(u1_lo), float(u1_hi)
    key_lo = _branch_key(section, system, np.array([[lo, u2]]), tol, t_max)[0][0]
    key_hi = _branch_key(section, system, np.array([[hi, u2]]), tol, t_max)[0][0]
    if key_lo == key_hi:
        raise ValueError("bracket endpoints have identical branch keys")
    n_iter = int(np.ceil(np.log2(max((hi - lo) / depth, 2.0))))
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        key_mid = _branch_key(section, system, np.array([[mid, u2]]), tol, t_max)[0][0]
        if key_mid == key_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), key_lo, key_hi


def sample_roof_near_gamma0(section, system, gamma0: SingularSetEstimate,
                            depths=None, n_stations=24, tol=1e-10, t_max=60.0,
                            line_index=0):
    """Return samples at controlled perpendicular distances from the singular set.

    At each station along the polyline the crossing is re-bisected (all
    stations batched per bisection sweep) to below the smallest depth, then
    points are placed at offsets +-d along the scan axis; the recorded
    distance is the offset projected onto the local normal of the singular
    line, so it stays accurate far beyond the polyline resolution.
    """
    if depths is None:
        depths = np.geomspace(1e-9, 1e-2, 36)
    depths = np.asarray(depths, dtype=float)
    line = gamma0.polylines[line_index]
    if len(line) < 3:
        raise InsufficientSamplesError("singular polyline too short")
    # stations interpolated along the polyline, away from its ends
    s_par = np.linspace(0.12, 0.88, n_stations)
    seg = np.linspace(0, 1, len(line))
    u1c_all = np.interp(s_par, seg, line[:, 0])
    u2c_all = np.interp(s_par, seg, line[:, 1])
    sin_all = np.array([abs(gamma0.local_tangent(line_index, v)[1]) for v in u2c_all])
    keep = sin_all >= 0.1
    if not np.any(keep):
        raise InsufficientSamplesError("singular line nearly parallel to the scan axis")
    u1c, u2c, sin_theta = u1c_all[keep], u2c_all[keep], sin_all[keep]

    # batched bisection across stations on the first-return branch key;
    # the initial bracket must absorb polyline interpolation error, so it
    # expands geometrically until the key changes across it
    pad = np.full(len(u1c), max(16 * gamma0.resolution, 1e-3))
    ok = np.zeros(len(u1c), dtype=bool)
    key_lo = [None] * len(u1c)
    for _ in range(10):
        todo = ~ok
        if not np.any(todo):
            break
        lo_t = u1c[todo] - pad[todo]
        hi_t = u1c[todo] + pad[todo]
        v_t = u2c[todo]
        kl, _ = _branch_key(section, system, np.stack([lo_t, v_t], axis=1), tol, t_max)
        kh, _ = _branch_key(section, system, np.stack([hi_t, v_t], axis=1), tol, t_max)
        idx_todo = np.nonzero(todo)[0]
        for j, (a, b) in enumerate(zip(kl, kh)):
            if a != b:
                ok[idx_todo[j]] = True
                key_lo[idx_todo[j]] = a
        pad[~ok] *= 2.5
    lo = u1c[ok] - pad[ok]
    hi = u1c[ok] + pad[ok]
    u2c, sin_theta = u2c[ok], sin_theta[ok]
    key_lo = [k for k, o in zip(key_lo, ok) if o]
    if len(lo) == 0:
        raise InsufficientSamplesError("no station bracketed the singular line")
    depth_target = max(min(depths.min() * 1e-2, 1e-12), 1e-14)
    n_iter = int(np.ceil(np.log2(2 * float(pad.max()) / depth_target)))
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        key_mid, _ = _branch_key(section, system, np.stack([mid, u2c], axis=1), tol, t_max)
        same = np.asarray([km == kl for km, kl in zip(key_mid, key_lo)])
        lo = np.where(same, mid, lo)
        key_lo = [km if s else kl for km, kl, s in zip(key_mid, key_lo, same)]
        hi = np.where(same, hi, mid)
    u1_star = 0.5 * (lo + hi)

    offs = np.concatenate([depths, -depths])
    pts = np.stack([
        (u1_star[:, None] + offs[None, :]).ravel(),
        np.repeat(u2c, len(offs)),
    ], axis=1)
    dists = (sin_theta[:, None] * np.abs(offs)[None, :]).ravel()
    samples, _ = batch_returns(section, system, pts, n_returns=1, tol=tol, t_max=t_max)
    out = []
    for s, dist in zip(samples, dists):
        if s is None:
            continue
        s[0].dist_gamma0 = float(dist)
        out.append(s[0])
    if not out:
        raise InsufficientSamplesError("no roof samples obtained near the singular set")
    return out


def annotate_distances(samples, gamma0: SingularSetEstimate):
    """Fill dist_gamma0 by point-to-polyline distance (polyline-resolution limited)."""
    pts = np.stack([s.x for s in samples])
    dv = np.atleast_1d(gamma0.distance(pts))
    for s, d in zip(samples, dv):
        s.dist_gamma0 = float(d)
    return samples


def fit_roof_law(samples, gamma0=None, cutoff=None, min_samples=100, lam_u=None):
    """Regression of tau on -log dist(x, Gamma0) over deep returns.

    cutoff defaults to T1 + 2 (the shallow regime is excluded).  Returns a
    dict with the slope C-hat, intercept, r2, sample count, and when lam_u is
    given the ratio of the slope to 1/lam_u.
    """
    if gamma0 is not None:
        samples = annotate_distances(list(samples), gamma0)
    if cutoff is None:
        raise ValueError("cutoff (T1 + 2 by convention) must be supplied")
    deep = [s for s in samples
            if s.tau > cutoff and np.isfinite(s.dist_gamma0) and s.dist_gamma0 > 0]
    if len(deep) < min_samples:
        raise InsufficientSamplesError(
            f"only {len(deep)} deep samples (tau > {cutoff}), need {min_samples}")
    x = -np.log(np.array([s.dist_gamma0 for s in deep]))
    y = np.array([s.tau for s in deep])
    fit = linear_fit(x, y)
    out = {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2,
           "n_deep": len(deep), "cutoff": cutoff}
    if lam_u is not None:
        out["slope_times_lam_u"] = fit.slope * lam_u
    return out


# -- return-map derivative ---------------------------------------------------------


def flow_projection(system, section, y_state, w):
    """Project tangent vectors w (rows) onto the section plane along the flow."""
    G = system.rhs(y_state)
    gn = float(G @ section._n)
    if abs(gn) < section.transversality_floor:
        raise TangencyError("image point is nearly tangential; projection ill-posed")
    c = (w @ section._n) / gn
    return w - np.outer(c, G)


def return_derivative(section, system, x, finite_diff_step=5e-4, tol=1e-10,
                      cross_tol=1e-4, t_max=1000.0):
    """Df(x) of the return map, cross-validated two ways.

    (i) tangent-flow transport of the chart basis projected along the flow
    direction at f(x) onto the section; (ii) central finite differences of
    the located return.  The two must agree to ``cross_tol`` relative error,
    otherwise the point is treated as discontinuity-adjacent and rejected.
    Returns (Df, singular_values, sample).
    """
    x = np.asarray(x, dtype=float)
    base = locate_return(section, system, x, tol=tol, t_max=t_max)
    tau = base.tau
    seg = integrate(system, section.to_world(x), tau, tol=tol, with_tangent=True)
    M = seg.fundamental_at(tau)
    cols = flow_projection(system, section, base.state, (M @ section._chart.T).T)
    Df_tan = section._chart @ cols.T  # chart rows x chart cols

    # finite differences of the located return, same-branch enforced
    h = finite_diff_step
    probes = np.array([
        x + [h, 0], x - [h, 0], x + [0, h], x - [0, h],
    ])
    samples, statuses = batch_returns(section, system, probes, n_returns=1,
                                      tol=tol, t_max=t_max)
    if any(s is None for s in samples):
        raise DiscontinuityProximityError("finite-difference probe failed to return")
    if any(s[0].itinerary != base.itinerary for s in samples):
        raise DiscontinuityProximityError("probes straddle a branch boundary")
    fxs = [s[0].fx for s in samples]
    Df_fd = np.stack([(fxs[0] - fxs[1]) / (2 * h), (fxs[2] - fxs[3]) / (2 * h)], axis=1)

    rel = np.linalg.norm(Df_tan - Df_fd, 2) / max(np.linalg.norm(Df_tan, 2), 1e-300)
    if rel > cross_tol:
        raise DiscontinuityProximityError(
            f"derivative methods disagree: rel error {rel:.2e} > {cross_tol:.0e}")
    svals = np.linalg.svd(Df_tan, compute_uv=False)
    return Df_tan, svals, base
