"""Stable-leaf collapse: reference u-curve, 1-D quotient map, regularity checks.

The projection pi along stable leaves is computed by nearest-forward-image
continuation: two section points lie on the same leaf exactly when their
N-fold forward images stay together, so pi(z) is the reference-curve point
whose N-th return image is nearest to that of z, restricted to candidates
with the same N-step branch itinerary (expansion separates different
cylinders; the itinerary match removes folding aliases).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq, curve_fit

from .fitting import linear_fit, loglog_fit
from .poincare import (
    CrossSection,
    InsufficientSamplesError,
    attractor_seeds,
    batch_returns,
)


class ProjectionError(RuntimeError):
    """Leaf projection failed (no itinerary match / leaf lost near Gamma0)."""


# -- reference u-curve -----------------------------------------------------------


@dataclass
class ReferenceCurve:
    """Polynomial u-curve through the section attractor, arclength parametrized.

    The curve is a graph b = Q(a) in a rotated chart frame whose abscissa
    ``axis`` is chosen transversal to the stable leaves (for a Lorenz-type
    section the leaves run along the singular line, so the default abscissa
    is its normal).  s = 0 at a = 0, preserving odd symmetry.
    """

    coeffs: np.ndarray  # ascending powers of Q
    a_lo: float
    a_hi: float
    axis: tuple = (1.0, 0.0)  # chart direction of the abscissa
    _a_grid: np.ndarray = field(repr=False, default=None)
    _s_grid: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self._a_grid is None:
            a = np.linspace(self.a_lo, self.a_hi, 4001)
            dp = np.polynomial.polynomial.polyder(self.coeffs)
            slope = np.polynomial.polynomial.polyval(a, dp)
            ds = np.sqrt(1.0 + slope**2)
            s = np.concatenate([[0.0], np.cumsum(0.5 * (ds[1:] + ds[:-1]) * np.diff(a))])
            s -= np.interp(0.0, a, s)  # s = 0 at a = 0
            object.__setattr__(self, "_a_grid", a)
            object.__setattr__(self, "_s_grid", s)

    @property
    def _frame(self):
        e_a = np.asarray(self.axis, dtype=float)
        e_a = e_a / np.linalg.norm(e_a)
        return e_a, np.array([-e_a[1], e_a[0]])

    @property
    def domain(self):
        return float(self._s_grid[0]), float(self._s_grid[-1])

    def a_of_s(self, s):
        return np.interp(s, self._s_grid, self._a_grid)

    def s_of_a(self, a):
        return np.interp(a, self._a_grid, self._s_grid)

    def point(self, s):
        """Chart coordinates of the curve point at arclength s (broadcasts)."""
        a = self.a_of_s(np.asarray(s, dtype=float))
        b = np.polynomial.polynomial.polyval(a, self.coeffs)
        e_a, e_b = self._frame
        return a[..., None] * e_a + b[..., None] * e_b

    def tangent(self, s):
        a = self.a_of_s(np.asarray(s, dtype=float))
        dp = np.polynomial.polynomial.polyder(self.coeffs)
        slope = np.polynomial.polynomial.polyval(a, dp)
        e_a, e_b = self._frame
        t = np.ones_like(a)[..., None] * e_a + slope[..., None] * e_b
        return t / np.linalg.norm(t, axis=-1, keepdims=True)

    def project_chart(self, pts):
        """Arclength of the nearest curve point (plain geometric projection)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        curve_pts = self.point(self._s_grid[::4])
        d = np.linalg.norm(pts[:, None, :] - curve_pts[None], axis=2)
        return self._s_grid[::4][np.argmin(d, axis=1)]


def fit_reference_curve(points, degree=5, symmetrize=False, trim=0.005,
                        axis=(1.0, 0.0)) -> ReferenceCurve:
    """Least-squares polynomial through section-attractor points.

    The points are expressed in the rotated frame given by ``axis`` and the
    fit is the graph b = Q(a), ordered by the dominant (abscissa) coordinate.
    With ``symmetrize`` the fit uses odd powers only and the point set is
    augmented with its image under u -> -u.
    """
    pts = np.asarray(points, dtype=float)
    if symmetrize:
        pts = np.vstack([pts, -pts])
    e_a = np.asarray(axis, dtype=float)
    e_a = e_a / np.linalg.norm(e_a)
    e_b = np.array([-e_a[1], e_a[0]])
    a, b = pts @ e_a, pts @ e_b
    lo, hi = np.quantile(a, [trim, 1 - trim])
    keep = (a >= lo) & (a <= hi)
    a, b = a[keep], b[keep]
    if symmetrize:
        powers = [p for p in range(1, degree + 1) if p % 2 == 1]
        hi = max(hi, -lo)
        lo = -hi
    else:
        powers = list(range(degree + 1))
    A = np.stack([a**p for p in powers], axis=1)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    coeffs = np.zeros(degree + 1)
    for p, c in zip(powers, sol):
        coeffs[p] = c
    return ReferenceCurve(coeffs, float(lo), float(hi), tuple(e_a))


# -- branches and the quotient map ------------------------------------------------


@dataclass
class InterpBranch:
    """Monotone branch backed by sampled values with PCHIP interpolation."""

    lo: float
    hi: float
    s_samples: np.ndarray
    f_samples: np.ndarray
    tau_samples: np.ndarray | None = None
    wing: int = 0

    def __post_init__(self):
        order = np.argsort(self.s_samples)
        self.s_samples = np.asarray(self.s_samples)[order]
        self.f_samples = np.asarray(self.f_samples)[order]
        if self.tau_samples is not None:
            self.tau_samples = np.asarray(self.tau_samples)[order]
        df = np.diff(self.f_samples)
        if np.all(df > 0):
            self.orientation = 1
        elif np.all(df < 0):
            self.orientation = -1
        else:
            # tolerate isolated non-monotone wiggles at projection noise level
            sig = np.sign(np.median(df))
            bad = np.sum(np.sign(df) != sig)
            if bad > max(2, 0.01 * len(df)):
                raise ValueError("branch samples are not monotone")
            keep = np.concatenate([[True], np.sign(df) == sig])
            self.s_samples = self.s_samples[keep]
            self.f_samples = self.f_samples[keep]
            if self.tau_samples is not None:
                self.tau_samples = self.tau_samples[keep]
            self.orientation = int(sig)
        self._interp = PchipInterpolator(self.s_samples, self.f_samples, extrapolate=True)
        self._dinterp = self._interp.derivative()
        self._tau = (
            PchipInterpolator(self.s_samples, self.tau_samples, extrapolate=True)
            if self.tau_samples is not None
            else None
        )

    def f(self, s):
        return self._interp(s)

    def df(self, s):
        return self._dinterp(s)

    def tau(self, s):
        if self._tau is None:
            raise ValueError("branch carries no roof samples")
        return self._tau(s)

    @property
    def f_lo(self):
        return float(self.f(self.lo))

    @property
    def f_hi(self):
        return float(self.f(self.hi))

    def inverse(self, v):
        """Preimage of v under the monotone branch (bisection to 1e-12)."""
        a, b = self.lo, self.hi
        fa, fb = self.f(a), self.f(b)
        lo_v, hi_v = (fa, fb) if fa < fb else (fb, fa)
        if not (lo_v - 1e-12 <= v <= hi_v + 1e-12):
            raise ValueError("value outside branch image")
        v = min(max(v, lo_v), hi_v)
        if abs(self.f(a) - v) < 1e-14:
            return a
        if abs(self.f(b) - v) < 1e-14:
            return b
        return brentq(lambda s: self.f(s) - v, a, b, xtol=1e-12)


@dataclass
class AnalyticBranch:
    """Branch given by exact callables (synthetic oracle maps)."""

    lo: float
    hi: float
    fn: callable
    dfn: callable
    wing: int = 0
    tau_fn: callable = None
    inv_fn: callable = None

    def __post_init__(self):
        mid = 0.5 * (self.lo + self.hi)
        self.orientation = 1 if self.dfn(mid) > 0 else -1

    def f(self, s):
        return self.fn(np.asarray(s, dtype=float))

    def df(self, s):
        return self.dfn(np.asarray(s, dtype=float))

    def tau(self, s):
        if self.tau_fn is None:
            raise ValueError("branch carries no roof")
        return self.tau_fn(np.asarray(s, dtype=float))

    @property
    def f_lo(self):
        return float(self.fn(np.nextafter(self.lo, self.hi)))

    @property
    def f_hi(self):
        return float(self.fn(np.nextafter(self.hi, self.lo)))

    def inverse(self, v):
        if self.inv_fn is not None:
            return float(self.inv_fn(v))
        a = np.nextafter(self.lo, self.hi)
        b = np.nextafter(self.hi, self.lo)
        fa, fb = self.f(a), self.f(b)
        lo_v, hi_v = (fa, fb) if fa < fb else (fb, fa)
        if not (lo_v - 1e-12 <= v <= hi_v + 1e-12):
            raise ValueError("value outside branch image")
        v = min(max(v, lo_v), hi_v)
        return brentq(lambda s: self.f(s) - v, a, b, xtol=1e-12)


@dataclass
class QuotientMap1D:
    """Piecewise-monotone 1-D quotient map with its singular set."""

    domain: tuple  # (lo, hi) in the u coordinate
    branches: list
    cusps: np.ndarray  # interior singular coordinates, sorted
    one_sided_limits: dict  # cusp -> (limit from below, limit from above)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.branches = sorted(self.branches, key=lambda b: b.lo)
        self.cusps = np.asarray(sorted(self.cusps), dtype=float)

    @property
    def singular_set(self):
        """All breakpoints including domain endpoints."""
        return np.concatenate([[self.domain[0]], self.cusps, [self.domain[1]]])

    def dist_to_singular(self, s):
        s = np.asarray(s, dtype=float)
        return np.min(np.abs(s[..., None] - self.singular_set[None]), axis=-1)

    def branch_of(self, s):
        for b in self.branches:
            if b.lo <= s <= b.hi:
                return b
        raise ValueError(f"{s} outside every branch domain")

    def _branch_index(self, s):
        los = np.array([b.lo for b in self.branches])
        his = np.array([b.hi for b in self.branches])
        s = np.asarray(s, dtype=float)
        idx = np.clip(np.searchsorted(los, s, side="right") - 1, 0, len(self.branches) - 1)
        # points beyond a branch hi (inside a gap) keep the nearest branch
        return idx, los, his

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        idx, _, _ = self._branch_index(s)
        out = np.empty_like(s)
        for k, b in enumerate(self.branches):
            m = idx == k
            if np.any(m):
                out[m] = b.f(s[m])
        return out if out.ndim else float(out)

    def deriv(self, s):
        s = np.asarray(s, dtype=float)
        idx, _, _ = self._branch_index(s)
        out = np.empty_like(s)
        for k, b in enumerate(self.branches):
            m = idx == k
            if np.any(m):
                out[m] = b.df(s[m])
        return out if out.ndim else float(out)

    def roof(self, s):
        s = np.asarray(s, dtype=float)
        idx, _, _ = self._branch_index(s)
        out = np.empty_like(s)
        for k, b in enumerate(self.branches):
            m = idx == k
            if np.any(m):
                out[m] = b.tau(s[m])
        return out if out.ndim else float(out)

    @property
    def has_roof(self):
        return all(
            getattr(b, "tau_samples", None) is not None or getattr(b, "tau_fn", None)
            for b in self.branches
        )

    def min_expansion(self, delta_frac=1e-3, n=2000):
        """min |Df| outside the delta-exclusion zone around the singular set."""
        lo, hi = self.domain
        L = hi - lo
        s = np.linspace(lo + 1e-9 * L, hi - 1e-9 * L, n)
        s = s[self.dist_to_singular(s) > delta_frac * L]
        return float(np.min(np.abs(self.deriv(s))))

    def compose(self, k):
        return compose_quotient(self, k)

    # -- serialization ---------------------------------------------------

    def to_json(self):
        if not all(isinstance(b, InterpBranch) for b in self.branches):
            raise TypeError("only sampled quotient maps serialize to JSON")
        payload = {
            "domain": list(self.domain),
            "cusps": self.cusps.tolist(),
            "one_sided_limits": {repr(k): list(v) for k, v in self.one_sided_limits.items()},
            "meta": self.meta,
            "branches": [
                {
                    "lo": b.lo,
                    "hi": b.hi,
                    "wing": b.wing,
                    "s": b.s_samples.tolist(),
                    "f": b.f_samples.tolist(),
                    "tau": None if b.tau_samples is None else b.tau_samples.tolist(),
                }
                for b in self.branches
            ],
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        branches = [
            InterpBranch(
                lo=b["lo"],
                hi=b["hi"],
                s_samples=np.asarray(b["s"]),
                f_samples=np.asarray(b["f"]),
                tau_samples=None if b["tau"] is None else np.asarray(b["tau"]),
                wing=b["wing"],
            )
            for b in d["branches"]
        ]
        limits = {float(k): tuple(v) for k, v in d["one_sided_limits"].items()}
        return cls(tuple(d["domain"]), branches, np.asarray(d["cusps"]), limits, d["meta"])


@dataclass
class ComposedBranch:
    """Monotone branch of an iterated quotient map (chain of base branches)."""

    lo: float
    hi: float
    qmap: QuotientMap1D
    k: int
    wing: int = 0

    def __post_init__(self):
        mid = 0.5 * (self.lo + self.hi)
        self.orientation = 1 if self.df(mid) > 0 else -1

    def f(self, s):
        s = np.asarray(s, dtype=float)
        for _ in range(self.k):
            s = self.qmap(s)
        return s

    def df(self, s):
        s = np.asarray(s, dtype=float)
        acc = np.ones_like(s)
        for _ in range(self.k):
            acc = acc * self.qmap.deriv(s)
            s = self.qmap(s)
        return acc

    def tau(self, s):
        s = np.asarray(s, dtype=float)
        acc = np.zeros_like(s)
        for _ in range(self.k):
            acc = acc + self.qmap.roof(s)
            s = self.qmap(s)
        return acc

    @property
    def f_lo(self):
        return float(self.f(self.lo + 1e-12 * (self.hi - self.lo)))

    @property
    def f_hi(self):
        return float(self.f(self.hi - 1e-12 * (self.hi - self.lo)))

    def inverse(self, v):
        eps = 1e-12 * (self.hi - self.lo)
        a, b = self.lo + eps, self.hi - eps
        fa, fb = float(self.f(a)), float(self.f(b))
        lo_v, hi_v = (fa, fb) if fa < fb else (fb, fa)
        if not (lo_v - 1e-12 <= v <= hi_v + 1e-12):
            raise ValueError("value outside branch image")
        v = min(max(v, lo_v), hi_v)
        return brentq(lambda s: float(self.f(s)) - v, a, b, xtol=1e-12)


def compose_quotient(qmap: QuotientMap1D, k: int) -> QuotientMap1D:
    """Quotient map iterated k times, with refined branch partition.

    Splits the domain at all preimages of the singular set up to depth k,
    so every composed branch is a monotone piece.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return qmap
    lo, hi = qmap.domain
    cuts = set(float(c) for c in qmap.cusps)
    level_cuts = set(cuts)
    for _depth in range(k - 1):
        new_cuts = set()
        for b in qmap.branches:
            fa, fb = b.f_lo, b.f_hi
            vlo, vhi = (fa, fb) if fa < fb else (fb, fa)
            for c in sorted(level_cuts):
                if vlo + 1e-14 < c < vhi - 1e-14:
                    try:
                        new_cuts.add(float(b.inverse(c)))
                    except ValueError:
                        pass
        cuts |= new_cuts
        level_cuts = new_cuts
    interior = sorted(c for c in cuts if lo + 1e-12 < c < hi - 1e-12)
    edges = [lo] + interior + [hi]
    branches = []
    for a, b_ in zip(edges[:-1], edges[1:]):
        if b_ - a < 1e-12 * (hi - lo):
            continue
        branches.append(ComposedBranch(a, b_, qmap, k))
    limits = {}
    eps = 1e-9 * (hi - lo)
    los = [br.lo for br in branches]
    for c in interior:
        j = int(np.searchsorted(los, c))
        below = branches[max(j - 1, 0)]
        above = branches[min(j, len(branches) - 1)]
        limits[c] = (float(below.f(c - eps)), float(above.f(c + eps)))
    return QuotientMap1D(
        (lo, hi), branches, np.asarray(interior), limits,
        meta={**qmap.meta, "composed": k},
    )


# -- forward-image projection tables ------------------------------------------------


@dataclass
class LeafProjector:
    """pi onto a reference curve via multi-level forward-image matching.

    Table rows hold the stack of return images f^k(curve(s)), k = 1..N, for
    curve points at arclengths s.  Two points on one stable leaf stay close
    at EVERY composition level, while points on different leaves separate at
    some level, so the match minimizes the worst late-level distance over
    rows prefiltered by early-level proximity; sub-row resolution comes from
    projecting the query image onto the final-level arc between adjacent
    rows.
    """

    section: CrossSection
    system: object
    curve: ReferenceCurve
    n_leaf: int
    s_table: np.ndarray
    stacks: np.ndarray  # (n, n_leaf + 1, 2): level 0 is the curve point itself
    valid: np.ndarray  # bool per row
    prefilter_radius: float = None
    match_tol: float = 2e-3

    def __post_init__(self):
        if self.prefilter_radius is None:
            L = self.curve.domain[1] - self.curve.domain[0]
            self.prefilter_radius = 0.35 * L

    def project(self, query_stack):
        """Arclength of the leaf through the query, from its image stack.

        ``query_stack`` has rows [z, f(z), ..., f^N(z)] aligned with the
        table levels.  The query must lie on the arc interpolating adjacent
        table rows at every level, with one consistent interpolation
        parameter: perpendicular (off-arc) distances stay at the leaf-offset
        scale while along-arc spacing expands, and aliases on other
        filaments fail the consistency test at some level.  The refined s
        comes from the deepest consistent level (the most expanded, hence
        the most precise).  Raises ProjectionError when no segment is
        consistent (leaf lost near the singular set or no coverage).
        """
        q = np.asarray(query_stack, dtype=float)
        n_lv = q.shape[0]
        early = np.linalg.norm(self.stacks[:, :2] - q[None, :2], axis=2).max(axis=1)
        cand = self.valid & (early <= self.prefilter_radius)
        segs = np.nonzero(cand[:-1] & cand[1:])[0]
        if len(segs) == 0:
            raise ProjectionError("no table row near the query at early levels")
        A = self.stacks[segs]          # (m, n_lv, 2)
        B = self.stacks[segs + 1]
        ab = B - A
        ab2 = np.maximum((ab**2).sum(axis=2), 1e-300)   # (m, n_lv)
        tpar = ((q[None] - A) * ab).sum(axis=2) / ab2
        tclip = np.clip(tpar, 0.0, 1.0)
        proj = A + tclip[:, :, None] * ab
        dperp = np.linalg.norm(q[None] - proj, axis=2)  # (m, n_lv)
        seg_len = np.sqrt(ab2)
        # score candidate segments on the late levels
        score = (dperp[:, 2:] / (0.25 * seg_len[:, 2:] + 1e-4)).max(axis=1)
        jj = int(np.argmin(score))
        ok_lv = dperp[jj] <= np.maximum(0.25 * seg_len[jj], 5e-4)
        if not np.all(ok_lv[:2]) or not np.any(ok_lv[2:]):
            raise ProjectionError("no consistent leaf segment in the table")
        j = segs[jj]
        ds = self.s_table[j + 1] - self.s_table[j]
        s_levels = self.s_table[j] + tclip[jj] * ds
        deep_ok = [k for k in range(2, n_lv) if ok_lv[k]]
        s_deep = np.array([s_levels[k] for k in deep_ok])
        if np.ptp(s_deep) > 3.0 * ds:
            raise ProjectionError("level-wise positions inconsistent (branch cut)")
        k_best = deep_ok[-1]
        return float(s_levels[k_best]), float(dperp[jj, k_best])


def _compose_records(section, system, pts_chart, n_returns, tol, t_max=200.0):
    """Batched composed returns: per point, a record with the full stack of
    return images (events_fx, one row per composition level) or None."""
    samples, _ = batch_returns(section, system, pts_chart, n_returns=n_returns,
                               tol=tol, t_max=t_max)
    out = []
    for s in samples:
        if s is None:
            out.append(None)
            continue
        out.append({
            "events_fx": np.stack([ev.fx for ev in s]),
            "final": s[-1].fx,
            "first_fx": s[0].fx,
            "first_tau": s[0].tau,
            "taus": np.array([ev.tau for ev in s]),
        })
    return out


def build_projector(section, system, curve, n_leaf=6, n_table=4096, tol=1e-9,
                    match_tol=2e-3):
    s_tab = np.linspace(*curve.domain, n_table)
    recs = _compose_records(section, system, curve.point(s_tab), n_leaf, tol)
    stacks = np.full((n_table, n_leaf + 1, 2), np.nan)
    valid = np.zeros(n_table, dtype=bool)
    pts = curve.point(s_tab)
    for i, r in enumerate(recs):
        if r is None:
            continue
        stacks[i, 0] = pts[i]
        stacks[i, 1:] = r["events_fx"]
        valid[i] = True
    return LeafProjector(section, system, curve, n_leaf, s_tab, stacks, valid,
                         match_tol=match_tol)


def project_points(projector: LeafProjector, pts_chart, tol=1e-9):
    """pi for arbitrary section points (their own compositions are integrated)."""
    pts = np.atleast_2d(np.asarray(pts_chart, dtype=float))
    recs = _compose_records(projector.section, projector.system, pts,
                            projector.n_leaf, tol)
    out = np.full(len(recs), np.nan)
    for i, r in enumerate(recs):
        if r is None:
            continue
        try:
            stack = np.vstack([pts[i][None, :], r["events_fx"]])
            out[i], _ = projector.project(stack)
        except ProjectionError:
            pass
    return out


# -- quotient construction ----------------------------------------------------------


def estimate_leaf_axis(section, system, pts_chart, n_leaf=4, tol=1e-8):
    """Mean stable-leaf direction on the section, from derivative probes."""
    dirs = []
    for x in np.atleast_2d(pts_chart):
        try:
            d = _stable_direction(section, system, np.asarray(x, dtype=float),
                                  n_leaf, tol)
        except Exception:
            continue
        if dirs and np.dot(dirs[0], d) < 0:
            d = -d
        dirs.append(d)
    if not dirs:
        raise ProjectionError("no stable-direction probe succeeded")
    m = np.mean(dirs, axis=0)
    m /= np.linalg.norm(m)
    return np.array([m[1], -m[0]])  # abscissa = leaf normal


def locate_cusp_on_curve(section, system, curve, s_lo, s_hi, v_lo, v_hi,
                         tol=1e-9, depth_frac=1e-12):
    """Bisect an image jump of the quotient along the curve.

    (s_lo, s_hi) bracket a discontinuity where the projected image jumps
    between v_lo and v_hi; the bisection key is which of the two values the
    midpoint image is nearer to, measured on the raw first-return point.
    """
    L = curve.domain[1] - curve.domain[0]

    def first_fx(s):
        recs = _compose_records(section, system, curve.point(np.atleast_1d(s)), 1, tol)
        return None if recs[0] is None else recs[0]["first_fx"]

    f_lo = first_fx(s_lo)
    f_hi = first_fx(s_hi)
    if f_lo is None or f_hi is None:
        raise ValueError("bracket endpoint failed to return")
    if np.linalg.norm(f_lo - f_hi) < 1e-6:
        raise ValueError("no image jump inside the given bracket")
    lo, hi = float(s_lo), float(s_hi)
    n_iter = int(np.ceil(np.log2(max((hi - lo) / (depth_frac * L), 2.0))))
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        fm = first_fx(mid)
        if fm is None:
            # sitting on the singular line itself: shrink from both sides
            lo = lo + 0.25 * (mid - lo)
            hi = hi - 0.25 * (hi - mid)
            continue
        if np.linalg.norm(fm - f_lo) <= np.linalg.norm(fm - f_hi):
            lo, f_lo = mid, fm
        else:
            hi, f_hi = mid, fm
    return 0.5 * (lo + hi)


def build_quotient(
    section,
    system,
    n_grid=1024,
    curve: ReferenceCurve | None = None,
    n_leaf=6,
    tol=1e-9,
    n_table=None,
    symmetrize=None,
    cusp_window=(1e-5, 5e-2),
    n_cusp_extra=40,
    min_branch_samples=5,
) -> QuotientMap1D:
    """Assemble the 1-D quotient map on a reference curve.

    Every curve grid point is lifted, mapped by one return, and projected
    back along its stable leaf (nearest-forward-image with itinerary match).
    Branches are split where the first-return wing flips or the projected
    image jumps; near each cusp, log-spaced extra samples resolve the cusp
    scaling; one-sided limits come from a |s - q|^omega model fit.
    """
    if symmetrize is None:
        symmetrize = system.family == "classical-lorenz"
    if curve is None:
        pts = attractor_seeds(section, system, max(2000, n_grid), tol=max(tol, 1e-8))
        axis = estimate_leaf_axis(section, system, pts[:: len(pts) // 8][:8],
                                  n_leaf=min(4, n_leaf), tol=max(tol, 1e-8))
        curve = fit_reference_curve(pts, degree=5, symmetrize=symmetrize, axis=axis)
    n_table = n_table or max(4096, 2 * n_grid)
    proj = build_projector(section, system, curve, n_leaf=n_leaf, n_table=n_table,
                           tol=tol)

    lo, hi = curve.domain
    L = hi - lo
    s_grid = np.linspace(lo, hi, n_grid)
    recs = _compose_records(section, system, curve.point(s_grid), n_leaf + 1, tol)

    def project_rec(r):
        # query stack for pi(f(x)): levels [f(x), f^2(x), ..., f^{N+1}(x)]
        if r is None:
            return np.nan
        try:
            val, _ = proj.project(r["events_fx"])
            return val
        except ProjectionError:
            return np.nan

    f_vals = np.array([project_rec(r) for r in recs])
    taus = np.array([np.nan if r is None else r["first_tau"] for r in recs])
    first_imgs = np.array([[np.nan, np.nan] if r is None else r["first_fx"] for r in recs])
    valid = np.isfinite(f_vals)

    # locate cusps: jumps of the projected image between consecutive valid
    # grid points (the raw first-return point jumps between the two tips)
    cusps = []
    jump_tol = 0.15 * L
    vi = np.nonzero(valid)[0]
    for a, b in zip(vi[:-1], vi[1:]):
        if abs(f_vals[b] - f_vals[a]) > jump_tol and s_grid[b] - s_grid[a] < 0.05 * L:
            try:
                q = locate_cusp_on_curve(section, system, curve, s_grid[a], s_grid[b],
                                         first_imgs[a], first_imgs[b], tol=tol)
            except ValueError:
                q = 0.5 * (s_grid[a] + s_grid[b])
            cusps.append(q)
    if not cusps:
        raise InsufficientSamplesError("no cusp located: quotient map looks single-branch")

    # extra log-spaced samples near each cusp
    extra_s, extra_f, extra_tau, extra_w = [], [], [], []
    for q in cusps:
        offs = np.geomspace(cusp_window[0] * L, cusp_window[1] * L, n_cusp_extra)
        cand = np.concatenate([q - offs, q + offs])
        cand = cand[(cand > lo) & (cand < hi)]
        recs_e = _compose_records(section, system, curve.point(cand), n_leaf + 1, tol)
        for s_val, r in zip(cand, recs_e):
            fv = project_rec(r)
            if np.isfinite(fv):
                extra_s.append(s_val)
                extra_f.append(fv)
                extra_tau.append(r["first_tau"])

    all_s = np.concatenate([s_grid[valid], np.asarray(extra_s)])
    all_f = np.concatenate([f_vals[valid], np.asarray(extra_f)])
    all_tau = np.concatenate([taus[valid], np.asarray(extra_tau)])
    order = np.argsort(all_s)
    all_s, all_f, all_tau = (a[order] for a in (all_s, all_f, all_tau))

    # assemble branches between consecutive cusps; branch label = cusp side
    edges = [lo] + sorted(cusps) + [hi]
    branches = []
    for bi, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        m = (all_s > a) & (all_s < b)
        if np.sum(m) < min_branch_samples:
            warnings.warn(f"branch ({a:.3g},{b:.3g}) has too few samples; dropped")
            continue
        branches.append(InterpBranch(a, b, all_s[m], all_f[m], all_tau[m],
                                     wing=(-1 if bi == 0 else +1) if len(edges) == 3 else bi))

    # one-sided limits via |s-q|^omega model on the near-cusp window
    limits = {}
    for q in cusps:
        lims = []
        for side in (-1.0, +1.0):
            m = (all_s - q) * side > 0
            dd = np.abs(all_s[m] - q)
            sel = (dd >= cusp_window[0] * L) & (dd <= cusp_window[1] * L * 0.5)
            ss, ff = dd[sel], all_f[m][sel]
            if len(ss) < 8:
                lims.append(float("nan"))
                continue
            sgn = np.sign(np.polyfit(ss, ff, 1)[0])

            def model(d, Lv, B, om):
                return Lv + sgn * B * d**om

            try:
                p0 = (ff[np.argmin(ss)] - sgn * 0.1, 1.0, 0.5)
                popt, _ = curve_fit(model, ss, ff, p0=p0, maxfev=20000)
                lims.append(float(popt[0]))
            except RuntimeError:
                lims.append(float(ff[np.argmin(ss)]))
        limits[float(q)] = tuple(lims)

    return QuotientMap1D(
        (lo, hi), branches, np.asarray(cusps), limits,
        meta={
            "n_leaf": n_leaf,
            "n_grid": n_grid,
            "tol": tol,
            "curve_coeffs": curve.coeffs.tolist(),
            "curve_a_range": [curve.a_lo, curve.a_hi],
            "curve_axis": list(curve.axis),
            "family": system.family,
        },
    )


# -- leaf tracing ----------------------------------------------------------------


@dataclass
class LeafTrace:
    """Polyline approximation of the stable leaf through a section point."""

    base: np.ndarray  # chart point
    points: np.ndarray  # (m, 2) ordered along the leaf, base included
    residuals: np.ndarray  # forward-separation at each accepted point
    contraction_per_return: np.ndarray  # per-return ratios measured on the trace
    truncated: bool = False

    def arclength(self):
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


def _stable_direction(section, system, x, n_leaf, tol, delta=1e-6):
    """Leaf tangent at x: least-expanded direction of the n_leaf-fold return."""
    probes = np.array([x + [delta, 0], x - [delta, 0], x + [0, delta], x - [0, delta]])
    recs = _compose_records(section, system, probes, n_leaf, tol)
    if any(r is None for r in recs):
        raise ProjectionError("stable-direction probes failed to return")
    # use the deepest level at which all four probes stay coherent
    col1 = (recs[0]["final"] - recs[1]["final"]) / (2 * delta)
    col2 = (recs[2]["final"] - recs[3]["final"]) / (2 * delta)
    M = np.stack([col1, col2], axis=1)
    _, _, vt = np.linalg.svd(M)
    return vt[-1] / np.linalg.norm(vt[-1])


def trace_leaf(section, system, x, n_leaf=6, span=0.05, step=1e-3, tol=1e-9,
               residual_factor=50.0) -> LeafTrace:
    """March the stable leaf through x by forward-separation minimization.

    From each accepted leaf point the next candidate sits one ``step`` along
    the current tangent; a five-point stencil across the transversal is
    searched for the offset minimizing the distance between n_leaf-fold
    images of candidate and base.  The march stops at ``span`` arclength per
    side, at the chart boundary, or when the residual indicates the leaf was
    lost (trace flagged truncated).
    """
    x = np.asarray(x, dtype=float)
    base_rec = _compose_records(section, system, x[None], n_leaf, tol)[0]
    if base_rec is None:
        raise ProjectionError("base point failed to return n_leaf times")
    base_img = base_rec["final"]
    base_stack = base_rec["events_fx"]
    d0 = _stable_direction(section, system, x, n_leaf, tol)
    n_steps = max(1, int(np.ceil(span / step)))
    stencil = np.array([-1.0, -0.5, 0.0, 0.5, 1.0]) * step

    def march(direction):
        pts = [x.copy()]
        resids = [0.0]
        d = direction.copy()
        truncated = False
        for _ in range(n_steps):
            p = pts[-1] + step * d
            perp = np.array([-d[1], d[0]])
            cand = p[None, :] + stencil[:, None] * perp[None, :]
            inside = section.in_bounds(cand, inset=False)
            if not np.all(inside):
                break
            recs = _compose_records(section, system, cand, n_leaf, tol)
            # leaf-mates stay near the base stack at every level; candidates
            # that wander at any late level have crossed a branch cut
            phi = np.array([
                np.inf if (r is None or
                           np.linalg.norm(r["events_fx"][1:] - base_stack[1:],
                                          axis=1).max() > 0.5)
                else float(np.linalg.norm(r["final"] - base_img))
                for r in recs
            ])
            if not np.all(np.isfinite(phi)):
                truncated = True
                break
            j = int(np.argmin(phi))
            if 0 < j < 4:
                s3, y3 = stencil[j - 1 : j + 2], phi[j - 1 : j + 2]
                denom = (s3[0] - 2 * s3[1] + s3[2])
                off = s3[1] - 0.5 * (y3[2] - y3[0]) / (y3[0] - 2 * y3[1] + y3[2]) * (
                    s3[1] - s3[0]) if abs(denom) > 0 else stencil[j]
                off = np.clip(off, stencil[0], stencil[-1])
            else:
                off = stencil[j]
            nxt = p + off * perp
            resid = float(phi[j])
            if resids[-1] > 0 and resid > residual_factor * (np.median(resids[1:]) + 1e-15):
                truncated = True
                break
            d_new = nxt - pts[-1]
            d = d_new / np.linalg.norm(d_new)
            pts.append(nxt)
            resids.append(resid)
        return pts, resids, truncated

    fwd_pts, fwd_res, trunc_f = march(d0)
    bwd_pts, bwd_res, trunc_b = march(-d0)
    pts = np.asarray(bwd_pts[::-1] + fwd_pts[1:])
    resids = np.asarray(bwd_res[::-1] + fwd_res[1:])

    # measured per-return contraction along the trace
    contr = np.full(3, np.nan)
    if len(pts) >= 2:
        a, b = pts[0], pts[-1]
        recs = _compose_records(section, system, np.stack([a, b]), 3, tol)
        if recs[0] is not None and recs[1] is not None:
            seps = [float(np.linalg.norm(a - b))]
            for k in range(3):
                seps.append(float(np.linalg.norm(
                    recs[0]["events_fx"][k] - recs[1]["events_fx"][k])))
            contr = np.array([seps[i + 1] / seps[i] for i in range(3)])
    return LeafTrace(x, pts, resids, contr, truncated=trunc_f or trunc_b)


# -- holonomy --------------------------------------------------------------------


@dataclass
class HolonomyReport:
    s0: np.ndarray  # sample arclengths on gamma0
    h: np.ndarray  # holonomy images (arclength on gamma1)
    dh: np.ndarray  # symmetric-difference derivative
    excluded: int
    holder_exponent: float
    holder_modulus: float

    @property
    def jac_min(self):
        return float(np.min(np.abs(self.dh)))

    @property
    def jac_max(self):
        return float(np.max(np.abs(self.dh)))

    @property
    def sign_changes(self):
        return int(np.sum(np.diff(np.sign(self.dh)) != 0))


def holonomy_jacobian(section, system, curve0: ReferenceCurve, curve1: ReferenceCurve,
                      n_pairs=48, n_leaf=6, tol=1e-9, n_table=2048,
                      rel_step=None) -> HolonomyReport:
    """Stable holonomy gamma0 -> gamma1 and its Jacobian by symmetric differences.

    h(x) is the intersection of the leaf through x with gamma1, computed by
    forward-image matching against a table on gamma1.  Points whose leaves
    fail to reach gamma1 (no itinerary match) are excluded; more than 50%
    exclusions raise a geometry error.
    """
    proj1 = build_projector(section, system, curve1, n_leaf=n_leaf,
                            n_table=n_table, tol=tol)
    lo, hi = curve0.domain
    L = hi - lo
    margin = 0.03 * L
    s0 = np.linspace(lo + margin, hi - margin, n_pairs)
    delta = rel_step if rel_step is not None else max(L / (8 * n_pairs), 1e-4 * L)
    stencil = np.concatenate([s0 - delta, s0, s0 + delta])
    pts0 = curve0.point(stencil)
    recs = _compose_records(section, system, pts0, n_leaf, tol)
    h_all = np.full(len(stencil), np.nan)
    for i, r in enumerate(recs):
        if r is None:
            continue
        try:
            stack = np.vstack([pts0[i][None, :], r["events_fx"]])
            h_all[i], _ = proj1.project(stack)
        except ProjectionError:
            pass
    hm, h0, hp = h_all[:n_pairs], h_all[n_pairs : 2 * n_pairs], h_all[2 * n_pairs :]
    good = np.isfinite(hm) & np.isfinite(h0) & np.isfinite(hp)
    excluded = int(np.sum(~good))
    if excluded > 0.5 * n_pairs:
        raise ProjectionError(
            f"holonomy geometry error: {excluded}/{n_pairs} leaves failed to reach gamma1")
    dh = (hp[good] - hm[good]) / (2 * delta)
    s_good = s0[good]
    # Holder modulus of log|Dh| from pairwise differences
    logd = np.log(np.abs(dh) + 1e-300)
    ii, jj = np.triu_indices(len(s_good), k=1)
    dv = np.abs(logd[ii] - logd[jj])
    ds = np.abs(s_good[ii] - s_good[jj])
    keep = (dv > 1e-12) & (ds > 0)
    if np.sum(keep) >= 8:
        fit = loglog_fit(ds[keep], dv[keep])
        eps_hat = float(np.clip(fit.slope, 0.05, 1.0))
        modulus = float(np.max(dv[keep] / ds[keep] ** eps_hat))
    else:
        eps_hat, modulus = 1.0, 0.0
    return HolonomyReport(s_good, h0[good], dh, excluded, eps_hat, modulus)


# -- cusp exponent and regularity ---------------------------------------------------


def fit_cusp_exponent(qmap: QuotientMap1D, equilibrium=None, window=(1e-4, 1e-2),
                      cusp_index=0, n_eval=24) -> dict:
    """Log-log regression of |fbar(u) - fbar(q+-)| on |u - q| near the cusp.

    ``window`` is relative to the domain length; both sides are fitted and
    averaged.  When an EquilibriumReport is given, the ratio to its
    omega = -lam_s/lam_u is reported.
    """
    lo, hi = qmap.domain
    L = hi - lo
    q = float(qmap.cusps[cusp_index])
    lim_lo, lim_hi = qmap.one_sided_limits[q]
    slopes, r2s, ns = [], [], []
    for side, lim in ((-1.0, lim_lo), (+1.0, lim_hi)):
        if not np.isfinite(lim):
            continue
        dd = np.geomspace(window[0] * L, window[1] * L, n_eval)
        ss = q + side * dd
        ss = ss[(ss > lo) & (ss < hi)]
        if len(ss) < 8:
            raise InsufficientSamplesError("cusp window holds fewer than 8 points")
        vals = np.abs(qmap(ss) - lim)
        fit = loglog_fit(np.abs(ss - q), vals)
        slopes.append(fit.slope)
        r2s.append(fit.r2)
        ns.append(fit.n)
    if not slopes:
        raise InsufficientSamplesError("no usable one-sided limit at the cusp")
    out = {"omega_hat": float(np.mean(slopes)), "omega_sides": slopes,
           "r2": float(np.min(r2s)), "window": window, "cusp": q}
    if equilibrium is not None and getattr(equilibrium, "omega", None):
        out["omega_equilibrium"] = equilibrium.omega
        out["ratio"] = out["omega_hat"] / equilibrium.omega
    return out


@dataclass
class RegularityReport:
    c0: dict
    c1: dict
    c2: dict
    c3: dict
    cusp_fit: dict | None = None
    holonomy: HolonomyReport | None = None

    def to_dict(self):
        return {
            "C0": self.c0, "C1": self.c1, "C2": self.c2, "C3": self.c3,
            "cusp_fit": self.cusp_fit,
        }


def check_regularity(qmap: QuotientMap1D, n_pairs=400, delta_frac=1e-3,
                     seed=20240601) -> RegularityReport:
    """Evaluate the nonuniform-expansion conditions on the quotient map.

    (C0) is trivial in one dimension (finite singular set): reported as a
    pass with eta = 1.  (C1) fits the one-sided log-log envelope slopes of
    |Dfbar| versus distance to the singular set; q-hat is the steeper
    divergence rate.  (C2) is evaluated on same-branch pairs with
    |x - y| < d(x, S)/2; (C3) coincides with (C2) in one dimension.
    """
    lo, hi = qmap.domain
    L = hi - lo
    sing = qmap.singular_set
    if not qmap.branches:
        raise ValueError("quotient map has no branches")

    c0 = {"pass": True, "eta": 1.0, "C": float(2 * len(sing)), "note": "finite singular set"}

    # (C1): per singular point and side, slope of log|Df| vs log d
    dgrid = np.geomspace(max(delta_frac * L, 1e-9 * L), 0.2 * L, 30)
    slopes = []
    samples_d, samples_df = [], []
    for s0 in sing:
        for side in (-1.0, 1.0):
            ss = s0 + side * dgrid
            ss = ss[(ss > lo + 1e-12 * L) & (ss < hi - 1e-12 * L)]
            ss = ss[qmap.dist_to_singular(ss) >= 0.99 * np.abs(ss - s0)]
            if len(ss) < 8:
                continue
            vals = np.abs(qmap.deriv(ss))
            if np.any(~np.isfinite(vals)) or np.any(vals <= 0):
                continue
            fit = loglog_fit(np.abs(ss - s0), vals)
            slopes.append(fit.slope)
            samples_d.append(np.abs(ss - s0))
            samples_df.append(vals)
    if not slopes:
        raise ValueError("no usable derivative data for (C1)")
    q_hat = float(max(0.0, -min(slopes)))
    dd = np.concatenate(samples_d)
    vv = np.concatenate(samples_df)
    C1 = float(np.max(np.maximum(vv * dd**q_hat, dd**q_hat / vv)))
    c1 = {"q_hat": q_hat, "C": C1, "side_slopes": slopes}

    # (C2)/(C3): same-branch pairs
    rng = np.random.default_rng(seed)
    ratios, dx_list = [], []
    for b in qmap.branches:
        m = max(4, n_pairs // max(len(qmap.branches), 1))
        x = rng.uniform(b.lo + 1e-9 * L, b.hi - 1e-9 * L, size=m)
        dxs = qmap.dist_to_singular(x)
        y = x + rng.uniform(-0.49, 0.49, size=m) * dxs
        y = np.clip(y, b.lo + 1e-12 * L, b.hi - 1e-12 * L)
        keep = (np.abs(x - y) > 1e-13 * L) & (np.abs(x - y) < dxs / 2)
        x, y = x[keep], y[keep]
        if len(x) == 0:
            continue
        dfx = np.abs(qmap.deriv(x))
        dfy = np.abs(qmap.deriv(y))
        ok = (dfx > 0) & (dfy > 0) & np.isfinite(dfx) & np.isfinite(dfy)
        x, y, dfx, dfy = x[ok], y[ok], dfx[ok], dfy[ok]
        v = np.abs(np.log(dfx) - np.log(dfy))
        bracket = dfx ** (-q_hat) + dfx**q_hat
        ratios.extend(v / bracket)
        dx_list.extend(np.abs(x - y))
    ratios = np.asarray(ratios)
    dx_arr = np.asarray(dx_list)
    nz = ratios > 1e-14
    if np.sum(nz) >= 8:
        fit = loglog_fit(dx_arr[nz], ratios[nz])
        eta_hat = float(np.clip(fit.slope, 0.05, 1.0))
        C2 = float(np.max(ratios[nz] / dx_arr[nz] ** eta_hat))
    else:
        eta_hat, C2 = 1.0, 0.0  # constant-derivative map: ratio identically zero
    c2 = {"eta_hat": eta_hat, "C": C2, "q": q_hat, "n_pairs": int(len(ratios)),
          "max_ratio": float(ratios.max(initial=0.0))}
    c3 = {**c2, "note": "|det Df| = |Df| in one dimension; identical to (C2)"}
    return RegularityReport(c0, c1, c2, c3)


# -- linear-saddle flow-box quotient ---------------------------------------------


def flowbox_quotient(system, n_grid=200, tol=1e-11, z0=0.05) -> QuotientMap1D:
    """Quotient of the linear-saddle flow box: entry {y=1} -> exit {|x|=1}.

    The entry coordinate is x0; collapsing the strong-stable z direction,
    the crossing map is u -> |u|^omega with omega = -lam_s/lam_u, realized
    here by event-located integration (closed form only in the oracle tests).
    """
    if system.family != "linear-saddle":
        raise ValueError("flow-box quotient is defined for the linear-saddle family")
    entry = CrossSection(p=(0, 1.0, 0), normal=(0, 1.0, 0), e1=(1.0, 0, 0),
                         e2=(0, 0, 1.0), bounds=((-1, 1), (-1, 1)),
                         orientation=-1, T1=0.1, inset_frac=0.0)
    exits = {
        +1: CrossSection(p=(1.0, 0, 0), normal=(1.0, 0, 0), e1=(0, 1.0, 0),
                         e2=(0, 0, 1.0), bounds=((-2, 2), (-2, 2)),
                         orientation=+1, T1=0.1, inset_frac=0.0),
        -1: CrossSection(p=(-1.0, 0, 0), normal=(-1.0, 0, 0), e1=(0, 1.0, 0),
                         e2=(0, 0, 1.0), bounds=((-2, 2), (-2, 2)),
                         orientation=+1, T1=0.1, inset_frac=0.0),
    }
    lam_u = system.p["lam_u"]
    branches = []
    for side in (-1, +1):
        u = side * np.concatenate([
            np.geomspace(1e-6, 0.05, n_grid // 4),
            np.linspace(0.051, 1.0, n_grid // 2),
        ])
        u = np.sort(u)
        t_need = -np.log(np.abs(u).min()) / lam_u + 5.0
        samples, _ = batch_returns(entry, system, np.stack([u, np.full_like(u, z0)], axis=1),
                                   n_returns=1, tol=tol, t_max=t_need,
                                   target=exits[side])
        vals = np.array([np.nan if s is None else s[0].fx[0] for s in samples])
        taus = np.array([np.nan if s is None else s[0].tau for s in samples])
        good = np.isfinite(vals)
        branches.append(InterpBranch(min(u.min(), 0.0) if side < 0 else 0.0,
                                     max(u.max(), 0.0) if side > 0 else 0.0,
                                     u[good], vals[good], taus[good], wing=side))
    return QuotientMap1D((-1.0, 1.0), branches, np.array([0.0]),
                         {0.0: (0.0, 0.0)},
                         meta={"kind": "saddle-flowbox",
                               "omega": -system.p["lam_s"] / system.p["lam_u"]})
