"""Synthetic analytic interval maps used as oracles for the quotient machinery.

All constructors return QuotientMap1D instances backed by exact callables,
so downstream code (inducing schemes, densities, limit laws) can be checked
against closed forms.
"""

from __future__ import annotations

import numpy as np

from .quotient import AnalyticBranch, QuotientMap1D


def doubling_map() -> QuotientMap1D:
    """x -> 2x mod 1 on [0, 1] with the branch cut at 1/2."""
    b1 = AnalyticBranch(0.0, 0.5, lambda x: 2 * x, lambda x: np.full_like(x, 2.0),
                        inv_fn=lambda v: v / 2)
    b2 = AnalyticBranch(0.5, 1.0, lambda x: 2 * x - 1, lambda x: np.full_like(x, 2.0),
                        inv_fn=lambda v: (v + 1) / 2)
    return QuotientMap1D((0.0, 1.0), [b1, b2], np.array([0.5]),
                         {0.5: (1.0, 0.0)}, meta={"kind": "doubling"})


def tent_map() -> QuotientMap1D:
    """x -> 2 min(x, 1-x) on [0, 1]."""
    b1 = AnalyticBranch(0.0, 0.5, lambda x: 2 * x, lambda x: np.full_like(x, 2.0),
                        inv_fn=lambda v: v / 2)
    b2 = AnalyticBranch(0.5, 1.0, lambda x: 2 - 2 * x, lambda x: np.full_like(x, -2.0),
                        inv_fn=lambda v: 1 - v / 2)
    return QuotientMap1D((0.0, 1.0), [b1, b2], np.array([0.5]),
                         {0.5: (1.0, 1.0)}, meta={"kind": "tent"})


def cusp_map(omega=0.5) -> QuotientMap1D:
    """Lorenz-like cusp family x -> sign(x)(2|x|^omega - 1) on [-1, 1].

    Two increasing full branches with a cusp at 0; |Df| = 2 omega |x|^(omega-1),
    odd symmetric; omega in (0, 1).
    """
    if not 0 < omega < 1:
        raise ValueError("omega must lie in (0, 1)")

    def f(x):
        return np.sign(x) * (2 * np.abs(x) ** omega - 1)

    def df(x):
        return 2 * omega * np.abs(x) ** (omega - 1.0)

    bl = AnalyticBranch(-1.0, 0.0, f, df,
                        inv_fn=lambda v: -(((-v + 1) / 2) ** (1 / omega)) if v <= 1 else None)
    br = AnalyticBranch(0.0, 1.0, f, df,
                        inv_fn=lambda v: ((v + 1) / 2) ** (1 / omega))
    return QuotientMap1D((-1.0, 1.0), [bl, br], np.array([0.0]),
                         {0.0: (1.0, -1.0)}, meta={"kind": "cusp", "omega": omega})


def piecewise_linear_map(breakpoints, values) -> QuotientMap1D:
    """Piecewise-linear map from breakpoints [b0..bn] and per-branch endpoint
    value pairs [(v_lo, v_hi), ...]."""
    breakpoints = np.asarray(breakpoints, dtype=float)
    branches = []
    for k, (vl, vh) in enumerate(values):
        a, b = breakpoints[k], breakpoints[k + 1]
        slope = (vh - vl) / (b - a)

        def f(x, a=a, vl=vl, slope=slope):
            return vl + slope * (x - a)

        def df(x, slope=slope):
            return np.full_like(np.asarray(x, dtype=float), slope)

        def inv(v, a=a, vl=vl, slope=slope):
            return a + (v - vl) / slope

        branches.append(AnalyticBranch(a, b, f, df, inv_fn=inv))
    cusps = breakpoints[1:-1]
    limits = {}
    for k, c in enumerate(cusps):
        limits[float(c)] = (values[k][1], values[k + 1][0])
    return QuotientMap1D((float(breakpoints[0]), float(breakpoints[-1])), branches,
                         cusps, limits, meta={"kind": "piecewise-linear"})


def swap_doubling_map() -> QuotientMap1D:
    """Doubling within each half composed with a half swap: one ergodic
    component of cyclic period 2."""
    return piecewise_linear_map(
        [0.0, 0.25, 0.5, 0.75, 1.0],
        [(0.5, 1.0), (0.5, 1.0), (0.0, 0.5), (0.0, 0.5)],
    )


def two_component_map() -> QuotientMap1D:
    """Two invariant sub-intervals, doubling on each: two ergodic components."""
    return piecewise_linear_map(
        [0.0, 0.25, 0.5, 0.75, 1.0],
        [(0.0, 0.5), (0.0, 0.5), (0.5, 1.0), (0.5, 1.0)],
    )
