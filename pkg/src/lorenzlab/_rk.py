"""Embedded Dormand-Prince 5(4) stepper, vectorized over flat state arrays.

One integration engine serves single trajectories, tangent-augmented systems
and trajectory ensembles (caller flattens the batch into one state vector).
Accepted steps are streamed to a callback so crossing detection can run
without retaining the whole trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Dormand-Prince 5(4) tableau (FSAL: stage 7 slope equals the slope at y1).
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_BHAT = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B - _BHAT

MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
SAFETY = 0.9


class StepSizeUnderflow(RuntimeError):
    """Adaptive step collapsed below the resolvable scale (stiff blow-up)."""


class NonFiniteState(RuntimeError):
    """Integration produced a non-finite state."""


@dataclass
class StepStats:
    naccept: int = 0
    nreject: int = 0
    nfev: int = 0
    tol: float = 0.0

    def merge(self, other: "StepStats") -> None:
        self.naccept += other.naccept
        self.nreject += other.nreject
        self.nfev += other.nfev


def dp54_step(rhs, t, y, f, h):
    """One fixed step of size h from (t, y) with slope f = rhs(t, y).

    Returns (y1, f1, err) where err is the embedded 4th/5th order difference
    and f1 the slope at the new point (FSAL stage).
    """
    k = np.empty((7,) + y.shape, dtype=y.dtype)
    k[0] = f
    for i in range(1, 6):
        yi = y + h * np.tensordot(_A[i], k[:i], axes=(0, 0))
        k[i] = rhs(t + _C[i] * h, yi)
    y1 = y + h * np.tensordot(_A[6], k[:6], axes=(0, 0))
    k[6] = rhs(t + h, y1)
    err = h * np.tensordot(_E, k, axes=(0, 0))
    return y1, k[6], err


def advance_fixed(rhs, t, y, f, dt, nsub=2):
    """Advance by dt with nsub equal DP54 steps, no error control.

    Used for event refinement and dense evaluation between accepted steps;
    the substeps keep the local error of the evaluation comparable to the
    accepted-step accuracy.
    """
    h = dt / nsub
    for _ in range(nsub):
        y, f, _ = dp54_step(rhs, t, y, f, h)
        t = t + h
    return y, f


def _error_norm(err, y0, y1, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(rhs, t0, y0, f0, t_end, rtol, atol):
    # standard two-evaluation heuristic (Hairer-Norsett-Wanner I.4)
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * f0
    f1 = rhs(t0 + h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, abs(t_end - t0))


def dp54_stream(
    rhs,
    t0,
    y0,
    t_end,
    rtol,
    atol,
    max_step=np.inf,
    first_step=None,
    callback=None,
    stats=None,
):
    """Adaptive integration from t0 to t_end, streaming accepted steps.

    callback(t, y, f, t1, y1, f1) is invoked after every accepted step; a
    truthy return value stops the integration early.  Returns (t, y, f).
    """
    if stats is None:
        stats = StepStats()
    y = np.asarray(y0, dtype=float).copy()
    f = rhs(t0, y)
    stats.nfev += 1
    t = t0
    span = t_end - t0
    if span <= 0:
        return t, y, f
    if first_step is None:
        h = _initial_step(rhs, t, y, f, t_end, rtol, atol)
        stats.nfev += 1
    else:
        h = min(first_step, span)
    h = min(h, max_step)
    hmin_floor = 16 * np.finfo(float).eps
    while t < t_end:
        h = min(h, t_end - t, max_step)
        if h < hmin_floor * max(abs(t), 1.0):
            raise StepSizeUnderflow(f"step size underflow at t={t:.6g} (h={h:.3g})")
        y1, f1, err = dp54_step(rhs, t, y, f, h)
        stats.nfev += 6
        if not np.all(np.isfinite(y1)):
            if h > 1e3 * hmin_floor * max(abs(t), 1.0):
                # retry smaller before declaring blow-up
                h *= 0.25
                stats.nreject += 1
                continue
            raise NonFiniteState(f"non-finite state at t={t:.6g}")
        norm = _error_norm(err, y, y1, rtol, atol)
        if norm <= 1.0:
            t1 = t + h
            stats.naccept += 1
            stop = callback(t, y, f, t1, y1, f1) if callback is not None else None
            t, y, f = t1, y1, f1
            factor = MAX_FACTOR if norm == 0 else min(MAX_FACTOR, SAFETY * norm ** -0.2)
            h *= factor
            if stop:
                break
        else:
            stats.nreject += 1
            h *= max(MIN_FACTOR, SAFETY * norm ** -0.2)
    return t, y, f


@dataclass
class CubicHermite:
    """Scalar cubic Hermite on one accepted step, for crossing bracketing."""

    t0: float
    t1: float
    g0: float
    g1: float
    dg0: float
    dg1: float

    def __call__(self, t):
        h = self.t1 - self.t0
        s = (t - self.t0) / h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return h00 * self.g0 + h10 * h * self.dg0 + h01 * self.g1 + h11 * h * self.dg1

    def roots(self, n_scan=24):
        """Sign-change brackets of the interpolant on [t0, t1]."""
        ts = np.linspace(self.t0, self.t1, n_scan)
        gs = self(ts)
        out = []
        for i in range(n_scan - 1):
            if gs[i] == 0.0:
                out.append((ts[i], ts[i]))
            elif gs[i] * gs[i + 1] < 0:
                out.append((ts[i], ts[i + 1]))
        return out
