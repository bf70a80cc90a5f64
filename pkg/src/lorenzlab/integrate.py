"""Adaptive flow and tangent-flow (variational) integration.

Fundamental solutions are stored per bounded time window (default 2 flow
units) and reset to the identity at window boundaries, so stored matrices
never overflow even when the dominant local rate is large.  Full-orbit
propagators are recovered as ordered products of window matrices.  The trace
of the Jacobian is integrated jointly, giving each window an exact quadrature
partner for the determinant identity det DZ_t = exp(int trace J).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._rk import StepStats, advance_fixed, dp54_stream

TOL_MIN, TOL_MAX = 1e-13, 1e-4


def _check_tol(tol):
    if not (TOL_MIN <= tol <= TOL_MAX):
        raise ValueError(f"tol must lie in [{TOL_MIN}, {TOL_MAX}], got {tol}")


def plain_rhs(system):
    d = system.d

    def rhs(t, y):
        return system.rhs(y.reshape(-1, d)).ravel()

    return rhs


def augmented_rhs(system):
    """RHS for (x, M, q): x' = G(x), M' = J(x) M, q' = trace J(x)."""
    d = system.d
    da = d + d * d + 1

    def rhs(t, y):
        Y = y.reshape(-1, da)
        x = Y[:, :d]
        M = Y[:, d : d + d * d].reshape(-1, d, d)
        J = system.jac(x)
        out = np.empty_like(Y)
        out[:, :d] = system.rhs(x)
        out[:, d : d + d * d] = (J @ M).reshape(-1, d * d)
        out[:, -1] = np.trace(J, axis1=-2, axis2=-1)
        return out.ravel()

    return rhs


def _augment(x, d):
    n = x.shape[0]
    y = np.zeros((n, d + d * d + 1))
    y[:, :d] = x
    y[:, d : d + d * d] = np.eye(d).ravel()
    return y


@dataclass
class OrbitSegment:
    """A time-stamped trajectory with optional windowed fundamental matrices."""

    system: object
    x0: np.ndarray
    times: np.ndarray  # strictly increasing accepted-step grid, times[0] = 0
    states: np.ndarray  # (n, d)
    tol: float
    stats: StepStats
    window: float | None = None
    window_starts: np.ndarray | None = None  # window start times (subset of grid)
    fundamentals: np.ndarray | None = None  # (n, d, d) relative to enclosing window start
    trace_integrals: np.ndarray | None = None  # (n,) int of trace J from window start

    @property
    def has_tangent(self):
        return self.fundamentals is not None

    @property
    def t_final(self):
        return float(self.times[-1])

    def _window_index(self, t):
        # windows are half-open (w_j, w_{j+1}]; t=0 belongs to window 0
        j = int(np.searchsorted(self.window_starts, t, side="left")) - 1
        return max(j, 0)

    def state_at(self, t):
        """Dense state evaluation by short fixed steps from the nearest grid point."""
        if not 0 <= t <= self.t_final + 1e-12:
            raise ValueError("t outside segment")
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), len(self.times) - 1)
        dt = t - self.times[k]
        x = self.states[k]
        if dt == 0:
            return x.copy()
        f = self.system.rhs(x)
        y, _ = advance_fixed(lambda s, y: self.system.rhs(y), self.times[k], x, f, dt, nsub=2)
        return y

    def window_matrix(self, j):
        """Fundamental matrix across window j (from its start to its end)."""
        if not self.has_tangent:
            raise ValueError("segment carries no tangent data")
        w_end = (
            self.window_starts[j + 1] if j + 1 < len(self.window_starts) else self.times[-1]
        )
        k = int(np.searchsorted(self.times, w_end, side="right")) - 1
        return self.fundamentals[k]

    def fundamental_at(self, t):
        """DZ_t(x0) as an ordered product of window matrices (no inversions)."""
        if not self.has_tangent:
            raise ValueError("segment carries no tangent data")
        j = self._window_index(t)
        M = np.eye(self.system.d)
        for i in range(j):
            M = self.window_matrix(i) @ M
        Mp, _ = self._partial(t, j)
        return Mp @ M

    def _partial(self, t, j):
        """Fundamental matrix and trace integral from window-j start to time t."""
        d = self.system.d
        w0 = self.window_starts[j]
        if t == w0:
            return np.eye(d), 0.0
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        if self.times[k] < w0:
            k = int(np.searchsorted(self.times, w0, side="left"))
        dt = t - self.times[k]
        M = self.fundamentals[k]
        q = self.trace_integrals[k]
        if abs(dt) < 1e-15:
            return M.copy(), float(q)
        y = np.concatenate([self.states[k], M.ravel(), [q]])[None, :]
        rhs = augmented_rhs(self.system)
        y1, _ = advance_fixed(rhs, self.times[k], y.ravel(), rhs(0.0, y.ravel()), dt, nsub=2)
        y1 = y1.reshape(-1)
        return y1[d : d + d * d].reshape(d, d), float(y1[-1])

    def propagator(self, t_from, t_to):
        """DZ matrix from Z_{t_from}(x0) to Z_{t_to}(x0).

        t_from must be a window start so the result is a clean product of
        stored matrices (no ill-conditioned inversions).
        """
        if t_from not in self.window_starts and not np.any(
            np.isclose(self.window_starts, t_from)
        ):
            raise ValueError("t_from must be a window boundary")
        if t_to < t_from:
            raise ValueError("t_to < t_from")
        j0 = self._window_index(t_from + 1e-15)
        jt = self._window_index(t_to)
        M = np.eye(self.system.d)
        for i in range(j0, jt):
            M = self.window_matrix(i) @ M
        Mp, _ = self._partial(t_to, jt)
        return Mp @ M

    def liouville_residual(self):
        """Max relative mismatch of det(fundamental) vs exp(trace integral)."""
        if not self.has_tangent:
            raise ValueError("segment carries no tangent data")
        det = np.linalg.det(self.fundamentals)
        ref = np.exp(self.trace_integrals)
        return float(np.max(np.abs(det - ref) / ref))


def integrate(system, x0, t_final, tol=1e-10, with_tangent=False, window=2.0, max_step=np.inf):
    """Integrate the flow (and optionally the variational equations) to t_final.

    Returns an OrbitSegment sampled on the accepted-step grid.  Window
    boundaries are forced onto the grid; tangent matrices restart from the
    identity there.
    """
    _check_tol(tol)
    if t_final < 0:
        raise ValueError("t_final must be >= 0")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.d,):
        raise ValueError("x0 dimension mismatch")
    d = system.d
    stats = StepStats(tol=tol)

    if t_final == 0:
        fund = np.eye(d)[None] if with_tangent else None
        tr = np.zeros(1) if with_tangent else None
        return OrbitSegment(
            system, x0, np.zeros(1), x0[None].copy(), tol, stats,
            window=window if with_tangent else None,
            window_starts=np.zeros(1) if with_tangent else None,
            fundamentals=fund, trace_integrals=tr,
        )

    times = [0.0]
    if with_tangent:
        rhs = augmented_rhs(system)
        y = _augment(x0[None], d).ravel()
        states = [x0.copy()]
        funds = [np.eye(d)]
        traces = [0.0]
    else:
        rhs = plain_rhs(system)
        y = x0.copy()
        states = [x0.copy()]
        funds = traces = None

    n_windows = max(1, math.ceil(t_final / window - 1e-12)) if with_tangent else 1
    bounds = np.minimum(np.arange(1, n_windows + 1) * window, t_final) if with_tangent else [t_final]
    window_starts = [0.0]

    def cb(t0, y0, f0, t1, y1, f1):
        times.append(t1)
        if with_tangent:
            Y = y1.reshape(-1)
            states.append(Y[:d].copy())
            funds.append(Y[d : d + d * d].reshape(d, d).copy())
            traces.append(float(Y[-1]))
        else:
            states.append(y1.copy())

    t = 0.0
    for w_end in bounds:
        t, y, _ = dp54_stream(rhs, t, y, w_end, rtol=tol, atol=tol,
                              max_step=max_step, callback=cb, stats=stats)
        if with_tangent and w_end < t_final:
            Y = y.reshape(-1)
            Y[d : d + d * d] = np.eye(d).ravel()
            Y[-1] = 0.0
            y = Y
            window_starts.append(float(w_end))

    return OrbitSegment(
        system,
        x0,
        np.asarray(times),
        np.asarray(states),
        tol,
        stats,
        window=window if with_tangent else None,
        window_starts=np.asarray(window_starts) if with_tangent else None,
        fundamentals=np.asarray(funds) if with_tangent else None,
        trace_integrals=np.asarray(traces) if with_tangent else None,
    )


@dataclass
class WindowEnsemble:
    """Window-boundary states and per-window propagators for a trajectory batch."""

    system: object
    window: float
    tol: float
    states: np.ndarray  # (n, m+1, d) states at window boundaries
    propagators: np.ndarray  # (n, m, d, d)
    trace_integrals: np.ndarray  # (n, m)
    stats: StepStats

    @property
    def n_orbits(self):
        return self.states.shape[0]

    @property
    def n_windows(self):
        return self.propagators.shape[1]

    @property
    def boundary_times(self):
        return np.arange(self.n_windows + 1) * self.window

    def propagator_range(self, i, j0, j1):
        """Product propagator for orbit i across windows [j0, j1)."""
        M = np.eye(self.system.d)
        for j in range(j0, j1):
            M = self.propagators[i, j] @ M
        return M


def integrate_windows(system, x0s, n_windows, window=2.0, tol=1e-8):
    """Batched tangent integration over n_windows consecutive windows.

    Step control is shared across the batch; per-window fundamental matrices
    restart from the identity so no entry overflows.
    """
    _check_tol(tol)
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    n, d = x0s.shape
    if d != system.d:
        raise ValueError("dimension mismatch")
    rhs = augmented_rhs(system)
    stats = StepStats(tol=tol)
    states = np.empty((n, n_windows + 1, d))
    props = np.empty((n, n_windows, d, d))
    traces = np.empty((n, n_windows))
    states[:, 0] = x0s
    x = x0s
    t = 0.0
    for j in range(n_windows):
        y = _augment(x, d).ravel()
        t, y, _ = dp54_stream(rhs, t, y, t + window, rtol=tol, atol=tol, stats=stats)
        Y = y.reshape(n, -1)
        x = Y[:, :d].copy()
        states[:, j + 1] = x
        props[:, j] = Y[:, d : d + d * d].reshape(n, d, d)
        traces[:, j] = Y[:, -1]
    return WindowEnsemble(system, window, tol, states, props, traces, stats)


def flow_map(system, x0s, t, tol=1e-8, max_step=np.inf):
    """Z_t applied to a batch of states (no trajectory storage)."""
    _check_tol(tol)
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    rhs = plain_rhs(system)
    stats = StepStats(tol=tol)
    _, y, _ = dp54_stream(rhs, 0.0, x0s.ravel(), t, rtol=tol, atol=tol,
                          max_step=max_step, stats=stats)
    return y.reshape(x0s.shape)
