"""Independent numerical oracles used by the test suite.

Everything here is deliberately primitive (fixed-step RK4, central
differences, brute-force enumeration) and shares no code paths with the
package implementations it checks.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def fd_jacobian(rhs, x, h=1e-6):
    """Central finite-difference Jacobian of rhs at x."""
    x = np.asarray(x, dtype=float)
    d = len(x)
    J = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, j] = (rhs(x + e) - rhs(x - e)) / (2 * h)
    return J


def rk4_step(rhs, x, h):
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * h * k1)
    k3 = rhs(x + 0.5 * h * k2)
    k4 = rhs(x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_orbit(rhs, x0, t_final, h=1e-3):
    n = int(round(t_final / h))
    x = np.asarray(x0, dtype=float).copy()
    for _ in range(n):
        x = rk4_step(rhs, x, h)
    return x


def lyapunov_spectrum_qr(system, x0, t_total=400.0, dt=0.02, transient=30.0):
    """Fixed-step RK4 + Gram-Schmidt Lyapunov spectrum (Benettin method)."""
    d = system.d

    def joint_step(x, Q, h):
        xn = rk4_step(system.rhs, x, h)
        # tangent advanced with the frozen-at-midpoint Jacobian RK4
        def tangent_rhs(M, xs):
            return system.jac(xs) @ M

        k1 = tangent_rhs(Q, x)
        xm = rk4_step(system.rhs, x, h / 2)
        k2 = tangent_rhs(Q + 0.5 * h * k1, xm)
        k3 = tangent_rhs(Q + 0.5 * h * k2, xm)
        k4 = tangent_rhs(Q + h * k3, xn)
        return xn, Q + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    x = rk4_orbit(system.rhs, x0, transient, h=dt)
    Q = np.eye(d)
    sums = np.zeros(d)
    n = int(round(t_total / dt))
    for _ in range(n):
        x, Q = joint_step(x, Q, dt)
        Q, R = np.linalg.qr(Q)
        sums += np.log(np.abs(np.diag(R)))
    return sums / t_total


def doubling_inducing_enumeration(n_max):
    """Exact inducing-scheme cascade for x -> 2x mod 1 on Y = [0, 1/2).

    Returns {rho: total length} by exact symbolic iteration of dyadic
    intervals with Fraction endpoints.
    """
    Y = (Fraction(0), Fraction(1, 2))
    out: dict[int, Fraction] = {}
    # queue of intervals (a, b) inside Y together with current iterate image
    queue = [(Y[0], Y[1], Y[0], Y[1], 0)]  # (a, b, image_a, image_b, n)
    while queue:
        a, b, ia, ib, n = queue.pop()
        if n >= n_max:
            continue
        # split image at 1/2 (the branch boundary) before applying the map
        cuts = [ia, ib]
        if ia < Fraction(1, 2) < ib:
            cuts = [ia, Fraction(1, 2), ib]
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            la = a + (lo - ia) * (b - a) / (ib - ia)
            lb = a + (hi - ia) * (b - a) / (ib - ia)
            im_lo = (2 * lo) % 1
            im_hi = im_lo + 2 * (hi - lo)
            m = n + 1
            if im_lo <= Y[0] and im_hi >= Y[1]:
                # full cover of Y: monotone preimage of Y joins the partition
                frac_lo = (Y[0] - im_lo) / (im_hi - im_lo)
                frac_hi = (Y[1] - im_lo) / (im_hi - im_lo)
                pa = la + frac_lo * (lb - la)
                pb = la + frac_hi * (lb - la)
                out[m] = out.get(m, Fraction(0)) + (pb - pa)
                if pa > la:
                    queue.append((la, pa, im_lo, Y[0], m))
                if pb < lb:
                    queue.append((pb, lb, Y[1], im_hi, m))
            else:
                queue.append((la, lb, im_lo, im_hi, m))
    return out


def autocov_direct(x, max_lag):
    """Plain O(n * max_lag) autocovariance (biased normalization)."""
    x = np.asarray(x, dtype=float)
    x = x - x.mean()
    n = len(x)
    return np.array([np.dot(x[: n - k], x[k:]) / n for k in range(max_lag + 1)])
