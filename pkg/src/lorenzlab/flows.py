"""Vector-field families with exact Jacobians, and equilibrium classification.

Builtin families:

* ``classical-lorenz``   sigma(y-x), x(rho-z)-y, xy-beta z
* ``extended-lorenz``    y, -lam*y + gamma*x*(1-z) - delta*x**3, -alpha*z + beta*x**2
* ``linear-saddle``      diagonal linear field with rates (lam_u, lam_s, lam_ss)
* ``user-defined``       polynomial field of degree <= 3 given by coefficient tables

All evaluation methods broadcast over leading axes: states of shape (..., d).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

_FAMILIES = ("classical-lorenz", "extended-lorenz", "linear-saddle", "user-defined")


def _check_state(system, state):
    state = np.asarray(state, dtype=float)
    if state.shape[-1] != system.d:
        raise ValueError(f"state dimension {state.shape[-1]} != system dimension {system.d}")
    if not np.all(np.isfinite(state)):
        raise ValueError("non-finite state")
    return state


@dataclass(frozen=True)
class FlowSystem:
    """A smooth parameterized vector field with exact analytic Jacobian."""

    family: str
    params: tuple  # sorted (name, value) pairs; polynomial tables for user-defined
    d: int = 3

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")

    @property
    def p(self) -> dict:
        return dict(self.params) if self.family != "user-defined" else {}

    # -- right-hand side -------------------------------------------------

    def rhs(self, state):
        state = _check_state(self, state)
        x, y, z = state[..., 0], state[..., 1], state[..., 2]
        if self.family == "classical-lorenz":
            s, r, b = (self.p[k] for k in ("sigma", "rho", "beta"))
            return np.stack([s * (y - x), x * (r - z) - y, x * y - b * z], axis=-1)
        if self.family == "extended-lorenz":
            lam, gam, al, be, de = (self.p[k] for k in ("lam", "gamma", "alpha", "beta", "delta"))
            return np.stack(
                [y, -lam * y + gam * x * (1 - z) - de * x**3, -al * z + be * x**2], axis=-1
            )
        if self.family == "linear-saddle":
            lu, ls, lss = (self.p[k] for k in ("lam_u", "lam_s", "lam_ss"))
            return np.stack([lu * x, ls * y, lss * z], axis=-1)
        return _poly_rhs(self.params, state)

    def jac(self, state):
        state = _check_state(self, state)
        x, y, z = state[..., 0], state[..., 1], state[..., 2]
        zero = np.zeros_like(x)
        one = np.ones_like(x)
        if self.family == "classical-lorenz":
            s, r, b = (self.p[k] for k in ("sigma", "rho", "beta"))
            rows = [
                [-s * one, s * one, zero],
                [r - z, -one, -x],
                [y, x, -b * one],
            ]
        elif self.family == "extended-lorenz":
            lam, gam, al, be, de = (self.p[k] for k in ("lam", "gamma", "alpha", "beta", "delta"))
            rows = [
                [zero, one, zero],
                [gam * (1 - z) - 3 * de * x**2, -lam * one, -gam * x],
                [2 * be * x, zero, -al * one],
            ]
        elif self.family == "linear-saddle":
            lu, ls, lss = (self.p[k] for k in ("lam_u", "lam_s", "lam_ss"))
            rows = [[lu * one, zero, zero], [zero, ls * one, zero], [zero, zero, lss * one]]
        else:
            return _poly_jac(self.params, state)
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    def jac_trace(self, state):
        J = self.jac(state)
        return np.trace(J, axis1=-2, axis2=-1)

    # -- transformations -------------------------------------------------

    def to_polynomial(self) -> "FlowSystem":
        """Equivalent user-defined polynomial field (degree <= 3)."""
        if self.family == "user-defined":
            return self
        tables: list[dict] = [dict() for _ in range(3)]
        if self.family == "classical-lorenz":
            s, r, b = (self.p[k] for k in ("sigma", "rho", "beta"))
            tables[0] = {(0, 1, 0): s, (1, 0, 0): -s}
            tables[1] = {(1, 0, 0): r, (1, 0, 1): -1.0, (0, 1, 0): -1.0}
            tables[2] = {(1, 1, 0): 1.0, (0, 0, 1): -b}
        elif self.family == "extended-lorenz":
            lam, gam, al, be, de = (self.p[k] for k in ("lam", "gamma", "alpha", "beta", "delta"))
            tables[0] = {(0, 1, 0): 1.0}
            tables[1] = {(0, 1, 0): -lam, (1, 0, 0): gam, (1, 0, 1): -gam, (3, 0, 0): -de}
            tables[2] = {(0, 0, 1): -al, (2, 0, 0): be}
        else:
            lu, ls, lss = (self.p[k] for k in ("lam_u", "lam_s", "lam_ss"))
            tables[0] = {(1, 0, 0): lu}
            tables[1] = {(0, 1, 0): ls}
            tables[2] = {(0, 0, 1): lss}
        return polynomial_field(tables)

    def reversed(self) -> "FlowSystem":
        """Time-reversed field (all coefficients negated)."""
        poly = self.to_polynomial()
        tables = [{e: -c for e, c in comp} for comp in poly.params]
        return polynomial_field(tables)


def _poly_rhs(tables, state):
    out = np.zeros(state.shape, dtype=float)
    for i, comp in enumerate(tables):
        acc = np.zeros(state.shape[:-1], dtype=float)
        for exps, c in comp:
            term = np.full(state.shape[:-1], c, dtype=float)
            for ax, e in enumerate(exps):
                if e:
                    term = term * state[..., ax] ** e
            acc += term
        out[..., i] = acc
    return out


def _poly_jac(tables, state):
    d = state.shape[-1]
    out = np.zeros(state.shape[:-1] + (d, d), dtype=float)
    for i, comp in enumerate(tables):
        for exps, c in comp:
            for ax, e in enumerate(exps):
                if e == 0:
                    continue
                term = np.full(state.shape[:-1], c * e, dtype=float)
                for ax2, e2 in enumerate(exps):
                    pw = e2 - 1 if ax2 == ax else e2
                    if pw:
                        term = term * state[..., ax2] ** pw
                out[..., i, ax] += term
    return out


def classical_lorenz(sigma=10.0, rho=28.0, beta=8.0 / 3.0) -> FlowSystem:
    return FlowSystem("classical-lorenz", (("beta", beta), ("rho", rho), ("sigma", sigma)))


def extended_lorenz(lam, gamma, alpha, beta, delta) -> FlowSystem:
    return FlowSystem(
        "extended-lorenz",
        (("alpha", alpha), ("beta", beta), ("delta", delta), ("gamma", gamma), ("lam", lam)),
    )


def linear_saddle(lam_u=1.0, lam_s=-0.5, lam_ss=-2.0) -> FlowSystem:
    return FlowSystem("linear-saddle", (("lam_s", lam_s), ("lam_ss", lam_ss), ("lam_u", lam_u)))


def polynomial_field(tables) -> FlowSystem:
    """User-defined polynomial field from per-component coefficient tables.

    Each table maps monomial exponent tuples to coefficients, e.g.
    ``{(1, 0, 0): -10.0, (0, 1, 0): 10.0}`` for sigma*(y-x) with sigma=10.
    Total degree is limited to 3.
    """
    d = len(tables)
    frozen = []
    for comp in tables:
        items = []
        for exps, c in sorted(comp.items()):
            exps = tuple(int(e) for e in exps)
            if len(exps) != d:
                raise ValueError("exponent tuple length must equal dimension")
            if sum(exps) > 3:
                raise ValueError("polynomial degree must be <= 3")
            items.append((exps, float(c)))
        frozen.append(tuple(items))
    return FlowSystem("user-defined", tuple(frozen), d=d)


def system_from_config(family: str, params: dict) -> FlowSystem:
    if family == "classical-lorenz":
        return classical_lorenz(**params) if params else classical_lorenz()
    if family == "extended-lorenz":
        return extended_lorenz(**params)
    if family == "linear-saddle":
        return linear_saddle(**params) if params else linear_saddle()
    if family == "user-defined":
        tables = [{tuple(int(v) for v in k.split(",")): float(c) for k, c in comp.items()}
                  for comp in params["tables"]]
        return polynomial_field(tables)
    raise ValueError(f"unknown family {family!r}")


# -- operations ------------------------------------------------------------


def eval_rhs(system: FlowSystem, state):
    """G(state) for the family's equations."""
    return system.rhs(state)


def eval_jacobian(system: FlowSystem, state):
    """Exact analytic Jacobian DG(state)."""
    return system.jac(state)


# -- equilibria --------------------------------------------------------------

LORENZ_LIKE = "lorenz-like"
HYPERBOLIC = "hyperbolic-non-lorenz-like"
NON_HYPERBOLIC = "non-hyperbolic"


@dataclass
class EquilibriumReport:
    state: np.ndarray
    eigenvalues: np.ndarray  # sorted by descending real part
    eigenvectors: np.ndarray  # columns matching eigenvalues
    flag: str
    lam_s: float | None = None
    lam_u: float | None = None
    omega: float | None = None

    def to_dict(self):
        return {
            "state": self.state.tolist(),
            "eigenvalues_re": self.eigenvalues.real.tolist(),
            "eigenvalues_im": self.eigenvalues.imag.tolist(),
            "flag": self.flag,
            "lam_s": self.lam_s,
            "lam_u": self.lam_u,
            "omega": self.omega,
        }


def _damped_newton(system, x0, tol, max_iter=80):
    x = np.asarray(x0, dtype=float).copy()
    for _ in range(max_iter):
        g = system.rhs(x)
        gn = np.linalg.norm(g)
        if gn < tol:
            return x, True
        try:
            step = np.linalg.solve(system.jac(x), -g)
        except np.linalg.LinAlgError:
            return x, False
        alpha = 1.0
        while alpha > 2**-30:
            xn = x + alpha * step
            if np.linalg.norm(system.rhs(xn)) <= (1 - 0.5 * alpha) * gn + tol:
                break
            alpha *= 0.5
        else:
            return x, False
        x = x + alpha * step
        if not np.all(np.isfinite(x)):
            return x, False
    return x, np.linalg.norm(system.rhs(x)) < tol


def classify_equilibrium(system: FlowSystem, x: np.ndarray, hyp_tol=1e-9) -> EquilibriumReport:
    """Classify one equilibrium via the spectrum of the Jacobian.

    Lorenz-like means: exactly one eigenvalue with positive real part and,
    restricted to the plane spanned by the unstable direction and the weakest
    stable direction, both eigenvalues are real and satisfy
    -lam_u < lam_s < 0 < lam_u with the remaining spectrum strictly more
    contracting.
    """
    J = system.jac(x)
    eigvals, eigvecs = np.linalg.eig(J)
    order = np.argsort(-eigvals.real)
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    scale = max(1.0, float(np.max(np.abs(eigvals))))
    rep = EquilibriumReport(state=x, eigenvalues=eigvals, eigenvectors=eigvecs, flag=HYPERBOLIC)

    if np.any(np.abs(eigvals.real) < hyp_tol * scale):
        rep.flag = NON_HYPERBOLIC
        return rep

    pos = eigvals[eigvals.real > 0]
    neg = eigvals[eigvals.real < 0]
    if len(pos) == 1 and len(neg) >= 2:
        lam_u_c, lam_s_c = pos[0], neg[np.argmax(neg.real)]
        rest = np.sort(neg.real)[:-1]
        if (
            abs(lam_u_c.imag) <= hyp_tol * scale
            and abs(lam_s_c.imag) <= hyp_tol * scale
            and -lam_u_c.real < lam_s_c.real < 0.0
            and np.all(rest < lam_s_c.real)
        ):
            rep.flag = LORENZ_LIKE
            rep.lam_u = float(lam_u_c.real)
            rep.lam_s = float(lam_s_c.real)
            rep.omega = -rep.lam_s / rep.lam_u
    return rep


def classify_equilibria(
    system: FlowSystem,
    search_box,
    tol=1e-12,
    seeds_per_axis=5,
    dedup=1e-8,
) -> list[EquilibriumReport]:
    """Find and classify all equilibria in a box by damped Newton from a seed grid.

    search_box: sequence of (lo, hi) per coordinate; seeds on a regular grid.
    Non-converged seeds are logged, not fatal.  Roots are deduplicated at
    radius ``dedup``.
    """
    search_box = np.asarray(search_box, dtype=float)
    if search_box.shape != (system.d, 2) or not np.all(np.isfinite(search_box)):
        raise ValueError("search box must be a bounded (d, 2) array")
    axes = [np.linspace(lo, hi, seeds_per_axis) for lo, hi in search_box]
    seeds = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, system.d)
    roots: list[np.ndarray] = []
    n_fail = 0
    pad = 1e-6 * (1 + np.max(np.abs(search_box)))
    for seed in seeds:
        x, ok = _damped_newton(system, seed, tol)
        if not ok:
            n_fail += 1
            continue
        if np.any(x < search_box[:, 0] - pad) or np.any(x > search_box[:, 1] + pad):
            continue
        if all(np.linalg.norm(x - r) > dedup for r in roots):
            roots.append(x)
    if n_fail:
        log.info("classify_equilibria: %d/%d seeds did not converge", n_fail, len(seeds))
    roots.sort(key=lambda r: tuple(np.round(r, 6)))
    return [classify_equilibrium(system, r) for r in roots]
