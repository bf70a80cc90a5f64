"""Shared regression helpers: linear fits with R^2, log-log and log-linear."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LineFit:
    slope: float
    intercept: float
    r2: float
    n: int

    def predict(self, x):
        return self.intercept + self.slope * np.asarray(x)

    def to_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2, "n": self.n}


def linear_fit(x, y) -> LineFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two points")
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), res, _, _ = np.linalg.lstsq(A, y, rcond=None)
    pred = intercept + slope * x
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LineFit(float(slope), float(intercept), float(r2), int(x.size))


def loglog_fit(x, y) -> LineFit:
    """Fit y = C x^p; returns slope p, intercept log C."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    return linear_fit(np.log(x[keep]), np.log(y[keep]))


def loglinear_fit(x, y) -> LineFit:
    """Fit y = C e^{p x}; returns slope p, intercept log C."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = y > 0
    return linear_fit(x[keep], np.log(y[keep]))
