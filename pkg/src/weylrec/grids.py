"""Uniform grids on [0, 1] and sampled-function utilities.

All coefficient functions and fields in this package live on a shared
uniform grid with M+1 nodes.  Off-node evaluation goes through cubic
splines and definite integrals through composite Simpson, so every module
sees the same function representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import CubicSpline

MIN_INTERVALS = 16


@dataclass(frozen=True)
class UniformGrid:
    """Uniform partition of [0, 1] with ``m + 1`` nodes."""

    m: int

    def __post_init__(self):
        if self.m < MIN_INTERVALS:
            raise ValueError(f"grid needs at least {MIN_INTERVALS} intervals, got {self.m}")

    @property
    def h(self) -> float:
        return 1.0 / self.m

    @property
    def npoints(self) -> int:
        return self.m + 1

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.m + 1)

    def integrate(self, values: np.ndarray) -> float | complex:
        """Composite-Simpson integral of grid samples over [0, 1]."""
        return simpson(values, dx=self.h, axis=-1)

    def mean(self, values: np.ndarray):
        return self.integrate(values)

    def antiderivative(self, values: np.ndarray) -> np.ndarray:
        """Cumulative integral from 0, sampled back onto the grid."""
        return spline(self, values).antiderivative()(self.x)

    def l2_norm(self, values: np.ndarray) -> float:
        return float(np.sqrt(self.integrate(np.abs(values) ** 2).real))

    def rel_l2_error(self, approx: np.ndarray, exact: np.ndarray) -> float:
        denom = self.l2_norm(exact)
        if denom == 0.0:
            return self.l2_norm(approx)
        return self.l2_norm(np.asarray(approx) - np.asarray(exact)) / denom


def spline(grid: UniformGrid, values: np.ndarray) -> CubicSpline:
    return CubicSpline(grid.x, values, axis=-1)


def spline_derivative(grid: UniformGrid, values: np.ndarray, order: int = 1) -> np.ndarray:
    """Grid samples of the order-th derivative via cubic-spline differentiation."""
    return spline(grid, values).derivative(order)(grid.x)


# --- tiny token language for reproducible analytic coefficients ------------
#
# A coefficient is a list of term dicts, summed:
#   {"fn": "const", "c": 0.3}
#   {"fn": "sin",  "a": 0.2, "freq": 1}      -> 0.2 * sin(1 * pi * x)
#   {"fn": "cos",  "a": 0.4, "freq": 2}      -> 0.4 * cos(2 * pi * x)
#   {"fn": "poly", "coeffs": [c0, c1, ...]}  -> c0 + c1*x + ...
# Frequencies are rational multiples of pi, given as a number or [num, den].


def _freq(term) -> float:
    f = term.get("freq", 1)
    if isinstance(f, (list, tuple)):
        num, den = f
        return float(num) / float(den)
    return float(f)


def eval_tokens(tokens, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for term in tokens:
        fn = term["fn"]
        if fn == "const":
            out = out + float(term["c"])
        elif fn == "sin":
            out = out + float(term.get("a", 1.0)) * np.sin(_freq(term) * np.pi * x)
        elif fn == "cos":
            out = out + float(term.get("a", 1.0)) * np.cos(_freq(term) * np.pi * x)
        elif fn == "poly":
            out = out + np.polynomial.polynomial.polyval(x, np.asarray(term["coeffs"], dtype=float))
        else:
            raise ValueError(f"unknown coefficient token {fn!r}")
    return out
