"""Equilibrium stopping boundaries and equilibrium value functions.

A boundary b maps the state to a belief level in [0, 1]: it equals 1 up to the
touch point a, where stopping first pays as much as being forestalled, and 0 from
the single-player threshold b_g on. Three constructions are provided:

* martingale: b = (V^g - g) / (V^g - V^h), when V^h is a martingale wherever it
  matters (the h-threshold lies above b_g);
* ode: b = 1 - exp(-int_x^{b_g} (1 - gamma + K gamma / y) / (y - K - V^h(y)) dy),
  tabulated from quadrature;
* asym: the martingale formula on player 1's data, paired with player 2 values
  obtained from the same boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Literal

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import brentq

from .errors import (
    InclusionViolated,
    InvalidPayoff,
    NoRoot,
    OrderingViolated,
    OutOfRange,
    QuadratureFailure,
)
from .model import ModelParams, Payoff, Roots, characteristic_roots, payoff_eval
from .single import ValueFunction, call_value, value_at

BoundaryMode = Literal["martingale", "ode", "asym"]

TABLE_SIZE = 2048
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)
_GL_NODES_LO, _GL_WEIGHTS_LO = np.polynomial.legendre.leggauss(12)


@dataclass(frozen=True)
class Boundary:
    """Belief boundary x -> b(x), equal to 1 on (0, touch_a] and 0 on [upper_bg, inf)."""

    mode: BoundaryMode
    touch_a: float
    upper_bg: float
    evaluator: Callable = field(repr=False)
    # left end of the interior representation (touch_a for closed forms)
    interior_start: float = field(default=float("nan"), repr=False)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        lo = self.touch_a if math.isnan(self.interior_start) else self.interior_start
        inside = (x > lo) & (x < self.upper_bg)
        xs = np.where(inside, x, 0.5 * (lo + self.upper_bg))
        val = np.clip(self.evaluator(xs), 0.0, 1.0)
        out = np.where(x >= self.upper_bg, 0.0, np.where(inside, val, 1.0))
        return out if out.ndim else float(out)

    def inverse(self, p):
        return boundary_inverse(self, p)


def _check_call(g: Payoff) -> None:
    if g.kind != "call":
        raise InvalidPayoff("equilibrium boundaries are built for call payoffs g")


def _closed_form_evaluator(Vg: ValueFunction, Vh: ValueFunction, g: Payoff):
    def evaluate(x):
        vg = value_at(Vg, x)
        vh = value_at(Vh, x)
        return (vg - payoff_eval(g, x)) / (vg - vh)

    return evaluate


def _check_inclusion(Vg: ValueFunction, Vh: ValueFunction, g: Payoff) -> None:
    _check_call(g)
    h = Vh.payoff
    if h.kind == "zero":
        return
    if h.kind != "call":
        raise InclusionViolated("h must be a call or zero payoff")
    if Vh.threshold <= Vg.threshold or h.strike <= g.strike:
        raise InclusionViolated(
            f"h-threshold {Vh.threshold:.6g} must exceed g-threshold {Vg.threshold:.6g}"
        )


def find_touch_point(g: Payoff, Vh: ValueFunction, bracket: tuple[float, float] | None = None) -> float:
    """Point a in [K, b_g] where V^h(a) = g(a); K itself when h is zero."""
    _check_call(g)
    if Vh.payoff.kind == "zero":
        return g.strike
    if bracket is None:
        gamma = Vh.roots.gamma
        bracket = (g.strike, gamma * g.strike / (gamma - 1.0))
    lo, hi = bracket

    def gap(x):
        return value_at(Vh, x) - payoff_eval(g, x)

    f_lo, f_hi = gap(lo), gap(hi)
    if f_lo * f_hi > 0:
        raise NoRoot(f"V^h - g does not change sign on [{lo}, {hi}]")
    if f_lo == 0:
        return float(lo)
    if f_hi == 0:
        return float(hi)
    return float(brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


def martingale_boundary(Vg: ValueFunction, Vh: ValueFunction, g: Payoff) -> Boundary:
    _check_inclusion(Vg, Vh, g)
    a = find_touch_point(g, Vh)
    return Boundary("martingale", a, Vg.threshold, _closed_form_evaluator(Vg, Vh, g))


def asym_boundary(
    Vg1: ValueFunction,
    Vh1: ValueFunction,
    g1: Payoff,
    Vg2: ValueFunction | None = None,
    Vh2: ValueFunction | None = None,
    g2: Payoff | None = None,
) -> Boundary:
    """Player 1's boundary for the asymmetric call game.

    When player 2's data is supplied the ordering a_2 < a_1 < b_{g_2} and K_2 <= K_1
    are checked.
    """
    _check_inclusion(Vg1, Vh1, g1)
    a1 = find_touch_point(g1, Vh1)
    if Vg2 is not None and Vh2 is not None and g2 is not None:
        _check_inclusion(Vg2, Vh2, g2)
        a2 = find_touch_point(g2, Vh2)
        if g2.strike > g1.strike:
            raise OrderingViolated("need K_2 <= K_1")
        if not (a2 < a1 < Vg2.threshold):
            raise OrderingViolated(
                f"need a_2 < a_1 < b_g2, got a_2={a2:.6g}, a_1={a1:.6g}, b_g2={Vg2.threshold:.6g}"
            )
    return Boundary("asym", a1, Vg1.threshold, _closed_form_evaluator(Vg1, Vh1, g1))


def _ode_integrand(y, K, gamma, Vh):
    return (1.0 - gamma + K * gamma / y) / (y - K - value_at(Vh, y))


def _panel_integrals(nodes, f):
    """Integral of f over each panel [nodes[i], nodes[i+1]] by two Gauss rules."""
    lo, hi = nodes[:-1, None], nodes[1:, None]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    fine = (f(mid + half * _GL_NODES) * _GL_WEIGHTS).sum(axis=1) * half[:, 0]
    coarse = (f(mid + half * _GL_NODES_LO) * _GL_WEIGHTS_LO).sum(axis=1) * half[:, 0]
    return fine, np.abs(fine - coarse)


def ode_table_nodes(a: float, b_g: float, size: int = TABLE_SIZE) -> np.ndarray:
    """Table abscissae: geometric in the distance to a, then uniform up to b_g."""
    width = b_g - a
    delta = 1e-6 * width
    n_geo = size // 2
    geo = a + np.geomspace(delta, 0.25 * width, n_geo)
    uni = np.linspace(a + 0.25 * width, b_g, size - n_geo + 1)[1:]
    return np.concatenate([geo, uni])


def ode_boundary(params: ModelParams, K: float, Vh: ValueFunction, size: int = TABLE_SIZE) -> Boundary:
    """Boundary solving the reflection ODE for call g with strike K and consolation Vh."""
    g = Payoff.call(K)
    gamma = characteristic_roots(params).gamma
    b_g = gamma * K / (gamma - 1.0)
    if Vh.payoff.kind == "call" and Vh.payoff.strike <= K:
        raise InvalidPayoff("h must lie strictly below g above the strike")
    if Vh.payoff.kind == "put":
        raise InvalidPayoff("h must be a call or zero payoff")
    a = find_touch_point(g, Vh, (K, b_g))
    nodes = ode_table_nodes(a, b_g, size)
    dense = np.linspace(nodes[0], b_g, 4001)
    if np.any(dense - K - value_at(Vh, dense) <= 0):
        raise QuadratureFailure("g - V^h must stay positive on (a, b_g]")

    def f(y):
        return _ode_integrand(y, K, gamma, Vh)

    with np.errstate(all="raise"):
        try:
            panels, err = _panel_integrals(nodes, f)
        except FloatingPointError as exc:
            raise QuadratureFailure(str(exc)) from exc
    # integral from each node up to b_g
    tail = np.concatenate([np.cumsum(panels[::-1])[::-1], [0.0]])
    tail_err = np.concatenate([np.cumsum(err[::-1])[::-1], [0.0]])
    if not np.all(np.isfinite(tail)) or tail_err[0] > 1e-8:
        raise QuadratureFailure(f"quadrature error estimate {tail_err[0]:.2e} too large")
    survival = np.exp(-tail)
    values = 1.0 - survival
    slopes = -survival * f(nodes)
    spline = CubicHermiteSpline(nodes, values, slopes, extrapolate=False)
    return Boundary("ode", a, b_g, spline, interior_start=float(nodes[0]))


def boundary_derivative_exact(b: Boundary, params: ModelParams, K: float, Vh: ValueFunction, x):
    """b'(x) = -(1 - b(x)) * integrand(x) for the ode boundary."""
    gamma = characteristic_roots(params).gamma
    return -(1.0 - b(x)) * _ode_integrand(np.asarray(x, dtype=float), K, gamma, Vh)


def boundary_inverse(b: Boundary, p, xtol: float = 1e-10):
    """x in (touch_a, upper_bg) with b(x) = p, by vectorised bisection.

    Bisection continues until the bracket stops shrinking, so the result is
    accurate to rounding even though xtol is the advertised tolerance.
    """
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise OutOfRange("p must lie in (0, 1)")
    lo = np.full(p.shape, b.touch_a)
    hi = np.full(p.shape, b.upper_bg)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.all((mid <= lo) | (mid >= hi)):
            break
        above = b(mid) > p
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    out = 0.5 * (lo + hi)
    return out if out.ndim else float(out)


def ode_residual(b: Boundary, g: Payoff, roots: Roots, Vh: ValueFunction, x) -> np.ndarray:
    """Absolute residual of (1-b)(g/psi)' psi + (g - V^h) b' = 0 with a 5-point b'."""
    x = np.asarray(x, dtype=float)
    gamma, K = roots.gamma, g.strike
    step = 1e-5 * (b.upper_bg - b.touch_a)
    centre = (-b(x + 2 * step) + 8 * b(x + step) - 8 * b(x - step) + b(x - 2 * step)) / (12 * step)
    # one-sided (backward) stencil when the forward points leave the interior
    back = (25 * b(x) - 48 * b(x - step) + 36 * b(x - 2 * step) - 16 * b(x - 3 * step) + 3 * b(x - 4 * step)) / (
        12 * step
    )
    fwd = (-25 * b(x) + 48 * b(x + step) - 36 * b(x + 2 * step) + 16 * b(x + 3 * step) - 3 * b(x + 4 * step)) / (
        12 * step
    )
    lo = b.touch_a if math.isnan(b.interior_start) else b.interior_start
    db = np.where(x + 2 * step >= b.upper_bg, back, np.where(x - 2 * step <= lo, fwd, centre))
    ratio_slope = 1.0 - gamma + K * gamma / x  # (g/psi)' psi for a call, above K
    res = (1.0 - b(x)) * ratio_slope + (payoff_eval(g, x) - value_at(Vh, x)) * db
    return np.abs(res)


@dataclass(frozen=True)
class EquilibriumValues:
    """Equilibrium values u1(x, p1) and u2(x, p1) for one construction.

    Player 2's data (g2, Vg2, Vh2) equals player 1's in the symmetric modes.
    u1_scale multiplies u1 and exists only to build deliberately wrong inputs.
    """

    mode: BoundaryMode
    boundary: Boundary
    roots: Roots
    g1: Payoff
    Vg1: ValueFunction
    Vh1: ValueFunction
    g2: Payoff
    Vg2: ValueFunction
    Vh2: ValueFunction
    u1_scale: float = 1.0

    def coefficient_c(self, p, payoff: Payoff | None = None):
        """c(p) = g(b^-1(p)) / psi(b^-1(p)); player 1's payoff unless another is given."""
        payoff = self.g1 if payoff is None else payoff
        p = np.asarray(p, dtype=float)
        inner = np.clip(p, 0.5e-300, 1.0 - 1e-16)
        y = np.where(p <= 0, self.boundary.upper_bg,
                     np.where(p >= 1, self.boundary.touch_a, boundary_inverse(self.boundary, inner)))
        return payoff_eval(payoff, y) * np.power(y, -self.roots.gamma)

    def _c_branch(self, x, p, payoff):
        """c(p) psi(x) where 0 < p <= b(x); evaluated only on those entries."""
        out = np.zeros(np.broadcast(x, p).shape)
        x, p = np.broadcast_arrays(x, p)
        mask = (p > 0) & (p < 1)
        if np.any(mask):
            out[mask] = self.coefficient_c(p[mask], payoff) * np.power(x[mask], self.roots.gamma)
        edge = p >= 1  # b(x) = 1 only for x <= a, where the branch reduces to g(a)-scaling
        if np.any(edge):
            a = self.boundary.touch_a
            out[edge] = payoff_eval(payoff, a) * (x[edge] / a) ** self.roots.gamma
        return out

    def u1(self, x, p):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        if self.mode in ("martingale", "asym"):
            out = (1.0 - p) * value_at(self.Vg1, x) + p * value_at(self.Vh1, x)
        else:
            out = self._piecewise(x, p, self.g1, self.Vg1, player=1)
        out = self.u1_scale * out
        return out if out.ndim else float(out)

    def u2(self, x, p):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        if self.mode == "martingale":
            u1 = (1.0 - p) * value_at(self.Vg1, x) + p * value_at(self.Vh1, x)
            out = np.maximum(u1, payoff_eval(self.g2, x))
        else:
            out = self._piecewise(x, p, self.g2, self.Vg2, player=2)
        return out if out.ndim else float(out)

    def _piecewise(self, x, p, g, Vg, player):
        x, p = np.broadcast_arrays(x, p)
        bx = np.asarray(self.boundary(x))
        zero = p <= 0
        above = (p > bx) & ~zero
        cont = ~zero & ~above
        out = np.empty(x.shape)
        out[zero] = value_at(Vg, x[zero])
        if player == 1:
            one_minus_b = 1.0 - bx[above]
            out[above] = ((1.0 - p[above]) * payoff_eval(g, x[above])
                          + (p[above] - bx[above]) * value_at(self.Vh1, x[above])) / one_minus_b
        else:
            out[above] = payoff_eval(g, x[above])
        out[cont] = self._c_branch(x[cont], p[cont], g)
        return out

    def du2_dp1(self, x, p, step: float = 1e-6):
        """Derivative in p1 of player 2's continuation branch c(p) psi(x).

        On the boundary the branch of u2 used as p1 decreases is the continuation
        one, so the derivative is taken there rather than across the kink.
        """
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        c = lambda q: self.coefficient_c(q, self.g2)  # noqa: E731
        central = (p - step > 0) & (p + step < 1)
        pc = np.where(central, p, 0.5)
        cp = (c(pc + step) - c(pc - step)) / (2 * step)
        if not np.all(central):
            # one-sided second-order stencil pointing into (0, 1)
            sgn = np.where(p - step <= 0, 1.0, -1.0)
            one = sgn * (-3 * c(p) + 4 * c(p + sgn * step) - c(p + 2 * sgn * step)) / (2 * step)
            cp = np.where(central, cp, one)
        out = cp * np.power(x, self.roots.gamma)
        return out if out.ndim else float(out)

    def du2_dp1_richardson(self, x, p, step: float = 1e-4):
        """Richardson-extrapolated derivative from steps h and h/2, used as a check."""
        coarse = self.du2_dp1(x, p, step)
        fine = self.du2_dp1(x, p, 0.5 * step)
        return fine + (fine - coarse) / 3.0

    def perturbed(self, factor: float) -> "EquilibriumValues":
        return replace(self, u1_scale=self.u1_scale * factor)


def values_martingale(Vg: ValueFunction, Vh: ValueFunction, g: Payoff, boundary: Boundary | None = None) -> EquilibriumValues:
    b = martingale_boundary(Vg, Vh, g) if boundary is None else boundary
    return EquilibriumValues("martingale", b, Vg.roots, g, Vg, Vh, g, Vg, Vh)


def values_ode(b: Boundary, g: Payoff, roots: Roots, Vh: ValueFunction, Vg: ValueFunction | None = None) -> EquilibriumValues:
    if b.mode != "ode":
        raise ValueError("values_ode needs an ode-mode boundary")
    if Vg is None:
        gamma = roots.gamma
        b_g = gamma * g.strike / (gamma - 1.0)
        Vg = ValueFunction(g, roots, b_g, (b_g - g.strike) * b_g ** (-gamma), gamma)
    return EquilibriumValues("ode", b, roots, g, Vg, Vh, g, Vg, Vh)


def values_asym(
    b: Boundary,
    Vg1: ValueFunction,
    Vh1: ValueFunction,
    g1: Payoff,
    Vg2: ValueFunction,
    Vh2: ValueFunction,
    g2: Payoff,
) -> EquilibriumValues:
    if b.mode != "asym":
        raise ValueError("values_asym needs an asym-mode boundary")
    return EquilibriumValues("asym", b, Vg1.roots, g1, Vg1, Vh1, g2, Vg2, Vh2)


def solve_symmetric(params: ModelParams, K: float, h: Payoff, mode: BoundaryMode = "martingale") -> EquilibriumValues:
    """Convenience: boundary and values for g = (x - K)^+ and consolation h."""
    from .single import value_function

    Vg = call_value(params, K)
    Vh = value_function(h, params)
    g = Payoff.call(K)
    if mode == "martingale":
        return values_martingale(Vg, Vh, g)
    if mode == "ode":
        return values_ode(ode_boundary(params, K, Vh), g, Vg.roots, Vh, Vg)
    raise ValueError(f"unknown symmetric mode {mode!r}")


def solve_asymmetric(params: ModelParams, K1: float, L1: float, K2: float, L2: float) -> EquilibriumValues:
    """Boundary and values for g_i = (x - K_i)^+, h_i = (x - L_i)^+."""
    Vg1, Vh1 = call_value(params, K1), call_value(params, L1)
    Vg2, Vh2 = call_value(params, K2), call_value(params, L2)
    g1, g2 = Payoff.call(K1), Payoff.call(K2)
    b = asym_boundary(Vg1, Vh1, g1, Vg2, Vh2, g2)
    return values_asym(b, Vg1, Vh1, g1, Vg2, Vh2, g2)
