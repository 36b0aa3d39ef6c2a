"""Single-player perpetual stopping values for call, put and zero payoffs.

For a call (x - K)^+ the optimal rule is to stop at the first hitting of
b_g = gamma K / (gamma - 1) and V(x) = (b_g - K)(x / b_g)^gamma below it. The put
is the mirror image with the negative root eta. A binomial lattice provides an
independent numerical check of both.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientHorizon, ParameterError
from .model import ModelParams, Payoff, Roots, characteristic_roots, payoff_eval


@dataclass(frozen=True)
class ValueFunction:
    """Closed-form value V of stopping the payoff optimally.

    V = coefficient * x**exponent = payoff(threshold) * (x / threshold)**exponent on the
    continuation side of threshold and V = payoff beyond it. Evaluation uses the
    scaled form, which stays finite when the coefficient itself overflows.
    """

    payoff: Payoff
    roots: Roots
    threshold: float
    coefficient: float
    exponent: float

    def __call__(self, x):
        return value_at(self, x)

    def continuation(self, x):
        """Whether x lies strictly on the waiting side of the threshold."""
        x = np.asarray(x, dtype=float)
        if self.payoff.kind == "put":
            return x > self.threshold
        return x < self.threshold

    def derivative(self, x):
        """Analytic derivative (left derivative at the threshold for calls)."""
        x = np.asarray(x, dtype=float)
        inside = self.continuation(x) | (x == self.threshold)
        with np.errstate(over="ignore", divide="ignore"):
            power = self._edge() * self.exponent / self.threshold * np.power(x / self.threshold, self.exponent - 1.0)
        out = np.where(inside, power, self.payoff.derivative(x))
        return out if out.ndim else float(out)

    def _edge(self) -> float:
        return float(payoff_eval(self.payoff, self.threshold)) if math.isfinite(self.threshold) else 0.0


def _coefficient(edge: float, b: float, exponent: float) -> float:
    """edge * b**(-exponent), inf when it overflows (only the scaled form is evaluated)."""
    try:
        return edge * math.exp(-exponent * math.log(b))
    except OverflowError:
        return math.inf


def call_value(params: ModelParams, K: float) -> ValueFunction:
    roots = characteristic_roots(params)
    gamma = roots.gamma
    b = gamma * K / (gamma - 1.0)
    coef = _coefficient(b - K, b, gamma)
    return ValueFunction(Payoff.call(K), roots, b, coef, gamma)


def put_value(params: ModelParams, K: float) -> ValueFunction:
    roots = characteristic_roots(params)
    eta = roots.eta
    b = eta * K / (eta - 1.0)
    coef = _coefficient(K - b, b, eta)
    return ValueFunction(Payoff.put(K), roots, b, coef, eta)


def zero_value(params: ModelParams) -> ValueFunction:
    roots = characteristic_roots(params)
    return ValueFunction(Payoff.zero(), roots, math.inf, 0.0, roots.gamma)


def value_function(payoff: Payoff, params: ModelParams) -> ValueFunction:
    if payoff.kind == "call":
        return call_value(params, payoff.strike)
    if payoff.kind == "put":
        return put_value(params, payoff.strike)
    return zero_value(params)


def value_at(vf: ValueFunction, x):
    x = np.asarray(x, dtype=float)
    if vf.payoff.kind == "zero":
        out = np.zeros_like(x)
    else:
        with np.errstate(over="ignore", divide="ignore"):
            power = vf._edge() * np.power(x / vf.threshold, vf.exponent)
        out = np.where(vf.continuation(x), power, payoff_eval(vf.payoff, x))
    return out if out.ndim else float(out)


def truncation_bound(payoff: Payoff, params: ModelParams, x: float, horizon: float) -> float:
    """Upper bound on the discounted value that can be earned after `horizon`."""
    if payoff.kind == "call":
        return x * math.exp((params.mu - params.r) * horizon)
    if payoff.kind == "put":
        return payoff.strike * math.exp(-params.r * horizon)
    return 0.0


def lattice_oracle(
    payoff: Payoff,
    params: ModelParams,
    x: float,
    steps: int,
    horizon: float,
    tol: float = 1e-6,
) -> float:
    """American value on a drift-matched binomial tree truncated at `horizon`.

    Raises InsufficientHorizon when the value beyond the horizon may exceed
    tol times the natural scale of the payoff (x for calls, K for puts).
    """
    if steps < 100:
        raise ParameterError("lattice needs at least 100 steps")
    if payoff.kind == "zero":
        return 0.0
    scale = x if payoff.kind == "call" else payoff.strike
    bound = truncation_bound(payoff, params, x, horizon)
    if bound > tol * scale:
        raise InsufficientHorizon(
            f"tail bound {bound:.3e} exceeds {tol:.1e} * {scale:.3g}; lengthen the horizon"
        )
    dt = horizon / steps
    step = params.sigma * math.sqrt(dt)
    up, down = math.exp(step), math.exp(-step)
    q = (math.exp(params.mu * dt) - down) / (up - down)
    if not 0.0 < q < 1.0:
        raise ParameterError("lattice step too coarse for the drift; increase steps")
    disc = math.exp(-params.r * dt)
    log_x = math.log(x)

    def layer_payoff(n):
        j = np.arange(n + 1)
        return payoff_eval(payoff, np.exp(log_x + step * (2 * j - n)))

    value = layer_payoff(steps)
    for n in range(steps - 1, -1, -1):
        cont = disc * (q * value[1:] + (1.0 - q) * value[:-1])
        value = np.maximum(cont, layer_payoff(n))
    return float(value[0])
