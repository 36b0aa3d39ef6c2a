"""Model parameters, payoffs and the characteristic roots of the discounted GBM generator.

The state follows dX = mu X dt + sigma X dW on (0, inf) and payoffs are discounted
at rate r. Power functions x**z solve (sigma^2/2) x^2 f'' + mu x f' - r f = 0 exactly
when z is a root of (sigma^2/2) z (z - 1) + mu z - r = 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import (
    DriftNotBelowRate,
    InvalidGame,
    InvalidPayoff,
    NegativeRate,
    NonPositiveSigma,
    ZeroRate,
)

PayoffKind = Literal["call", "put", "zero"]


@dataclass(frozen=True)
class ModelParams:
    mu: float
    sigma: float
    r: float

    @property
    def log_drift(self) -> float:
        """Drift of log X per unit time."""
        return self.mu - 0.5 * self.sigma**2


@dataclass(frozen=True)
class Roots:
    gamma: float
    eta: float


@dataclass(frozen=True)
class Payoff:
    kind: PayoffKind
    strike: float | None = None

    def __post_init__(self):
        if self.kind not in ("call", "put", "zero"):
            raise InvalidPayoff(f"unknown payoff kind {self.kind!r}")
        if self.kind == "zero":
            if self.strike is not None:
                raise InvalidPayoff("zero payoff takes no strike")
        elif self.strike is None or not math.isfinite(self.strike) or self.strike <= 0:
            raise InvalidPayoff(f"{self.kind} payoff needs a positive strike")

    def __call__(self, x):
        return payoff_eval(self, x)

    def derivative(self, x):
        """Right derivative in x."""
        x = np.asarray(x, dtype=float)
        if self.kind == "call":
            return np.where(x >= self.strike, 1.0, 0.0)
        if self.kind == "put":
            return np.where(x < self.strike, -1.0, 0.0)
        return np.zeros_like(x)

    @classmethod
    def call(cls, strike: float) -> "Payoff":
        return cls("call", float(strike))

    @classmethod
    def put(cls, strike: float) -> "Payoff":
        return cls("put", float(strike))

    @classmethod
    def zero(cls) -> "Payoff":
        return cls("zero")


@dataclass(frozen=True)
class PlayerSpec:
    g: Payoff
    h: Payoff
    p: float


@dataclass(frozen=True)
class GameSpec:
    params: ModelParams
    x0: float
    player1: PlayerSpec
    player2: PlayerSpec

    def __post_init__(self):
        if not (math.isfinite(self.x0) and self.x0 > 0):
            raise InvalidGame("x0 must be a positive number")
        for i, pl in ((1, self.player1), (2, self.player2)):
            if not (0.0 < pl.p <= 1.0):
                raise InvalidGame(f"p{i} must lie in (0, 1]")
            if not dominates(pl.g, pl.h):
                raise InvalidGame(f"player {i}: g must dominate h pointwise")
        if min(self.player1.p, self.player2.p) >= 1.0:
            raise InvalidGame("p1 and p2 cannot both equal 1")

    def player(self, i: int) -> PlayerSpec:
        if i == 1:
            return self.player1
        if i == 2:
            return self.player2
        raise ValueError("player must be 1 or 2")

    @property
    def p1(self) -> float:
        return self.player1.p

    @property
    def p2(self) -> float:
        return self.player2.p

    @property
    def symmetric(self) -> bool:
        return self.player1.g == self.player2.g and self.player1.h == self.player2.h

    def require_ordered(self) -> None:
        """Solvers assume the less likely competitor belongs to player 1."""
        if self.p1 > self.p2:
            raise InvalidGame("solver paths require p1 <= p2")


def validate(mu: float, sigma: float, r: float) -> ModelParams:
    mu, sigma, r = float(mu), float(sigma), float(r)
    if not all(math.isfinite(v) for v in (mu, sigma, r)):
        raise NonPositiveSigma("parameters must be finite")
    if sigma <= 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    if r < 0:
        raise NegativeRate(f"r must be nonnegative, got {r}")
    if mu >= r:
        raise DriftNotBelowRate(f"need mu < r, got mu={mu}, r={r}")
    if r == 0:
        raise ZeroRate("r = 0 is not supported by the closed-form solvers")
    return ModelParams(mu, sigma, r)


def characteristic_roots(params: ModelParams) -> Roots:
    """Roots of (sigma^2/2) z^2 + (mu - sigma^2/2) z - r, solved without cancellation."""
    a = 0.5 * params.sigma**2
    b = params.mu - a
    c = -params.r
    disc = math.sqrt(b * b - 4.0 * a * c)
    sign = 1.0 if b >= 0 else -1.0
    q = -0.5 * (b + sign * disc)
    z1, z2 = q / a, c / q
    return Roots(gamma=max(z1, z2), eta=min(z1, z2))


def characteristic_residual(params: ModelParams, z: float) -> float:
    return 0.5 * params.sigma**2 * z * (z - 1.0) + params.mu * z - params.r


def payoff_eval(p: Payoff, x):
    x = np.asarray(x, dtype=float)
    if p.kind == "call":
        out = np.maximum(x - p.strike, 0.0)
    elif p.kind == "put":
        out = np.maximum(p.strike - x, 0.0)
    else:
        out = np.zeros_like(x)
    return out if out.ndim else float(out)


def dominates(g: Payoff, h: Payoff) -> bool:
    """Whether g >= h on (0, inf)."""
    if h.kind == "zero":
        return True
    if g.kind == h.kind == "call":
        return g.strike <= h.strike
    if g.kind == h.kind == "put":
        return g.strike >= h.strike
    return False
