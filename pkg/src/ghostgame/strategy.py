"""Equilibrium randomized controls, adjusted beliefs and randomized stopping times.

Every control built here increases only when the state sets a new running
maximum, so it is a nondecreasing function of the running maximum S_t = sup X_s.
`LevelControl` stores that function (a tabulated continuous part plus a jump to 1
at a fixed level); `ControlPath` is its realisation on a time grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .boundary import Boundary, EquilibriumValues
from .errors import DenominatorNearZero, FactorOutOfRange, InvalidGame, OutOfRange
from .single import value_at

LEVEL_TABLE_SIZE = 16385
AsymReading = Literal["consistent", "literal"]


@dataclass(frozen=True)
class JumpRecord:
    index: int
    pre: float
    post: float


@dataclass(frozen=True)
class ControlPath:
    times: np.ndarray
    values: np.ndarray
    jump: JumpRecord | None = None

    def __post_init__(self):
        v = self.values
        if v.shape[-1] != self.times.shape[-1]:
            raise ValueError("values and times differ in length")

    def left_values(self) -> np.ndarray:
        """Gamma_{t-} on the grid: 0 at t = 0, the recorded pre-jump value at the
        jump index, and the grid value elsewhere (increases inside a step happen
        strictly before its right end)."""
        left = np.array(self.values, dtype=float, copy=True)
        left[..., 0] = 0.0
        if self.jump is not None and self.jump.index > 0:
            left[..., self.jump.index] = self.jump.pre
        return left


@dataclass(frozen=True)
class BeliefPath:
    times: np.ndarray
    values: np.ndarray


def belief(p: float, gamma):
    """Adjusted belief p (1 - Gamma) / (1 - p Gamma); identically 1 when p = 1."""
    gamma = np.asarray(gamma, dtype=float)
    if p >= 1.0:
        return np.ones_like(gamma)
    return p * (1.0 - gamma) / (1.0 - p * gamma)


def belief_path(p: float, gamma_other: ControlPath, left: bool = False) -> BeliefPath:
    vals = gamma_other.left_values() if left else gamma_other.values
    return BeliefPath(gamma_other.times, belief(p, vals))


def gamma_from_min_belief(p1: float, m):
    """(p1 - p1 ^ m) / (p1 (1 - p1 ^ m)): the control that pushes the belief down to m."""
    q = np.minimum(p1, np.asarray(m, dtype=float))
    return (p1 - q) / (p1 * (1.0 - q))


def sym_factor(b_x0: float, p1: float, p2: float) -> float:
    """Weight tying Gamma^1 increments to Gamma^2 increments.

    Player 2 is indifferent on the boundary when (1 - p2 Gamma^1)(1 - Pi^1) stays
    constant; with Pi^1 = b(x0) ^ p1 after the time-zero adjustment this gives
    p1 (1 - b(x0) ^ p1) / (p2 (1 - p1)). When b(x0) >= p1 it reduces to p1 / p2.
    """
    q = min(b_x0, p1)
    return p1 * (1.0 - q) / (p2 * (1.0 - p1))


# ---------------------------------------------------------------------------
# level representation


@dataclass(frozen=True)
class LevelControl:
    """Control Gamma_t = Phi(S_t) with Phi = table on [lo, hi] below jump_level, 1 above."""

    lo: float
    hi: float
    values: np.ndarray = field(repr=False)
    jump_level: float = math.inf

    def continuous(self, s):
        s = np.asarray(s, dtype=float)
        v = self.values
        if v.size == 1 or self.hi <= self.lo:
            return np.full(s.shape, v[0]) if s.ndim else float(v[0])
        grid = np.linspace(self.lo, self.hi, v.size)
        out = np.interp(s, grid, v)
        return out if out.ndim else float(out)

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        out = np.where(s >= self.jump_level, 1.0, self.continuous(s))
        return out if out.ndim else float(out)

    def stop_level(self, u: float) -> float:
        """Lowest level at which the control exceeds u (inf when it never does)."""
        if not 0.0 <= u < 1.0:
            raise OutOfRange("u must lie in [0, 1)")
        v = self.values
        if v[0] > u:
            return self.lo
        idx = np.flatnonzero(v > u)
        if idx.size == 0 or self.hi <= self.lo:
            return self.jump_level
        j = int(idx[0])
        grid = np.linspace(self.lo, self.hi, v.size)
        w = (u - v[j - 1]) / (v[j] - v[j - 1])
        return float(min(grid[j - 1] + w * (grid[j] - grid[j - 1]), self.jump_level))

    def on_path(self, times, running_max, states=None) -> ControlPath:
        """Realise the control on a path given its running maximum."""
        running_max = np.asarray(running_max, dtype=float)
        values = self(running_max)
        jump = None
        if math.isfinite(self.jump_level):
            hit = np.flatnonzero(running_max >= self.jump_level)
            if hit.size:
                k = int(hit[0])
                pre = 0.0 if k == 0 else float(self.continuous(self.jump_level))
                jump = JumpRecord(k, pre, 1.0)
        return ControlPath(np.asarray(times, dtype=float), values, jump)

    def as_arrays(self):
        """(lo, hi, values, jump_level) for the compiled kernels."""
        return float(self.lo), float(self.hi), np.ascontiguousarray(self.values, dtype=float), float(self.jump_level)


def threshold_control(level: float) -> LevelControl:
    """Pure rule: stop at the first time X reaches `level`."""
    return LevelControl(level, level, np.zeros(1), float(level))


def immediate_control() -> LevelControl:
    return LevelControl(0.0, 0.0, np.ones(1), 0.0)


def never_control() -> LevelControl:
    return LevelControl(0.0, 0.0, np.zeros(1), math.inf)


def scaled_control(control: LevelControl, factor: float) -> LevelControl:
    """Continuous part multiplied by factor (clipped to [0, 1]); jump kept."""
    return LevelControl(control.lo, control.hi, np.clip(factor * control.values, 0.0, 1.0), control.jump_level)


def pure_stop_control(control: LevelControl, u: float, x0: float) -> LevelControl:
    """Threshold rule equal to the randomized stop gamma(u) of `control`."""
    level = control.stop_level(u)
    if not math.isfinite(level):
        return never_control()
    return threshold_control(max(level, x0))


def _level_grid(x0: float, top: float, size: int) -> np.ndarray:
    return np.linspace(x0, top, size)


@dataclass(frozen=True)
class EquilibriumControls:
    gamma1: LevelControl
    gamma2: LevelControl
    x0: float
    p1: float
    p2: float
    reading: str = "symmetric"


def sym_controls(b: Boundary, x0: float, p1: float, p2: float, size: int = LEVEL_TABLE_SIZE) -> EquilibriumControls:
    """Symmetric equilibrium: Gamma^2 from the boundary, Gamma^1 proportional to its increments."""
    if p1 > p2:
        raise InvalidGame("solver paths require p1 <= p2")
    if not 0.0 < p1 < 1.0:
        raise InvalidGame("p1 must lie in (0, 1)")
    b_g = b.upper_bg
    if x0 >= b_g:
        one = LevelControl(x0, x0, np.ones(1), b_g)
        return EquilibriumControls(one, one, x0, p1, p2)
    s = _level_grid(x0, b_g, size)
    phi2 = gamma_from_min_belief(p1, b(s))
    factor = sym_factor(float(b(x0)), p1, p2)
    phi1 = factor * (phi2 - phi2[0])
    if phi1.max() > 1.0 + 1e-12:
        raise FactorOutOfRange("Gamma^1 would exceed 1 before tau_g")
    return EquilibriumControls(
        LevelControl(x0, b_g, np.minimum(phi1, 1.0), b_g),
        LevelControl(x0, b_g, phi2, b_g),
        x0, p1, p2,
    )


def asym_gamma1_rate(eq: EquilibriumValues, s, gamma2, p1: float, p2: float):
    """A(s) with d Gamma^1 = A (1 - p2 Gamma^1) d Gamma^2 on the boundary set.

    Obtained from p2 (V^{h2} - u2) dGamma^1 = p1 (1 - p1) du2/dp1 (1 - p2 Gamma^1)
    / (1 - p1 Gamma^2)^2 dGamma^2 at the reflected belief Pi^1 = b(s).
    """
    s = np.asarray(s, dtype=float)
    pi = belief(p1, gamma2)
    du2 = eq.du2_dp1(s, pi)
    gap = value_at(eq.Vh2, s) - eq.u2(s, pi)
    return p1 * (1.0 - p1) * du2 / (p2 * gap * (1.0 - p1 * gamma2) ** 2)


def asym_controls(
    eq: EquilibriumValues,
    x0: float,
    p1: float,
    p2: float,
    reading: AsymReading = "consistent",
    size: int = LEVEL_TABLE_SIZE,
) -> EquilibriumControls:
    """Asymmetric equilibrium controls on levels.

    Gamma^2 reflects player 1's belief on the boundary until b_{g2}. Gamma^1 follows
    the linear ODE driven by dGamma^2 on the same range. The "consistent" reading then
    lets player 2 stop at b_{g2} and holds Gamma^1 until it jumps to 1 at b_{g1};
    the "literal" reading holds Gamma^2 until b_{g1} and lets player 1 stop at b_{g2}.
    """
    if p1 > p2:
        raise InvalidGame("solver paths require p1 <= p2")
    b = eq.boundary
    b_g1, b_g2 = eq.Vg1.threshold, eq.Vg2.threshold
    if not x0 < b_g2:
        raise InvalidGame("asymmetric construction needs x0 < b_g2")
    s = _level_grid(x0, b_g2, size)
    phi2 = gamma_from_min_belief(p1, b(s))
    rate = asym_gamma1_rate(eq, s, phi2, p1, p2)
    incr = 0.5 * (rate[1:] + rate[:-1]) * np.diff(phi2)
    log_surv = -p2 * np.concatenate([[0.0], np.cumsum(incr)])
    phi1 = (1.0 - np.exp(log_surv)) / p2
    if phi1.max() > 1.0 + 1e-12:
        raise FactorOutOfRange("Gamma^1 would exceed 1 before tau_g2")
    if reading == "consistent":
        g2 = LevelControl(x0, b_g2, phi2, b_g2)
        g1 = _extend_flat(x0, b_g2, phi1, b_g1, size)
    elif reading == "literal":
        g2 = _extend_flat(x0, b_g2, phi2, b_g1, size)
        g1 = LevelControl(x0, b_g2, phi1, b_g2)
    else:
        raise ValueError(f"unknown reading {reading!r}")
    return EquilibriumControls(g1, g2, x0, p1, p2, reading)


def _extend_flat(x0, top, values, new_top, size):
    """Table on [x0, top] held at its last value up to the jump at new_top."""
    return LevelControl(x0, top, values, new_top)


# ---------------------------------------------------------------------------
# path operations


def _levels(path, running_max):
    path = np.asarray(path, dtype=float)
    if running_max is None:
        return np.maximum.accumulate(path, axis=-1)
    return np.asarray(running_max, dtype=float)


@dataclass(frozen=True)
class HoldRule:
    """Freeze the control after `freeze_index` and set it to 1 from `jump_index`.

    `jump_level` is the state level reached at the jump (used for the pre-jump value).
    """

    freeze_index: int
    jump_index: int
    jump_level: float | None = None


def gamma2_from_boundary(
    path,
    b: Boundary,
    p1: float,
    hold: HoldRule | None = None,
    times=None,
    running_max=None,
) -> ControlPath:
    """Gamma^2_t = G(inf_{s<=t} b(X_s)) along one path.

    `running_max` (e.g. a bridge-sampled maximum) replaces the grid states when
    given; since b is nonincreasing, inf b(X_s) = b(sup X_s).
    """
    path = np.asarray(path, dtype=float)
    times = np.arange(path.shape[-1], dtype=float) if times is None else np.asarray(times, dtype=float)
    levels = _levels(path, running_max)
    m = np.minimum.accumulate(b(levels), axis=-1)
    values = gamma_from_min_belief(p1, m)
    jump = None
    if hold is not None:
        k0, k1 = hold.freeze_index, hold.jump_index
        if k0 < values.shape[-1]:
            if hold.jump_level is not None:
                frozen = float(gamma_from_min_belief(p1, max(float(m[k0 - 1]) if k0 > 0 else 1.0, b(hold.jump_level))))
            else:
                frozen = float(values[k0])
            values[k0:] = frozen
        if k1 < values.shape[-1]:
            pre = float(values[k1 - 1]) if k1 > 0 else 0.0
            if k1 == k0 and hold.jump_level is not None:
                pre = frozen
            values[k1:] = 1.0
            jump = JumpRecord(k1, pre, 1.0)
    return ControlPath(times, values, jump)


def gamma1_sym(
    gamma2: ControlPath,
    x0: float,
    b: Boundary,
    p1: float,
    p2: float,
    tau_g_index: int | None,
    mode: str = "martingale",
) -> ControlPath:
    """Gamma^1 = factor (Gamma^2 - Gamma^2_0) before tau_g and 1 from tau_g on."""
    if mode not in ("martingale", "ode"):
        raise ValueError(f"unknown mode {mode!r}")
    if p1 > p2:
        raise InvalidGame("solver paths require p1 <= p2")
    factor = sym_factor(float(b(x0)), p1, p2)
    g2 = np.asarray(gamma2.values, dtype=float)
    values = factor * (g2 - g2[0])
    jump = None
    n = values.shape[-1]
    stop = n if tau_g_index is None else int(tau_g_index)
    if np.any(values[:stop] > 1.0 + 1e-12):
        raise FactorOutOfRange("Gamma^1 would exceed 1 before tau_g")
    if stop < n:
        pre = float(values[stop - 1]) if stop > 0 else 0.0
        if gamma2.jump is not None and gamma2.jump.index == stop:
            pre = factor * (gamma2.jump.pre - g2[0])
        values[stop:] = 1.0
        jump = JumpRecord(stop, pre, 1.0)
    return ControlPath(gamma2.times, values, jump)


def gamma1_asym(
    path,
    gamma2: ControlPath,
    eq: EquilibriumValues,
    p1: float,
    p2: float,
    tau_g2_index: int | None,
    tau_g1_index: int | None = None,
    reading: AsymReading = "consistent",
    running_max=None,
    max_increment: float = 1e-3,
    report: list | None = None,
) -> ControlPath:
    """Pathwise explicit Euler for Gamma^1 in the d Gamma^2 clock.

    On (0, tau_g2) each increase of Gamma^2 moves Gamma^1 by A (1 - p2 Gamma^1) dGamma^2.
    Increments that would move Gamma^1 by more than max_increment are split; on a
    split the belief follows the control and the state sits on the boundary, at
    b^{-1}(Pi^1). Under the consistent reading Gamma^1 then stays frozen until
    tau_g1, under the literal one it jumps to 1 at tau_g2.
    """
    levels = _levels(path, running_max)
    g2 = np.asarray(gamma2.values, dtype=float)
    n = g2.shape[-1]
    k_end = n if tau_g2_index is None else min(int(tau_g2_index), n)
    values = np.zeros(n)
    b = eq.boundary
    cur = 0.0
    skipped = 0
    for k in range(1, k_end):
        d2 = g2[k] - g2[k - 1]
        if d2 > 0:
            pieces = 1
            rate = 0.0
            j = 0
            gam2 = g2[k - 1]
            while j < pieces:
                pi = float(belief(p1, gam2))
                state = float(b.inverse(pi)) if 0.0 < pi < 1.0 else float(levels[k])
                if j == 0:
                    rate = float(asym_gamma1_rate(eq, state, gam2, p1, p2))
                    pieces = max(1, int(math.ceil(abs(rate) * (1.0 - p2 * cur) * d2 / max_increment)))
                    h = d2 / pieces
                j += 1
                gam2_next = g2[k - 1] + j * h
                gap = float(value_at(eq.Vh2, state) - eq.u2(state, float(belief(p1, gam2))))
                if abs(gap) < 1e-12:
                    skipped += 1
                    if report is None:
                        raise DenominatorNearZero(f"|V^h2 - u2| < 1e-12 at step {k}")
                    gam2 = gam2_next
                    continue
                rate = float(asym_gamma1_rate(eq, state, gam2, p1, p2))
                cur += rate * (1.0 - p2 * cur) * h
                gam2 = gam2_next
        values[k] = cur
    if report is not None:
        report.append(skipped)
    jump = None
    if reading == "literal":
        if k_end < n:
            values[k_end:] = 1.0
            jump = JumpRecord(k_end, cur, 1.0)
    else:
        values[k_end:] = cur
        if tau_g1_index is not None and tau_g1_index < n:
            values[tau_g1_index:] = 1.0
            jump = JumpRecord(int(tau_g1_index), cur, 1.0)
    return ControlPath(gamma2.times, values, jump)


def randomized_stop(control: ControlPath, u: float):
    """Smallest grid index with Gamma > u, or math.inf when there is none."""
    if not 0.0 <= u < 1.0:
        raise OutOfRange("u must lie in [0, 1)")
    idx = np.flatnonzero(np.asarray(control.values) > u)
    return int(idx[0]) if idx.size else math.inf
