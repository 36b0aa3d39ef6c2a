"""Monte Carlo verification of equilibria.

Paths are exact GBM samples on a uniform grid. The running maximum of each path
includes the exact Brownian-bridge maximum inside every step, so a control that is a
function of the running maximum is evaluated without hitting-time bias. Events
inside a step are placed at the level where they occur and discounted at a sampled
first-passage time of the bridge across that step. `monitor="grid"` keeps the plain grid-state maximum for comparison.

Two estimators of J_i are computed from the same paths:

* indicator: draw U_1, U_2 and the competitor indicators, resolve who stops first and
  pay the realised payoff;
* formula: integrate the opponent-adjusted payoff against dGamma^i along the path,
  which averages over U_i exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal, Sequence

import numpy as np

from . import _kernels
from .boundary import EquilibriumValues
from .errors import GridMismatch, HorizonTooShort
from .model import GameSpec, ModelParams, Payoff
from .rng import STREAM_DRAWS, uniform_block
from .single import ValueFunction, value_at, value_function
from .strategy import (
    ControlPath,
    EquilibriumControls,
    LevelControl,
    belief,
    immediate_control,
    never_control,
    threshold_control,
)

Monitor = Literal["bridge", "grid"]
Estimator = Literal["indicator", "formula"]
_KIND = {"zero": 0, "call": 1, "put": 2}
_COLUMN = {(1, "formula"): 0, (2, "formula"): 1, (1, "indicator"): 2, (2, "indicator"): 3}


@dataclass(frozen=True)
class PathSet:
    params: ModelParams
    x0: float
    dt: float
    horizon: float
    seed: int
    path_ids: np.ndarray
    states: np.ndarray = field(repr=False)
    running_max: np.ndarray = field(repr=False)
    last: np.ndarray = field(repr=False)
    monitor: Monitor = "bridge"
    substeps: int = 1
    stop_level: float = math.inf
    hitting: dict = field(default_factory=dict, repr=False)

    @property
    def n_paths(self) -> int:
        return int(self.path_ids.size)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[1]) * self.dt

    def first_passage(self, level: float) -> np.ndarray:
        """Index of the step in which the running maximum first reaches level (-1 if never)."""
        reached = self.running_max >= level
        idx = np.argmax(reached, axis=1)
        return np.where(reached[np.arange(self.n_paths), idx], idx, -1)


def simulate_paths(
    params: ModelParams,
    x0: float,
    dt: float,
    horizon: float,
    n: int,
    seed: int,
    *,
    substeps: int = 1,
    monitor: Monitor = "bridge",
    stop_level: float = math.inf,
    path_offset: int = 0,
    thresholds: Sequence[float] = (),
    tail_tol: float | None = None,
    value_scale: float = 1.0,
    block: int = 1024,
    stop_every: int = 1,
) -> PathSet:
    """Exact lognormal paths with per-path counter-based streams.

    Each output step of length dt is built from `substeps` finer steps, so runs with
    (dt, 2 substeps) and (dt / 2, 1 substep) share the same Brownian path. Paths stop
    evolving once the running maximum reaches stop_level; the grid is generated in
    blocks and ends at the last stopping step, so long horizons cost nothing once
    every path has stopped. Stopping is only checked every `stop_every` steps, which
    keeps coarsened views identical to runs on the coarse grid. With tail_tol set, raises
    HorizonTooShort when the highest threshold is reached on fewer than 99% of paths
    and x0 exp((mu - r) T) exceeds tail_tol * value_scale.
    """
    if dt <= 0 or n < 1 or substeps < 1:
        raise ValueError("need dt > 0, n >= 1 and substeps >= 1")
    n_steps = int(round(horizon / dt))
    if n_steps < 1 or abs(n_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon must be a positive multiple of dt")
    if stop_every < 1 or n_steps % stop_every:
        raise ValueError("stop_every must divide the number of steps")
    if monitor not in ("bridge", "grid"):
        raise ValueError(f"unknown monitor {monitor!r}")
    path_ids = np.arange(path_offset, path_offset + n, dtype=np.int64)
    stop_log = math.log(stop_level) if math.isfinite(stop_level) else math.inf
    y = np.full(n, math.log(x0))
    m = y.copy()
    last = np.where(m >= stop_log, 0, -1).astype(np.int64)
    xs = [np.full((n, 1), float(x0))]
    ss = [np.full((n, 1), float(x0))]
    k = 0
    while k < n_steps and (last < 0).any():
        nb = min(block, n_steps - k)
        Xb = np.empty((n, nb))
        Sb = np.empty((n, nb))
        _kernels.generate_block(y, m, k, params.log_drift, params.sigma, dt / substeps, substeps, int(seed),
                                path_ids, stop_log, stop_every, monitor == "bridge", Xb, Sb, last)
        xs.append(Xb)
        ss.append(Sb)
        k += nb
    last[last < 0] = k
    width = int(last.max()) + 1
    X = np.ascontiguousarray(np.concatenate(xs, axis=1)[:, :width])
    S = np.ascontiguousarray(np.concatenate(ss, axis=1)[:, :width])
    ps = PathSet(params, float(x0), float(dt), float(horizon), int(seed), path_ids, X, S, last,
                 monitor, int(substeps), float(stop_level))
    for level in thresholds:
        ps.hitting[float(level)] = ps.first_passage(level)
    if thresholds and tail_tol is not None:
        top = max(thresholds)
        frac = float(np.mean(ps.hitting[float(top)] >= 0))
        bound = x0 * math.exp((params.mu - params.r) * horizon)
        if frac < 0.99 and bound > tail_tol * value_scale:
            raise HorizonTooShort(
                f"threshold {top:.6g} reached on {frac:.1%} of paths; tail bound {bound:.3e}"
            )
    return ps


def default_horizon(params: ModelParams, x0: float, value_scale: float, tol: float = 1e-4,
                    dt: float = 1e-3, max_steps: int = 1_000_000) -> float:
    """Smallest multiple of dt with x0 exp((mu - r) T) <= tol * value_scale, capped."""
    need = math.log(x0 / (tol * value_scale)) / (params.r - params.mu)
    steps = min(max_steps, max(1, math.ceil(need / dt)))
    return steps * dt


# ---------------------------------------------------------------------------
# estimates


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    n: int
    estimator: str
    m2: float = field(default=0.0, repr=False)  # sum of squared deviations

    @classmethod
    def from_samples(cls, samples, estimator: str) -> "McEstimate":
        x = np.asarray(samples, dtype=float)
        n = x.size
        if n < 2:
            raise ValueError("need at least two samples")
        mean = float(x.mean())
        m2 = float(np.sum((x - mean) ** 2))
        return cls(mean, math.sqrt(m2 / (n - 1) / n), n, estimator, m2)

    def combine(self, other: "McEstimate") -> "McEstimate":
        """Pooled estimate of two disjoint sample sets (order-insensitive)."""
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        return McEstimate(mean, math.sqrt(m2 / (n - 1) / n), n, self.estimator, m2)


def pool(estimates: Iterable[McEstimate]) -> McEstimate:
    """Pairwise (tree) reduction, so the result does not depend on worker count."""
    items = list(estimates)
    if not items:
        raise ValueError("nothing to pool")
    while len(items) > 1:
        nxt = [items[i].combine(items[i + 1]) for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def competition_draws(seed: int, path_ids: np.ndarray) -> np.ndarray:
    """(U1, U2, V1, V2) per path: devices and competition indicators theta_i = V_i < p_i."""
    return uniform_block(int(seed), np.asarray(path_ids, dtype=np.int64), STREAM_DRAWS)


def _payoff_array(p: Payoff) -> np.ndarray:
    return np.array([_KIND[p.kind], p.strike or 0.0])


def _value_array(v: ValueFunction) -> np.ndarray:
    return np.array([_KIND[v.payoff.kind], v.payoff.strike or 0.0, v.threshold, v.coefficient, v.exponent])


def _level_step(*controls: LevelControl, parts: int = 400) -> float:
    widths = [c.hi - c.lo for c in controls if c.hi > c.lo]
    return min(widths) / parts if widths else math.inf


def evaluate_payoffs(game: GameSpec, gamma1: LevelControl, gamma2: LevelControl, paths: PathSet,
                     draws: np.ndarray | None = None) -> np.ndarray:
    """Per-path samples, columns (J1 formula, J2 formula, J1 indicator, J2 indicator)."""
    if game.params != paths.params or abs(game.x0 - paths.x0) > 1e-12 * game.x0:
        raise GridMismatch("paths were simulated for another model or initial state")
    if draws is None:
        draws = competition_draws(paths.seed, paths.path_ids)
    if draws.shape != (paths.n_paths, 4):
        raise GridMismatch("one row of draws per path is required")
    pl1, pl2 = game.player1, game.player2
    out = np.empty((paths.n_paths, 4))
    lo1, hi1, v1, j1 = gamma1.as_arrays()
    lo2, hi2, v2, j2 = gamma2.as_arrays()
    _kernels.evaluate_payoffs(
        paths.states, paths.running_max, paths.last, paths.dt, paths.monitor == "bridge", game.params.r,
        game.params.sigma, int(paths.seed), paths.path_ids, pl1.p, pl2.p, _level_step(gamma1, gamma2),
        lo1, hi1, v1, j1, lo2, hi2, v2, j2,
        _payoff_array(pl1.g), _payoff_array(pl2.g),
        _value_array(value_function(pl1.h, game.params)), _value_array(value_function(pl2.h, game.params)),
        np.ascontiguousarray(draws), out,
    )
    return out


def estimate_J(player: int, mode: Estimator, game: GameSpec, gamma1: LevelControl, gamma2: LevelControl,
               paths: PathSet, seed: int | None = None) -> McEstimate:
    """Monte Carlo estimate of J_player(x0; Gamma^1, Gamma^2)."""
    if (player, mode) not in _COLUMN:
        raise ValueError("player must be 1 or 2 and mode indicator or formula")
    draws = competition_draws(paths.seed if seed is None else seed, paths.path_ids)
    samples = evaluate_payoffs(game, gamma1, gamma2, paths, draws)
    return McEstimate.from_samples(samples[:, _COLUMN[(player, mode)]], mode)


@dataclass
class PayoffEstimates:
    """Estimates of J1 and J2 with both estimators for one control pair."""

    parts: dict = field(default_factory=dict)

    def add(self, samples: np.ndarray) -> None:
        for key, col in _COLUMN.items():
            est = McEstimate.from_samples(samples[:, col], key[1])
            self.parts.setdefault(key, []).append(est)

    def get(self, player: int, mode: Estimator) -> McEstimate:
        return pool(self.parts[(player, mode)])


@dataclass(frozen=True)
class SimSettings:
    dt: float
    horizon: float
    n_paths: int
    seed: int
    substeps: int = 1
    monitor: Monitor = "bridge"
    chunk: int = 4000
    path_offset: int = 0

    def with_paths(self, n_paths: int, path_offset: int) -> "SimSettings":
        return SimSettings(self.dt, self.horizon, n_paths, self.seed, self.substeps, self.monitor,
                           self.chunk, path_offset)


def coarsen(paths: PathSet, factor: int) -> PathSet:
    """The same Brownian paths seen on a grid `factor` times coarser.

    The running maximum at every factor-th grid point is the coarse running maximum,
    so estimates on both grids are exactly coupled.
    """
    if factor == 1:
        return paths
    if factor < 1 or paths.n_paths < 1:
        raise ValueError("factor must be a positive integer")
    n_steps = int(round(paths.horizon / paths.dt))
    if n_steps % factor:
        raise GridMismatch("horizon is not a multiple of the coarse step")
    if np.any(paths.last % factor):
        raise GridMismatch("paths must be simulated with stop_every a multiple of factor")
    last = paths.last // factor
    width = int(last.max()) + 1
    cols = np.minimum(np.arange(width) * factor, paths.states.shape[1] - 1)
    return PathSet(paths.params, paths.x0, paths.dt * factor, paths.horizon, paths.seed, paths.path_ids,
                   np.ascontiguousarray(paths.states[:, cols]), np.ascontiguousarray(paths.running_max[:, cols]),
                   last, paths.monitor, paths.substeps * factor, paths.stop_level)


def monte_carlo(game: GameSpec, pairs: dict, settings: SimSettings, stop_level: float | None = None,
                on_chunk: Callable[[PathSet], None] | None = None, factors: Sequence[int] | None = None):
    """Estimates for every named control pair on one shared, chunked set of paths.

    A pair may carry a third entry, a GameSpec with the same model and x0 (for
    instance another p1), which then replaces `game` for that pair. With `factors`,
    the paths are also evaluated on grids that many times coarser and the result
    maps each factor to its estimates.
    """
    if stop_level is None:
        levels = [c.jump_level for pair in pairs.values() for c in pair[:2]]
        finite = [v for v in levels if math.isfinite(v)]
        stop_level = max(finite) if finite else math.inf
    grid_factors = (1,) if factors is None else tuple(factors)
    results = {f: {name: PayoffEstimates() for name in pairs} for f in grid_factors}
    done = 0
    while done < settings.n_paths:
        m = min(settings.chunk, settings.n_paths - done)
        paths = simulate_paths(
            game.params, game.x0, settings.dt, settings.horizon, m, settings.seed,
            substeps=settings.substeps, monitor=settings.monitor, stop_level=stop_level,
            path_offset=settings.path_offset + done, stop_every=math.lcm(*grid_factors),
        )
        draws = competition_draws(settings.seed, paths.path_ids)
        for f in grid_factors:
            view = coarsen(paths, f)
            for name, pair in pairs.items():
                spec = pair[2] if len(pair) > 2 else game
                results[f][name].add(evaluate_payoffs(spec, pair[0], pair[1], view, draws))
        if on_chunk is not None:
            on_chunk(paths)
        done += m
    return results[1] if factors is None else results


# ---------------------------------------------------------------------------
# martingale processes


def _consolation_integral(values, jump, running_max, times, dt, r, vh: ValueFunction, bridge: bool):
    """Running sum of e^{-r s} V^h(X_s) dGamma_s: (including, excluding) the recorded jump."""
    values = np.asarray(values, dtype=float)
    levels = np.asarray(running_max, dtype=float)
    vh_lv = value_at(vh, levels)
    inc = np.empty_like(values)
    inc[..., 0] = values[..., 0] * vh_lv[..., 0]
    dg = np.diff(values, axis=-1)
    mid_v = 0.5 * (vh_lv[..., 1:] + vh_lv[..., :-1]) if bridge else vh_lv[..., 1:]
    t_ev = times[1:] - (0.5 * dt if bridge else 0.0)
    inc[..., 1:] = np.exp(-r * t_ev) * mid_v * dg
    total = np.cumsum(inc, axis=-1)
    before = total.copy()
    if jump is not None and jump.index > 0:
        k = jump.index
        jump_part = np.exp(-r * t_ev[k - 1]) * vh_lv[..., k] * (jump.post - jump.pre)
        if bridge:
            cont = values[..., k] - values[..., k - 1] - (jump.post - jump.pre)
            total_k = total[..., k - 1] + np.exp(-r * t_ev[k - 1]) * mid_v[..., k - 1] * cont + jump_part
            shift = total_k - total[..., k]
            total[..., k:] += shift
            before[..., k:] += shift
        before[..., k] = total[..., k] - jump_part
    return total, before


def build_M_path(
    which: int,
    game: GameSpec,
    eq: EquilibriumValues,
    gamma1: ControlPath,
    gamma2: ControlPath,
    path,
    running_max=None,
    dt: float | None = None,
    bridge: bool = True,
) -> np.ndarray:
    """M^1 (right limits, closed range) or M^2 (left limits, half-open range) on the grid."""
    X = np.asarray(path, dtype=float)
    S = np.maximum.accumulate(X) if running_max is None else np.asarray(running_max, dtype=float)
    times = gamma1.times
    if gamma2.times.shape != times.shape or X.shape[-1] != times.shape[-1]:
        raise GridMismatch("controls and path must share a grid")
    dt = float(times[1] - times[0]) if dt is None else dt
    r = game.params.r
    disc = np.exp(-r * times)
    if which == 1:
        p1 = game.p1
        pi1 = belief(p1, gamma2.values)
        vh = value_function(game.player1.h, game.params)
        cons, _ = _consolation_integral(gamma2.values, gamma2.jump, S, times, dt, r, vh, bridge)
        return disc * (1.0 - p1 * gamma2.values) * eq.u1(X, pi1) + p1 * cons
    if which == 2:
        p1, p2 = game.p1, game.p2
        g1_left = gamma1.left_values()
        pi1_left = belief(p1, gamma2.left_values())
        vh = value_function(game.player2.h, game.params)
        _, cons_left = _consolation_integral(gamma1.values, gamma1.jump, S, times, dt, r, vh, bridge)
        # integral over [0, t): drop the time-zero atom at t = 0
        cons_left = np.array(cons_left, copy=True)
        cons_left[..., 0] = 0.0
        return disc * (1.0 - p2 * g1_left) * eq.u2(X, pi1_left) + p2 * cons_left
    raise ValueError("which must be 1 or 2")


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class CheckpointRow:
    process: str
    t: float
    kind: str  # "stopped" or "unstopped"
    mean: float
    std_error: float
    reference: float
    ok: bool


@dataclass(frozen=True)
class DeviationRow:
    deviation: str
    player: int
    estimate: float
    std_error: float
    u_value: float
    margin: float
    ok: bool


@dataclass
class DiagnosticsReport:
    checkpoints: list = field(default_factory=list)
    verdict: dict = field(default_factory=dict)
    deviation_table: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.verdict.values())

    def merge(self, other: "DiagnosticsReport", prefix: str = "") -> "DiagnosticsReport":
        self.checkpoints.extend(other.checkpoints)
        self.deviation_table.extend(other.deviation_table)
        for k, v in other.verdict.items():
            self.verdict[prefix + k] = v
        return self


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def martingale_diagnostic(
    M: np.ndarray,
    stop_index: np.ndarray,
    checkpoints: Sequence[int],
    times: Sequence[float],
    m0: np.ndarray,
    stopped_values: np.ndarray,
    process: str = "M",
    k_se: float = 3.0,
) -> DiagnosticsReport:
    """Flatness of E[M_{t ^ tau}] and supermartingale checks at grid checkpoints.

    M[:, j] holds the process at grid index checkpoints[j] (time times[j]);
    stop_index is tau's grid step (-1 when not reached) and stopped_values the
    process at tau. Differences to the starting value m0 are tested path-wise, which
    keeps the margins tight when M_0 is random.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if n < 2:
        raise ValueError("need at least two paths")
    start = np.asarray(m0, dtype=float)
    m0_mean, _ = _mean_se(start)
    tiny = 1e-12 * max(1.0, abs(m0_mean))
    stop = np.asarray(stop_index)
    at_stop = np.asarray(stopped_values, dtype=float)
    rep = DiagnosticsReport()
    flat_ok = super_ok = mono_ok = True
    prev = None
    for j, (k, t) in enumerate(zip(checkpoints, times)):
        done = (stop >= 0) & (stop <= k)
        stopped = np.where(done, at_stop, M[:, j])
        mean, se = _mean_se(stopped)
        d_mean, d_se = _mean_se(stopped - start)
        ok = abs(d_mean) <= k_se * d_se + tiny
        flat_ok &= ok
        rep.checkpoints.append(CheckpointRow(process, float(t), "stopped", mean, se, m0_mean, bool(ok)))
        un = M[:, j]
        u_mean, u_se = _mean_se(un)
        ud_mean, ud_se = _mean_se(un - start)
        ok_super = ud_mean <= k_se * ud_se + tiny
        super_ok &= ok_super
        if prev is not None:
            inc_mean, inc_se = _mean_se(un - prev)
            mono_ok &= inc_mean <= k_se * inc_se + tiny
        prev = un
        rep.checkpoints.append(CheckpointRow(process, float(t), "unstopped", u_mean, u_se, m0_mean, bool(ok_super)))
    rep.verdict[f"{process}:martingale_until_stop"] = bool(flat_ok)
    rep.verdict[f"{process}:supermartingale"] = bool(super_ok)
    rep.verdict[f"{process}:nonincreasing"] = bool(mono_ok)
    return rep


@dataclass
class MartingaleSamples:
    """M^1 and M^2 at grid checkpoints and at a stopping time, one row per path."""

    checkpoints: np.ndarray
    times: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    m1_start: np.ndarray
    m2_start: np.ndarray
    stop_index: np.ndarray
    M1_stop: np.ndarray
    M2_stop: np.ndarray

    @staticmethod
    def concat(parts: list) -> "MartingaleSamples":
        first = parts[0]
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
        return MartingaleSamples(first.checkpoints, first.times, cat("M1"), cat("M2"), cat("m1_start"),
                                 cat("m2_start"), cat("stop_index"), cat("M1_stop"), cat("M2_stop"))


def _control_integrals(control: LevelControl, vh: ValueFunction, paths: PathSet, r: float, stop_level: float,
                       dlevel: float):
    n, width = paths.running_max.shape
    G = np.empty((n, width))
    C = np.empty((n, width))
    at_stop = np.empty((n, 6))
    lo, hi, vals, jump = control.as_arrays()
    _kernels.control_integrals(
        paths.states, paths.running_max, paths.last, paths.dt, paths.monitor == "bridge", r,
        paths.params.sigma, int(paths.seed), paths.path_ids, dlevel,
        lo, hi, vals, jump, _value_array(vh), float(stop_level), G, C, at_stop,
    )
    return G, C, at_stop


def martingale_samples(
    game: GameSpec,
    eq: EquilibriumValues,
    gamma1: LevelControl,
    gamma2: LevelControl,
    paths: PathSet,
    checkpoints: Sequence[int],
    stop_level: float,
) -> MartingaleSamples:
    """Evaluate M^1 (right limits, closed integration range) and M^2 (left limits,
    half-open range) at grid checkpoints and at tau = first passage of stop_level."""
    params = game.params
    r, p1, p2 = params.r, game.p1, game.p2
    ck = np.asarray(checkpoints, dtype=np.int64)
    if ck.size and ck.min() < 0:
        raise GridMismatch("negative checkpoint index")
    dlevel = _level_step(gamma1, gamma2)
    vh1 = value_function(game.player1.h, params)
    vh2 = value_function(game.player2.h, params)
    G1, C1, st1 = _control_integrals(gamma1, vh2, paths, r, stop_level, dlevel)
    G2, C2, st2 = _control_integrals(gamma2, vh1, paths, r, stop_level, dlevel)
    bridge = paths.monitor == "bridge"
    t = ck * paths.dt
    # frozen paths are read at their freezing step: M stopped at that time
    col = np.minimum(ck[None, :], paths.last[:, None])
    take = lambda a, c: np.take_along_axis(a, c, axis=1)  # noqa: E731
    disc = np.exp(-r * col * paths.dt)
    X = take(paths.states, col)

    def m1(x, g2, c2, d):
        return d * (1.0 - p1 * g2) * eq.u1(x, belief(p1, g2)) + p1 * c2

    def m2(x, g1_left, g2_left, c1_left, d):
        return d * (1.0 - p2 * g1_left) * eq.u2(x, belief(p1, g2_left)) + p2 * c1_left

    M1 = m1(X, take(G2, col), take(C2, col), disc)
    left = col if bridge else np.maximum(col - 1, 0)
    zero = col == 0
    G1l = np.where(zero, 0.0, take(G1, left))
    G2l = np.where(zero, 0.0, take(G2, left))
    C1l = np.where(zero, 0.0, take(C1, left))
    M2 = m2(X, G1l, G2l, C1l, disc)
    x0 = paths.x0
    m1_start = m1(np.full(paths.n_paths, x0), G2[:, 0], C2[:, 0], 1.0)
    m2_start = np.full(paths.n_paths, float(eq.u2(x0, p1)))
    stop_index = st1[:, 5].astype(np.int64)
    found = stop_index >= 0
    tau = np.where(found, st1[:, 0], 0.0)
    if bridge:
        x_tau = np.where(stop_index > 0, stop_level, x0)
    else:
        x_tau = paths.states[np.arange(paths.n_paths), np.maximum(stop_index, 0)]
    d_tau = np.exp(-r * tau)
    M1_stop = np.where(found, m1(x_tau, np.nan_to_num(st2[:, 2]), np.nan_to_num(st2[:, 4]), d_tau), np.nan)
    M2_stop = np.where(found, m2(x_tau, np.nan_to_num(st1[:, 1]), np.nan_to_num(st2[:, 1]),
                                 np.nan_to_num(st1[:, 3]), d_tau), np.nan)
    return MartingaleSamples(ck, t, M1, M2, m1_start, m2_start, stop_index, M1_stop, M2_stop)


def value_identity(player: int, estimate: McEstimate, m0: float, k_se: float = 3.0) -> DiagnosticsReport:
    """J_i under the equilibrium controls must equal M^i_0 = u_i(x0, p1)."""
    rep = DiagnosticsReport()
    ok = abs(estimate.mean - m0) <= k_se * estimate.std_error + 1e-12 * max(1.0, abs(m0))
    rep.verdict[f"player{player}:value_identity"] = bool(ok)
    return rep


def static_checks(game: GameSpec, eq: EquilibriumValues, controls: EquilibriumControls,
                  points: int = 401, rtol: float = 1e-6) -> DiagnosticsReport:
    """Deterministic conditions on the level tables.

    u_i >= g_i on a grid of states and reachable beliefs; u_i = g_i at the running-max levels
    where Gamma^i increases, with the belief the opponent's control induces there.
    """
    rep = DiagnosticsReport()
    p1 = game.p1
    b = eq.boundary
    lo = min(0.5 * b.touch_a, game.x0)
    hi = 1.5 * max(eq.Vg1.threshold, eq.Vg2.threshold if eq.Vg2 is not None else 0.0, b.upper_bg)
    xs = np.linspace(lo, hi, points)
    # beliefs the controls can reach before player 2 has surely stopped:
    # Pi^1 between its value just below Gamma^2's jump and min(p1, b(x))
    jump2 = controls.gamma2.jump_level
    floor = float(belief(p1, controls.gamma2.continuous(jump2))) if math.isfinite(jump2) else 0.0
    past = xs >= jump2  # player 2 has stopped: Pi^1 = 0
    low = np.where(past, 0.0, floor)
    cap = np.where(past, 0.0, np.maximum(floor, np.minimum(p1, np.asarray(b(xs)))))
    dominance = True
    for frac in np.linspace(0.0, 1.0, 11):
        q = low + frac * (cap - low)
        dominance &= bool(np.all(eq.u1(xs, q) >= eq.g1(xs) - rtol * (1.0 + eq.g1(xs))))
        dominance &= bool(np.all(eq.u2(xs, q) >= eq.g2(xs) - rtol * (1.0 + eq.g2(xs))))
    rep.verdict["values_dominate_payoffs"] = dominance
    for player, ctrl, u, g in ((1, controls.gamma1, eq.u1, eq.g1), (2, controls.gamma2, eq.u2, eq.g2)):
        if ctrl.hi > ctrl.lo and ctrl.values.size > 1:
            grid = np.linspace(ctrl.lo, ctrl.hi, ctrl.values.size)
            rising = np.flatnonzero(np.diff(ctrl.values) > 0) + 1
            levels = grid[rising]
        else:
            levels = np.empty(0)
        if math.isfinite(ctrl.jump_level) and ctrl.jump_level > game.x0:
            levels = np.append(levels, ctrl.jump_level)
        if ctrl(game.x0) > 0:
            levels = np.append(levels, game.x0)
        if levels.size == 0:
            rep.verdict[f"player{player}:stops_where_u_equals_g"] = True
            continue
        # belief seen by player i: Pi^1 from Gamma^2 just below the level
        g2_left = np.where(levels > jump2, 1.0, np.asarray(controls.gamma2.continuous(levels)))
        pi = belief(p1, g2_left)
        gap = np.abs(u(levels, pi) - g(levels))
        rep.verdict[f"player{player}:stops_where_u_equals_g"] = bool(np.all(gap <= rtol * (1.0 + g(levels)) + 1e-9))
    return rep


def diagnose_martingales(samples: MartingaleSamples, k_se: float = 3.0) -> DiagnosticsReport:
    rep = martingale_diagnostic(samples.M1, samples.stop_index, samples.checkpoints, samples.times,
                                samples.m1_start, samples.M1_stop, "M1", k_se)
    rep.merge(martingale_diagnostic(samples.M2, samples.stop_index, samples.checkpoints, samples.times,
                                    samples.m2_start, samples.M2_stop, "M2", k_se))
    return rep


def default_deviation_family(touch_a: float, b_g: float) -> dict:
    """Twelve thresholds strictly inside (a, 1.2 b_g) plus immediate and never stopping."""
    family = {}
    for c in np.linspace(touch_a, 1.2 * b_g, 14)[1:-1]:
        family[f"threshold_{c:.6g}"] = threshold_control(float(c))
    family["immediate"] = immediate_control()
    family["never"] = never_control()
    return family


def deviation_pairs(player: int, controls: EquilibriumControls, family: dict) -> dict:
    """Control pairs where `player` plays each deviation against the equilibrium opponent."""
    pairs = {}
    for name, dev in family.items():
        pairs[name] = (dev, controls.gamma2) if player == 1 else (controls.gamma1, dev)
    return pairs


def deviation_test(
    player: int,
    game: GameSpec,
    controls: EquilibriumControls,
    u_value: float,
    settings: SimSettings,
    family: dict | None = None,
    touch_a: float | None = None,
    b_g: float | None = None,
    k_se: float = 3.0,
    estimator: Estimator = "formula",
    results: dict | None = None,
) -> DiagnosticsReport:
    """Flag deviations whose estimated payoff exceeds the equilibrium value by more than k_se SE."""
    if family is None:
        family = default_deviation_family(touch_a, b_g)
    if not family:
        raise ValueError("deviation family is empty")
    if results is None:
        results = monte_carlo(game, deviation_pairs(player, controls, family), settings)
    rep = DiagnosticsReport()
    all_ok = True
    for name in family:
        est = results[name].get(player, estimator)
        margin = est.mean - u_value
        ok = margin <= k_se * est.std_error
        all_ok &= ok
        rep.deviation_table.append(DeviationRow(name, player, est.mean, est.std_error, u_value, margin, ok))
    rep.verdict[f"player{player}:no_profitable_deviation"] = bool(all_ok)
    return rep


def rerun_if_failed(check: Callable[[SimSettings], bool], settings: SimSettings, factor: int = 4) -> tuple[bool, bool]:
    """Run check; on failure re-run once on factor-times as many fresh paths.

    Returns (passed, rerun_used).
    """
    if check(settings):
        return True, False
    fresh = settings.with_paths(factor * settings.n_paths, settings.path_offset + settings.n_paths)
    return bool(check(fresh)), True
