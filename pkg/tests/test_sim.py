import math

import numpy as np
import pytest

from ghostgame.boundary import solve_symmetric
from ghostgame.errors import GridMismatch, HorizonTooShort
from ghostgame.model import GameSpec, Payoff, PlayerSpec, validate
from ghostgame.sim import (
    McEstimate,
    SimSettings,
    coarsen,
    competition_draws,
    default_deviation_family,
    diagnose_martingales,
    estimate_J,
    evaluate_payoffs,
    martingale_diagnostic,
    martingale_samples,
    monte_carlo,
    pool,
    rerun_if_failed,
    simulate_paths,
    static_checks,
    value_identity,
)
from ghostgame.single import call_value, value_function
from ghostgame.strategy import LevelControl, immediate_control, never_control, sym_controls, threshold_control

WORKED = validate(0.0, math.sqrt(2.0), 2.0)
SLOW_DRIFT = validate(0.08, 0.01, 0.1)


def worked_game(x0=5.0, p1=0.3, p2=0.6, h=None):
    h = Payoff.call(4.0) if h is None else h
    return GameSpec(WORKED, x0, PlayerSpec(Payoff.call(3.0), h, p1), PlayerSpec(Payoff.call(3.0), h, p2))


# ---------------------------------------------------------------------------
# paths


def test_paths_deterministic_and_chunk_independent():
    a = simulate_paths(SLOW_DRIFT, 10.0, 1e-3, 1.0, 50, seed=4)
    b = simulate_paths(SLOW_DRIFT, 10.0, 1e-3, 1.0, 50, seed=4)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.running_max, b.running_max)
    tail = simulate_paths(SLOW_DRIFT, 10.0, 1e-3, 1.0, 20, seed=4, path_offset=30)
    assert np.array_equal(tail.states, a.states[30:])
    other = simulate_paths(SLOW_DRIFT, 10.0, 1e-3, 1.0, 50, seed=5)
    assert not np.array_equal(a.states, other.states)


def test_paths_start_at_x0_and_stay_positive():
    ps = simulate_paths(WORKED, 2.0, 1e-2, 2.0, 200, seed=1)
    assert np.all(ps.states[:, 0] == 2.0)
    assert np.all(ps.states > 0)
    assert np.all(ps.running_max >= ps.states - 1e-12)
    assert np.all(np.diff(ps.running_max, axis=1) >= 0)


def test_lognormal_mean():
    ps = simulate_paths(SLOW_DRIFT, 10.0, 1e-3, 1.0, 20000, seed=2)
    x1 = ps.states[:, -1]
    se = x1.std(ddof=1) / math.sqrt(x1.size)
    assert abs(x1.mean() - 10 * math.exp(0.08)) <= 4 * se


def test_log_increments_distribution():
    params = validate(0.05, 0.3, 0.1)
    ps = simulate_paths(params, 1.0, 0.1, 1.0, 20000, seed=8)
    inc = np.diff(np.log(ps.states), axis=1).ravel()
    mean, var = params.log_drift * 0.1, params.sigma**2 * 0.1
    assert abs(inc.mean() - mean) <= 4 * math.sqrt(var / inc.size)
    assert abs(inc.var() / var - 1) <= 0.02


def test_small_noise_is_nearly_deterministic():
    params = validate(0.05, 0.001, 0.1)
    ps = simulate_paths(params, 1.0, 1e-2, 2.0, 100, seed=3)
    det = np.exp(0.05 * ps.times)
    assert np.max(np.abs(ps.states / det - 1)) <= 0.01


def test_horizon_too_short():
    with pytest.raises(HorizonTooShort):
        simulate_paths(SLOW_DRIFT, 10.0, 1e-2, 1.0, 100, seed=1, thresholds=(15.0,), tail_tol=1e-4, value_scale=1.0)
    ps = simulate_paths(SLOW_DRIFT, 10.0, 1e-2, 1.0, 100, seed=1, thresholds=(10.5,), tail_tol=1e-4)
    assert np.all(ps.hitting[10.5] >= 0)


def test_horizon_must_be_multiple_of_dt():
    with pytest.raises(ValueError):
        simulate_paths(SLOW_DRIFT, 10.0, 0.3, 1.0, 10, seed=1)


def test_stop_level_trims_grid():
    ps = simulate_paths(SLOW_DRIFT, 10.0, 1e-2, 100.0, 100, seed=1, stop_level=11.0)
    assert ps.states.shape[1] == ps.last.max() + 1
    hit = ps.first_passage(11.0)
    assert np.array_equal(hit, ps.last)


def test_coarsen_is_exactly_coupled():
    fine = simulate_paths(WORKED, 5.0, 5e-4, 0.5, 50, seed=6, stop_level=6.0, stop_every=2)
    coarse = simulate_paths(WORKED, 5.0, 1e-3, 0.5, 50, seed=6, stop_level=6.0, substeps=2)
    view = coarsen(fine, 2)
    assert view.states.shape == coarse.states.shape
    assert np.array_equal(view.states, coarse.states)
    assert np.array_equal(view.running_max, coarse.running_max)
    assert np.array_equal(view.last, coarse.last)
    with pytest.raises(GridMismatch):
        coarsen(simulate_paths(WORKED, 5.0, 5e-4, 0.5, 5, seed=6, stop_level=5.5), 2)


# ---------------------------------------------------------------------------
# estimates


def test_mc_estimate_and_pooling():
    rng = np.random.default_rng(0)
    x = rng.normal(size=1000)
    full = McEstimate.from_samples(x, "formula")
    assert full.std_error == pytest.approx(x.std(ddof=1) / math.sqrt(x.size))
    parts = [McEstimate.from_samples(c, "formula") for c in np.array_split(x, 7)]
    pooled = pool(parts)
    assert pooled.n == 1000
    assert pooled.mean == pytest.approx(full.mean, abs=1e-13)
    assert pooled.std_error == pytest.approx(full.std_error, rel=1e-12)
    rev = pool(parts[::-1])
    assert rev.mean == pytest.approx(pooled.mean, abs=1e-13)
    with pytest.raises(ValueError):
        McEstimate.from_samples([1.0], "formula")


def test_time_zero_atom_is_exact():
    game = worked_game(x0=5.0)
    q = 0.4
    gamma2 = LevelControl(5.0, 6.0, np.array([q, 0.9]), 6.0)
    paths = simulate_paths(WORKED, 5.0, 1e-3, 0.1, 50, seed=1)
    vh = value_function(Payoff.call(4.0), WORKED)
    expected = (1 - 0.3 * q) * 2.0 + 0.3 * q * vh(5.0)
    samples = evaluate_payoffs(game, immediate_control(), gamma2, paths)
    assert np.allclose(samples[:, 0], expected, rtol=0, atol=1e-14)


def test_no_competition_reduces_to_single_player_value():
    game = worked_game(x0=5.0)
    paths = simulate_paths(WORKED, 5.0, 1e-3, 3.0, 20000, seed=2, stop_level=6.0)
    for mode in ("formula", "indicator"):
        est = estimate_J(1, mode, game, threshold_control(6.0), never_control(), paths)
        assert abs(est.mean - 25.0 / 12.0) <= 3 * est.std_error


def test_simultaneous_stop_gives_player2_priority():
    game = worked_game(x0=5.0)
    vh = value_function(Payoff.call(4.0), WORKED)
    for monitor in ("grid", "bridge"):
        paths = simulate_paths(WORKED, 5.0, 1e-3, 2.0, 200, seed=3, monitor=monitor, stop_level=5.5)
        draws = competition_draws(paths.seed, paths.path_ids)
        draws[:, 2:] = 0.0  # both competitors exist
        out = evaluate_payoffs(game, threshold_control(5.5), threshold_control(5.5), paths, draws)
        hit = paths.first_passage(5.5)
        ok = hit > 0
        assert ok.sum() > 50
        if monitor == "grid":
            level = paths.running_max[np.arange(paths.n_paths), hit]
            disc = np.exp(-WORKED.r * hit * paths.dt)
            assert np.allclose(out[ok, 3], (disc * (level - 3.0))[ok], rtol=1e-13)
            assert np.allclose(out[ok, 2], (disc * vh(level))[ok], rtol=1e-13)
        else:
            # both events happen at the same sampled time at level 5.5
            assert np.allclose(out[ok, 2] / out[ok, 3], vh(5.5) / 2.5, rtol=1e-13)
        assert np.all(out[~ok, 2:] == 0.0)


def reference_grid(game, gamma1, gamma2, paths, draws):
    """Plain numpy evaluation of both estimators in grid mode, one path at a time."""
    r, p1, p2 = game.params.r, game.p1, game.p2
    g1, g2 = game.player1.g, game.player2.g
    vh1, vh2 = value_function(game.player1.h, game.params), value_function(game.player2.h, game.params)
    out = np.empty((paths.n_paths, 4))
    for i in range(paths.n_paths):
        S = paths.running_max[i, : paths.last[i] + 1]
        disc = np.exp(-r * np.arange(S.size) * paths.dt)
        G1, G2 = np.asarray(gamma1(S)), np.asarray(gamma2(S))
        d1 = np.diff(G1, prepend=0.0)
        d2 = np.diff(G2, prepend=0.0)
        C1 = np.cumsum(disc * vh2(S) * d1)
        C2 = np.cumsum(disc * vh1(S) * d2)
        G1_left = np.concatenate([[0.0], G1[:-1]])
        C1_left = np.concatenate([[0.0], C1[:-1]])
        J1 = np.sum(d1 * (disc * (1 - p1 * G2) * g1(S) + p1 * C2)) + (1 - G1[-1]) * p1 * C2[-1]
        J2 = np.sum(d2 * (disc * (1 - p2 * G1_left) * g2(S) + p2 * C1_left)) + (1 - G2[-1]) * p2 * C1[-1]
        u1, u2, v1, v2 = draws[i]
        k1 = np.flatnonzero(G1 > u1)
        k2 = np.flatnonzero(G2 > u2)
        k1 = int(k1[0]) if k1.size else None
        k2 = int(k2[0]) if k2.size else None
        ind1 = ind2 = 0.0
        if k1 is not None and (v1 >= p1 or k2 is None or k1 < k2):
            ind1 = disc[k1] * g1(S[k1])
        elif v1 < p1 and k2 is not None:
            ind1 = disc[k2] * vh1(S[k2])
        if k2 is not None and (v2 >= p2 or k1 is None or k2 <= k1):
            ind2 = disc[k2] * g2(S[k2])
        elif v2 < p2 and k1 is not None:
            ind2 = disc[k1] * vh2(S[k1])
        out[i] = J1, J2, ind1, ind2
    return out


def test_kernel_matches_reference_in_grid_mode():
    eq = solve_symmetric(WORKED, 3.0, Payoff.call(4.0))
    game = worked_game(x0=4.5)
    c = sym_controls(eq.boundary, 4.5, 0.3, 0.6)
    paths = simulate_paths(WORKED, 4.5, 1e-2, 3.0, 300, seed=9, monitor="grid", stop_level=6.0)
    draws = competition_draws(paths.seed, paths.path_ids)
    for pair in ((c.gamma1, c.gamma2), (threshold_control(5.2), c.gamma2), (c.gamma1, threshold_control(4.9))):
        got = evaluate_payoffs(game, *pair, paths, draws)
        ref = reference_grid(game, *pair, paths, draws)
        assert np.allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_grid_mismatch():
    game = worked_game(x0=5.0)
    paths = simulate_paths(WORKED, 4.0, 1e-3, 0.1, 10, seed=1)
    with pytest.raises(GridMismatch):
        evaluate_payoffs(game, never_control(), never_control(), paths)


def test_estimates_are_bounded_by_single_player_value():
    eq = solve_symmetric(WORKED, 3.0, Payoff.call(4.0))
    game = worked_game(x0=4.5)
    c = sym_controls(eq.boundary, 4.5, 0.3, 0.6)
    settings = SimSettings(1e-3, 6.0, 8000, seed=5)
    res = monte_carlo(game, {"eq": (c.gamma1, c.gamma2)}, settings)["eq"]
    vg = call_value(WORKED, 3.0)(4.5)
    for player in (1, 2):
        for mode in ("formula", "indicator"):
            e = res.get(player, mode)
            assert -3 * e.std_error <= e.mean <= vg + 3 * e.std_error


def test_monte_carlo_chunking_is_reproducible():
    eq = solve_symmetric(WORKED, 3.0, Payoff.call(4.0))
    game = worked_game(x0=4.5)
    c = sym_controls(eq.boundary, 4.5, 0.3, 0.6)
    pairs = {"eq": (c.gamma1, c.gamma2)}
    a = monte_carlo(game, pairs, SimSettings(1e-3, 4.0, 3000, seed=5, chunk=3000))["eq"].get(1, "formula")
    b = monte_carlo(game, pairs, SimSettings(1e-3, 4.0, 3000, seed=5, chunk=700))["eq"].get(1, "formula")
    assert b.mean == pytest.approx(a.mean, rel=1e-12)
    assert b.std_error == pytest.approx(a.std_error, rel=1e-9)


def test_coupled_factors_match_separate_runs():
    eq = solve_symmetric(WORKED, 3.0, Payoff.call(4.0))
    game = worked_game(x0=5.0)
    c = sym_controls(eq.boundary, 5.0, 0.3, 0.6)
    pairs = {"eq": (c.gamma1, c.gamma2)}
    both = monte_carlo(game, pairs, SimSettings(5e-4, 4.0, 2000, seed=5), factors=(1, 2))
    coarse = monte_carlo(game, pairs, SimSettings(1e-3, 4.0, 2000, seed=5, substeps=2))
    assert both[2]["eq"].get(1, "formula").mean == pytest.approx(coarse["eq"].get(1, "formula").mean, rel=1e-12)


# ---------------------------------------------------------------------------
# diagnostics


def test_single_player_martingale_is_flat():
    params = validate(0.02, 0.3, 0.08)
    v = call_value(params, 1.0)
    paths = simulate_paths(params, 1.2, 1e-2, 6.0, 20000, seed=7, monitor="grid")
    X = paths.states
    ck = np.array([0, 100, 200, 400, 600])
    reached = X >= v.threshold
    stop = np.where(reached.any(axis=1), np.argmax(reached, axis=1), -1)
    disc = np.exp(-params.r * paths.times)
    M = disc[ck] * v(X[:, ck])
    rows = np.arange(X.shape[0])
    stopped = disc[np.maximum(stop, 0)] * v(X[rows, np.maximum(stop, 0)])
    rep = martingale_diagnostic(M, stop, ck, ck * paths.dt, np.full(X.shape[0], v(1.2)), stopped, "Vg")
    assert rep.verdict["Vg:martingale_until_stop"]
    assert rep.verdict["Vg:supermartingale"]
    assert rep.verdict["Vg:nonincreasing"]
    assert len(rep.checkpoints) == 2 * ck.size


def test_diagnostic_flags_drift():
    rng = np.random.default_rng(1)
    M = 1.0 + 0.05 * np.arange(5)[None, :] + rng.normal(0, 0.1, (20000, 5))
    rep = martingale_diagnostic(M, np.full(20000, -1), range(5), range(5), np.ones(20000), np.zeros(20000))
    assert not rep.verdict["M:martingale_until_stop"]
    assert not rep.verdict["M:supermartingale"]
    assert not rep.passed


@pytest.fixture(scope="module")
def worked_equilibrium():
    eq = solve_symmetric(WORKED, 3.0, Payoff.call(4.0))
    game = worked_game(x0=4.5)
    c = sym_controls(eq.boundary, 4.5, 0.3, 0.6)
    return game, eq, c


def test_equilibrium_martingales_and_negative_control(worked_equilibrium):
    game, eq, c = worked_equilibrium
    settings = SimSettings(1e-3, 5.0, 20000, seed=11)
    ck = np.array([0, 250, 500, 1000, 2000])
    parts = []

    def on_chunk(paths):
        parts.append(martingale_samples(game, eq, c.gamma1, c.gamma2, paths, ck, 6.0))

    res = monte_carlo(game, {"eq": (c.gamma1, c.gamma2)}, settings, stop_level=7.2, on_chunk=on_chunk)["eq"]
    from ghostgame.sim import MartingaleSamples

    samples = MartingaleSamples.concat(parts)
    assert samples.M1.shape == (20000, ck.size)
    assert np.allclose(samples.m2_start, eq.u2(4.5, 0.3))
    assert np.allclose(samples.m1_start, eq.u1(4.5, 0.3))
    rep = diagnose_martingales(samples)
    assert rep.passed, rep.verdict
    assert value_identity(1, res.get(1, "formula"), eq.u1(4.5, 0.3)).passed
    assert value_identity(2, res.get(2, "formula"), eq.u2(4.5, 0.3)).passed
    assert static_checks(game, eq, c).passed
    bad = eq.perturbed(1.1)
    assert not value_identity(1, res.get(1, "formula"), bad.u1(4.5, 0.3)).passed
    assert not static_checks(game, bad, c).passed


def test_deviation_family_and_rerun_policy():
    fam = default_deviation_family(4.0, 6.0)
    assert len(fam) == 14
    levels = [v.jump_level for k, v in fam.items() if k.startswith("threshold")]
    assert len(levels) == 12 and min(levels) > 4.0 and max(levels) < 7.2
    calls = []

    def check(s):
        calls.append((s.n_paths, s.path_offset))
        return len(calls) > 1

    settings = SimSettings(1e-3, 1.0, 100, seed=1)
    assert rerun_if_failed(check, settings) == (True, True)
    assert calls == [(100, 0), (400, 100)]
