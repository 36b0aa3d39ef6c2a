import math

import numpy as np
import pytest

from ghostgame.errors import DriftNotBelowRate, InvalidGame, InvalidPayoff, NegativeRate, NonPositiveSigma, ZeroRate
from ghostgame.model import (
    GameSpec,
    Payoff,
    PlayerSpec,
    characteristic_residual,
    characteristic_roots,
    dominates,
    payoff_eval,
    validate,
)


def test_validate_accepts_admissible_parameters():
    assert validate(0.08, 0.01, 0.1).sigma == 0.01
    assert validate(0.0, 1.4142135, 2.0).r == 2.0


@pytest.mark.parametrize(
    "mu, sigma, r, err",
    [
        (0.1, 0.01, 0.1, DriftNotBelowRate),
        (0.2, 0.1, 0.1, DriftNotBelowRate),
        (0.0, 0.0, 0.1, NonPositiveSigma),
        (0.0, -1.0, 0.1, NonPositiveSigma),
        (-0.5, 0.2, -0.1, NegativeRate),
        (-0.5, 0.2, 0.0, ZeroRate),
    ],
)
def test_validate_rejects(mu, sigma, r, err):
    with pytest.raises(err):
        validate(mu, sigma, r)


def test_roots_worked_family_exact():
    roots = characteristic_roots(validate(0.0, math.sqrt(2.0), 2.0))
    assert abs(roots.gamma - 2.0) <= 1e-12
    assert abs(roots.eta + 1.0) <= 1e-12


def test_roots_small_volatility_no_cancellation():
    params = validate(0.08, 0.01, 0.1)
    roots = characteristic_roots(params)
    assert 1.249 < roots.gamma < 1.251
    assert abs(roots.eta + 1600.25) < 0.01
    assert abs(characteristic_residual(params, roots.gamma)) <= 1e-12
    # z^2 + 1599 z - 2000 = 0 scaled by sigma^2 / 2
    assert abs(roots.gamma**2 + 1599 * roots.gamma - 2000) <= 1e-9


def test_roots_vieta_product():
    params = validate(0.05, 0.2, 0.1)
    roots = characteristic_roots(params)
    assert roots.gamma * roots.eta == pytest.approx(-5.0, rel=1e-13)
    assert roots.gamma > 1 and roots.eta < 0


def test_roots_residual_random_triples():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        mu = rng.uniform(-1.0, 1.0)
        sigma = 10 ** rng.uniform(-3, 0.5)
        r = max(mu, 0.0) + 10 ** rng.uniform(-3, 0.5)
        params = validate(mu, sigma, r)
        roots = characteristic_roots(params)
        assert roots.gamma > 1.0 and roots.eta < 0.0
        for z in (roots.gamma, roots.eta):
            # residual measured against the size of the individual terms
            scale = max(1.0, 0.5 * sigma**2 * z * z, abs(mu * z), r)
            assert abs(characteristic_residual(params, z)) <= 1e-12 * scale


def test_power_functions_solve_generator():
    params = validate(0.05, 0.3, 0.1)
    roots = characteristic_roots(params)
    x = np.linspace(0.1, 100.0, 100)
    for z in (roots.gamma, roots.eta):
        f = x**z
        d1 = z * x ** (z - 1)
        d2 = z * (z - 1) * x ** (z - 2)
        lhs = 0.5 * params.sigma**2 * x**2 * d2 + params.mu * x * d1 - params.r * f
        assert np.max(np.abs(lhs) / np.abs(params.r * f)) <= 1e-10


def test_payoff_eval_examples():
    assert payoff_eval(Payoff.call(3), 5) == 2
    assert payoff_eval(Payoff.call(3), 2) == 0
    assert payoff_eval(Payoff.zero(), 7) == 0
    assert payoff_eval(Payoff.put(3), 1) == 2


def test_payoff_nonnegative_and_lipschitz():
    x = np.linspace(0.01, 20, 2001)
    for p in (Payoff.call(3.0), Payoff.put(4.0)):
        v = p(x)
        assert np.all(v >= 0)
        assert np.all(np.abs(np.diff(v)) <= np.diff(x) + 1e-12)


def test_payoff_validation():
    with pytest.raises(InvalidPayoff):
        Payoff("digital", 1.0)
    with pytest.raises(InvalidPayoff):
        Payoff.call(-1.0)
    with pytest.raises(InvalidPayoff):
        Payoff("zero", 1.0)


def test_dominance_rules():
    assert dominates(Payoff.call(3), Payoff.call(4))
    assert not dominates(Payoff.call(4), Payoff.call(3))
    assert dominates(Payoff.call(3), Payoff.zero())
    assert dominates(Payoff.put(4), Payoff.put(3))
    assert not dominates(Payoff.call(3), Payoff.put(3))


def _player(p, K=3.0, L=4.0):
    return PlayerSpec(Payoff.call(K), Payoff.call(L), p)


def test_gamespec_invariants():
    params = validate(0.08, 0.01, 0.1)
    game = GameSpec(params, 10.0, _player(0.3), _player(0.6))
    assert game.symmetric and game.p1 == 0.3
    game.require_ordered()
    with pytest.raises(InvalidGame):
        GameSpec(params, 10.0, _player(1.0), _player(1.0))
    with pytest.raises(InvalidGame):
        GameSpec(params, 10.0, _player(0.3, K=4.0, L=3.0), _player(0.6))
    with pytest.raises(InvalidGame):
        GameSpec(params, -1.0, _player(0.3), _player(0.6))
    with pytest.raises(InvalidGame):
        GameSpec(params, 10.0, _player(0.7), _player(0.6)).require_ordered()
