import numpy as np
import pytest

from certrl.attack import (ATTACKS, AttackConfig, action_displacement, attack_state,
                           attacked_return)
from certrl.envs import make_env
from certrl.train import evaluate

from helpers import random_policy


@pytest.mark.parametrize("kind", ATTACKS)
def test_attacks_stay_in_ball(kind):
    env = make_env("pointmass2d")
    rng = np.random.default_rng(0)
    pol = random_policy(rng, 2)
    cfg = AttackConfig(kind, epsilon=0.07)
    for s in rng.uniform(-1, 1, (50, 2)):
        adv = attack_state(pol, s, cfg, rng, env)
        assert np.max(np.abs(adv - s)) <= 0.07 + 1e-15


@pytest.mark.parametrize("kind", ATTACKS)
def test_zero_epsilon_is_identity(kind):
    env = make_env("pointmass1d")
    pol = random_policy(np.random.default_rng(0), 1)
    cfg = AttackConfig(kind, epsilon=0.0)
    s = np.array([0.3])
    np.testing.assert_array_equal(attack_state(pol, s, cfg, np.random.default_rng(0), env), s)
    res = attacked_return(pol, env, cfg, 5, rng=1)
    clean = attacked_return(pol, env, AttackConfig("random", epsilon=0.0), 5, rng=1)
    np.testing.assert_array_equal(res.returns, clean.returns)


def test_mad_beats_random_on_average():
    rng = np.random.default_rng(1)
    pol = random_policy(rng, 2)
    states = rng.uniform(-1, 1, (100, 2))
    mad = AttackConfig("gradient_mad", epsilon=0.1)
    rnd = AttackConfig("random", epsilon=0.1)
    d_mad = [action_displacement(pol, s, attack_state(pol, s, mad, rng)) for s in states]
    d_rnd = [action_displacement(pol, s, attack_state(pol, s, rnd, rng)) for s in states]
    assert np.mean(d_mad) >= np.mean(d_rnd)


def test_grid_corner_picks_a_corner():
    env = make_env("pointmass1d")
    pol = random_policy(np.random.default_rng(2), 1)
    s = np.array([0.5])
    adv = attack_state(pol, s, AttackConfig("grid_corner", epsilon=0.1), None, env)
    assert abs(abs(adv[0] - 0.5) - 0.1) < 1e-15


def test_attacked_return_stats_and_clean_match():
    env = make_env("pointmass1d")
    pol = random_policy(np.random.default_rng(3), 1)
    res = attacked_return(pol, env, AttackConfig("gradient_mad", epsilon=0.1), 20, rng=0)
    assert res.returns.shape == (20,)
    assert res.std == pytest.approx(np.std(res.returns, ddof=1))
    clean = attacked_return(pol, env, AttackConfig("random", epsilon=0.0), 200, rng=0)
    nominal = evaluate(env, pol, 200, np.random.default_rng(0))
    assert abs(clean.mean - nominal) < 0.5


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig("fgsm")
    with pytest.raises(ValueError):
        AttackConfig("random", epsilon=-0.1)
