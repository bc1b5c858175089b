import numpy as np
import pytest

from certrl.envs import (PerturbationSpec, make_env, pointmass_env, rollout, step, table1_env,
                         table1_policy)


def table1_return(perturb):
    env, pol = table1_env(), table1_policy()
    zero = np.zeros((2, 1))
    return rollout(env, pol, [1.0], zero, zero, lambda t, s: s + perturb[t])


@pytest.mark.parametrize("perturb,expected", [
    ((0.0, 0.0), 6.0),      # s1 = 2, obs1 = 2
    ((0.1, -0.4), 5.9),     # obs0 = 1.1, s1 = 2.1, obs1 = 1.7: 2.1 + 3.8
    ((-0.2, -0.3), 5.1),    # obs0 = 0.8, s1 = 1.8, obs1 = 1.5: 1.8 + 3.3
])
def test_two_step_rows_by_hand(perturb, expected):
    assert table1_return(perturb) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("name", ["pointmass1d", "pointmass2d"])
def test_exact_net_matches_dynamics(name):
    env = make_env(name)
    rng = np.random.default_rng(0)
    s = rng.uniform(-2, 2, size=(500, env.state_dim))
    a = rng.uniform(-3, 3, size=(500, env.action_dim))
    y = env.exact_net.forward(np.hstack([s, a]))
    np.testing.assert_allclose(s + y[:, :env.state_dim], env.mean_dynamics(s, a), atol=1e-12)
    np.testing.assert_allclose(y[:, env.state_dim], env.reward(s, a), atol=1e-12)


def test_as_model_predicts_like_env():
    env = pointmass_env(2)
    model = env.as_model()
    assert model.eps_E == 0 and model.reward_mode == "exact"
    s, a, z = np.array([0.3, -0.5]), np.array([2.0, -0.2]), np.array([0.1, -1.0])
    s_env, r_env = env.step_noise(s, a, z)
    s_mod, r_mod = model.predict(s, a, z)
    np.testing.assert_allclose(s_mod, s_env, atol=1e-12)
    assert r_mod == pytest.approx(float(r_env), abs=1e-12)


def test_perturbation_spec():
    spec = PerturbationSpec(0.1)
    s = np.array([0.0, 1.0])
    assert spec.admits(s, spec.project(s, s + [0.5, -0.5]))
    np.testing.assert_allclose(spec.project(s, s + [0.5, -0.5]), [0.1, 0.9])
    assert not spec.admits(s, s + [0.2, 0.0])
    b = spec.ball(s)
    np.testing.assert_allclose(b.lo, [-0.1, 0.9])
    with pytest.raises(ValueError):
        PerturbationSpec(-1.0)


def test_make_env_and_step():
    with pytest.raises(ValueError):
        make_env("cartpole")
    with pytest.raises(ValueError):
        pointmass_env(3)
    env = make_env("pointmass1d")
    s_next, r = step(env, np.array([0.5]), np.array([-1.0]), np.random.default_rng(0))
    assert s_next.shape == (1,) and r == pytest.approx(-0.51)
    assert env.clip_action([5.0]).tolist() == [1.0]
