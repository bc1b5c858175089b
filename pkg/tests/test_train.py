import math

import numpy as np
import pytest

from certrl.envs import PerturbationSpec, make_env
from certrl.mlp import Mlp
from certrl.model import GaussianModel, GaussianPolicy
from certrl.train import (EPS_START, TrainConfig, epsilon_schedule, normal_loss, symbolic_loss,
                          train, write_log)

from helpers import fd_param_grad, rel_err

TINY = dict(epochs=3, grad_steps=4, model_rollouts=8, model_rollout_len=3, init_episodes=4,
            model_epochs=5, eval_episodes=2, batch_size=16, end_step=8, final_step=12)


def small_pair(seed=0, eps_E=0.02):
    rng = np.random.default_rng(seed)
    pol = GaussianPolicy(Mlp.init((1, 6, 1), ["tanh", "tanh"], rng), [-1.0], True)
    model = GaussianModel(Mlp.init((2, 6, 2), ["tanh", "identity"], rng), [-2.0, -5.0], 1,
                          eps_E=eps_E)
    return pol, model


def test_epsilon_schedule_shape():
    cfg = TrainConfig(epsilon_target=0.1, end_step=400)
    vals = np.array([epsilon_schedule(t, cfg) for t in range(0, 600)])
    assert vals[0] == EPS_START
    assert np.all(np.diff(vals) >= 0)
    assert vals[400] == 0.1 and vals[-1] == 0.1
    assert np.all(vals > 0) and np.all(vals <= 0.1)
    # continuous through the switch from the power warm-up to the linear ramp
    mid = 100
    assert abs(vals[mid + 1] - vals[mid]) < 2 * abs(vals[mid] - vals[mid - 1])
    assert epsilon_schedule(50, TrainConfig(epsilon_target=0.0)) == 0.0


def test_normal_loss_gradient():
    pol, model = small_pair()
    states = np.random.default_rng(1).uniform(-1, 1, (5, 1))

    def loss():
        return normal_loss(pol, model, states, np.random.default_rng(9), 3)[0]

    _, g = normal_loss(pol, model, states, np.random.default_rng(9), 3)
    assert rel_err(g.flat(), fd_param_grad(pol.mean_net, loss)) < 1e-5


@pytest.mark.parametrize("T", [1, 3])
def test_symbolic_loss_gradient(T):
    pol, model = small_pair(1)
    rng = np.random.default_rng(2)
    states = rng.uniform(-1, 1, (6, 1))
    noise = (rng.standard_normal((6, T, 1)), rng.standard_normal((6, T, 1)))
    spec = PerturbationSpec(0.1)

    def loss():
        return symbolic_loss(pol, model, states, spec, T, None, noise=noise)[0]

    val, g, info = symbolic_loss(pol, model, states, spec, T, None, noise=noise)
    assert val >= 0 and info.skipped == 0
    assert val == pytest.approx(info.nominal - info.lower)
    assert rel_err(g.flat(), fd_param_grad(pol.mean_net, loss)) < 1e-5


def test_symbolic_loss_is_zero_without_slack():
    # no perturbation and an exact model: the abstract rollout is a point
    env = make_env("pointmass1d")
    pol, _ = small_pair()
    val, _, _ = symbolic_loss(pol, env.as_model(), [[0.3], [-0.2]], PerturbationSpec(0.0), 3,
                              np.random.default_rng(0))
    assert abs(val) < 1e-12


def test_config_validation_and_roundtrip():
    cfg = TrainConfig.from_dict({"epochs": "7", "Delta": "0.2", "env": "pointmass2d"})
    assert cfg.epochs == 7 and cfg.Delta == 0.2 and cfg.env == "pointmass2d"
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"Delta": 0.0}, {"lambda0": -1.0}, {"end_step": 10, "final_step": 5},
                {"T_train": 0}, {"model_layers": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"no_such_key": 1})


def test_training_is_deterministic(tmp_path):
    cfg = TrainConfig(seed=3, **TINY)
    a, b = train("pointmass1d", cfg), train("pointmass1d", cfg)
    assert a.policy.mean_net.dumps() == b.policy.mean_net.dumps()
    write_log(a.log, tmp_path / "a.csv")
    write_log(b.log, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "epoch,env_steps,nominal_reward,symbolic_loss,lambda,epsilon_t"


def test_lambda_dual_update_semantics():
    # huge threshold: the constraint never binds, so lambda only decreases to 0 and stays there
    res = train("pointmass1d", TrainConfig(seed=0, Delta=1e6, lambda0=0.5, **TINY))
    lams = [r["lambda"] for r in res.log]
    assert all(lam == 0.0 for lam in lams)
    # tight threshold: lambda stays nonnegative and rises while the constraint is violated
    res = train("pointmass1d", TrainConfig(seed=0, Delta=1e-9, lambda0=0.0, **TINY))
    lams = [r["lambda"] for r in res.log]
    assert all(lam >= 0 for lam in lams)
    assert all(b >= a for a, b in zip(lams, lams[1:]))
    for row in res.log:
        assert row["symbolic_loss"] > 1e-9


def test_lambda_never_grows_in_satisfied_epochs():
    res = train("pointmass1d", TrainConfig(seed=1, Delta=0.05, lambda0=1.0, dual_lr=0.5,
                                           T_train=2, **TINY))
    prev = 1.0
    for row in res.log:
        if row["symbolic_loss"] <= 0.05:
            assert row["lambda"] <= prev
        prev = row["lambda"]


def test_zero_epsilon_is_plain_model_based_rl():
    # epsilon_target = 0 skips the symbolic term; compare with a run whose term has zero weight
    base, ablate = [], []
    for seed in range(3):
        a = train("pointmass1d", TrainConfig(seed=seed, epsilon_target=0.0, **TINY))
        b = train("pointmass1d", TrainConfig(seed=seed, epsilon_target=0.1, lambda0=0.0,
                                             dual_lr=0.0, **TINY))
        assert all(math.isnan(r["symbolic_loss"]) for r in a.log)
        assert all(r["lambda"] == TrainConfig().lambda0 for r in a.log)
        base.append(a.log[-1]["nominal_reward"])
        ablate.append(b.log[-1]["nominal_reward"])
    spread = np.std(base + ablate) + 1e-9
    assert abs(np.mean(base) - np.mean(ablate)) <= 3 * spread


def test_normal_loss_zero_reward_model():
    pol, _ = small_pair()
    model = GaussianModel(Mlp([np.zeros((2, 2))], [np.zeros(2)], ["identity"]), [-2.0, -5.0], 1)
    loss, g = normal_loss(pol, model, [[0.1], [0.5]], np.random.default_rng(0), 4)
    assert loss == 0.0 and np.all(g.flat() == 0.0)


def test_small_step_decreases_normal_loss():
    pol, model = small_pair(2)
    states = np.random.default_rng(3).uniform(-1, 1, (8, 1))
    before, g = normal_loss(pol, model, states, np.random.default_rng(4), 5)
    pol.mean_net.apply_update([1e-3 * a for a in g.arrays()])
    after, _ = normal_loss(pol, model, states, np.random.default_rng(4), 5)
    assert after < before
