"""White-box state-adversarial MDPs with separable Gaussian transition noise.

Each environment carries its mean dynamics and reward as an exact network
``[s, a] -> [s' - s, r]`` so it can serve as its own (error-free) model for
certification.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .box import Box, concat
from .mlp import Mlp
from .model import GaussianModel, GaussianPolicy


@dataclass(frozen=True)
class PerturbationSpec:
    """l-inf observation ball ``B(s) = {s' : ||s' - s||_inf <= epsilon}``."""

    epsilon: float

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be nonnegative")

    def ball(self, s) -> Box:
        return Box.from_point(s).widen(self.epsilon)

    def abstract(self, box: Box) -> Box:
        return box.widen(self.epsilon)

    def project(self, s, s_adv) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.clip(s_adv, s - self.epsilon, s + self.epsilon)

    def admits(self, s, s_adv, atol: float = 0.0) -> bool:
        return bool(np.all(np.abs(np.asarray(s_adv) - np.asarray(s)) <= self.epsilon + atol))


@dataclass
class Mdp:
    name: str
    state_dim: int
    action_dim: int
    init_sampler: Callable[[np.random.Generator], np.ndarray]
    mean_dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    reward: Callable[[np.ndarray, np.ndarray], np.ndarray]
    noise_std: np.ndarray
    horizon: int
    exact_net: Mlp
    action_bound: Optional[float] = None

    def clip_action(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if self.action_bound is None:
            return a
        return np.clip(a, -self.action_bound, self.action_bound)

    def sample_init(self, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(self.init_sampler(rng), dtype=float)

    def step_noise(self, s, a, z):
        """Transition with a fixed standard-normal draw ``z``: ``mu_P(s, a) + sigma * z``."""
        s_next = self.mean_dynamics(s, a) + self.noise_std * np.asarray(z, dtype=float)
        return s_next, self.reward(s, a)

    def reward_abs(self, s_box: Box, a_box: Box) -> Box:
        return self.exact_net.forward_abs(concat(s_box, a_box))[self.state_dim:]

    def as_model(self) -> GaussianModel:
        """The environment as an exact model (``eps_E = 0``)."""
        with np.errstate(divide="ignore"):
            log_sigma = np.log(np.append(self.noise_std, 0.0))
        return GaussianModel(self.exact_net.copy(), log_sigma, self.state_dim,
                             eps_E=0.0, delta_E=0.0, d_E=0.0, reward_mode="exact",
                             extra={"env": self.name})


def step(env: Mdp, s, a, rng: np.random.Generator):
    """One environment transition; returns ``(s', r)``."""
    s = np.asarray(s, dtype=float)
    z = rng.standard_normal(s.shape)
    s_next, r = env.step_noise(s, a, z)
    if not np.all(np.isfinite(s_next)):
        raise FloatingPointError(f"{env.name}: non-finite state")
    return s_next, r


def table1_env() -> Mdp:
    """1-D MDP: ``s0 = 1``, ``s' = s + a + N(0, 1)``, ``r = s + a``, two steps."""
    net = Mlp([[[0.0, 1.0], [1.0, 1.0]]], [[0.0, 0.0]], ["identity"])
    return Mdp(
        name="table1",
        state_dim=1,
        action_dim=1,
        init_sampler=lambda rng: np.array([1.0]),
        mean_dynamics=lambda s, a: s + a,
        reward=lambda s, a: np.sum(s + a, axis=-1),
        noise_std=np.array([1.0]),
        horizon=2,
        exact_net=net,
    )


def table1_policy() -> GaussianPolicy:
    """The deterministic identity policy ``pi(s) = s``."""
    return GaussianPolicy(Mlp([[[1.0]]], [[0.0]], ["identity"]), [-np.inf], True)


def _pointmass_net(k: int, step_size: float, action_cost: float) -> Mlp:
    # hidden: relu(s), relu(-s), relu(a), relu(-a), relu(a-1), relu(-a-1)
    I_k, I_m = np.eye(k), np.eye(k)
    Z = np.zeros((k, k))
    W1 = np.block([
        [I_k, Z], [-I_k, Z],
        [Z, I_m], [Z, -I_m],
        [Z, I_m], [Z, -I_m],
    ])
    b1 = np.concatenate([np.zeros(4 * k), -np.ones(2 * k)])
    # clip(a) = a+ - a- - (a-1)+ + (-a-1)+;  |clip(a)| = a+ + a- - (a-1)+ - (-a-1)+
    clip = np.hstack([Z, Z, I_m, -I_m, -I_m, I_m])
    absclip = np.hstack([Z, Z, I_m, I_m, -I_m, -I_m])
    abs_s = np.hstack([I_k, I_k, Z, Z, Z, Z])
    W2 = np.vstack([
        step_size * clip,
        -abs_s.sum(axis=0, keepdims=True) - action_cost * absclip.sum(axis=0, keepdims=True),
    ])
    b2 = np.zeros(k + 1)
    return Mlp([W1, W2], [b1, b2], ["relu", "identity"])


def pointmass_env(dims: int = 1, noise_std: float = 0.05, horizon: int = 20,
                  step_size: float = 0.1, action_cost: float = 0.01) -> Mdp:
    """Point mass pushed toward the origin.

    ``s' = s + 0.1 clip(a) + noise``, ``r = -||s||_1 - 0.01 ||clip(a)||_1``,
    initial state uniform in ``[-1, 1]^dims``.
    """
    if dims not in (1, 2):
        raise ValueError("pointmass supports 1 or 2 dimensions")

    def mean_dynamics(s, a):
        return s + step_size * np.clip(a, -1.0, 1.0)

    def reward(s, a):
        a = np.clip(a, -1.0, 1.0)
        return -np.sum(np.abs(s), axis=-1) - action_cost * np.sum(np.abs(a), axis=-1)

    return Mdp(
        name=f"pointmass{dims}d",
        state_dim=dims,
        action_dim=dims,
        init_sampler=lambda rng: rng.uniform(-1.0, 1.0, size=dims),
        mean_dynamics=mean_dynamics,
        reward=reward,
        noise_std=np.full(dims, float(noise_std)),
        horizon=horizon,
        exact_net=_pointmass_net(dims, step_size, action_cost),
        action_bound=1.0,
    )


ENVIRONMENTS = {
    "table1": table1_env,
    "pointmass1d": lambda: pointmass_env(1),
    "pointmass2d": lambda: pointmass_env(2),
}


def make_env(name: str) -> Mdp:
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


def rollout(env: Mdp, policy: GaussianPolicy, s0, z_pi, z_env, adversary=None,
            deterministic: bool | None = None) -> float:
    """Concrete episode return under fixed noise draws.

    ``adversary(t, s)`` returns the observation the policy sees; the
    transition always starts from the true state.
    """
    deterministic = policy.deterministic_eval if deterministic is None else deterministic
    s = np.asarray(s0, dtype=float)
    total = 0.0
    for t in range(len(z_env)):
        obs = s if adversary is None else adversary(t, s)
        a = policy.act(obs, None if deterministic else z_pi[t])
        s, r = env.step_noise(s, a, z_env[t])
        total += float(r)
    return total
