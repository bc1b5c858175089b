"""Empirical observation attacks.

These adversaries are not certified; they give concrete attacked returns that
must never fall below the certified lower bound when the environment is used
as its own model.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .certify import as_seed_sequence
from .envs import Mdp, PerturbationSpec
from .model import GaussianPolicy

ATTACKS = ("random", "grid_corner", "gradient_mad")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "gradient_mad"
    steps: int = 10
    step_size: float = 0.25     # fraction of epsilon per PGD step
    epsilon: float = 0.1

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}; choose from {ATTACKS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.steps < 0 or self.step_size <= 0:
            raise ValueError("need steps >= 0 and step_size > 0")


@dataclass
class AttackResult:
    mean: float
    std: float
    returns: np.ndarray


def action_displacement(policy: GaussianPolicy, s, s_adv) -> float:
    diff = policy.act(s_adv) - policy.act(s)
    return float(diff @ diff)


def _mad(policy: GaussianPolicy, s, spec: PerturbationSpec, cfg: AttackConfig,
         rng: np.random.Generator) -> np.ndarray:
    # the displacement objective has zero gradient at s, so start at a random point
    a0 = policy.act(s)
    x = spec.project(s, s + rng.uniform(-cfg.epsilon, cfg.epsilon, s.shape))
    best, best_val = x, action_displacement(policy, s, x)
    for _ in range(cfg.steps):
        g = policy.mean_net.input_grad(x, 2.0 * (policy.act(x) - a0))
        x = spec.project(s, x + cfg.step_size * cfg.epsilon * np.sign(g))
        val = action_displacement(policy, s, x)
        if val > best_val:
            best, best_val = x, val
    return best


def _lookahead(policy: GaussianPolicy, env: Mdp, s, obs) -> float:
    # reward now plus the reward at the mean next state under the clean policy
    a = env.clip_action(policy.act(obs))
    r = float(env.reward(s, a))
    s_next = env.mean_dynamics(s, a)
    return r + float(env.reward(s_next, env.clip_action(policy.act(s_next))))


def _grid_corner(policy: GaussianPolicy, s, spec: PerturbationSpec,
                 env: Optional[Mdp]) -> np.ndarray:
    if s.size > 2:
        raise ValueError("grid_corner enumerates corners for at most 2 state dimensions")
    offsets = itertools.product((-spec.epsilon, spec.epsilon), repeat=s.size)
    corners = [s + np.array(off) for off in offsets]
    if env is None:
        scores = [-action_displacement(policy, s, c) for c in corners]
    else:
        scores = [_lookahead(policy, env, s, c) for c in corners]
    return corners[int(np.argmin(scores))]


def attack_state(policy: GaussianPolicy, s, cfg: AttackConfig,
                 rng: np.random.Generator, env: Optional[Mdp] = None) -> np.ndarray:
    """Perturbed observation in the l-inf ball of radius ``cfg.epsilon`` around ``s``.

    ``grid_corner`` uses ``env`` for its lookahead; without one it falls back
    to the largest action displacement.
    """
    s = np.asarray(s, dtype=float)
    if cfg.epsilon == 0:
        return s.copy()
    spec = PerturbationSpec(cfg.epsilon)
    if cfg.kind == "random":
        out = s + rng.uniform(-cfg.epsilon, cfg.epsilon, s.shape)
    elif cfg.kind == "grid_corner":
        out = _grid_corner(policy, s, spec, env)
    else:
        out = _mad(policy, s, spec, cfg, rng)
    return spec.project(s, out)


def attacked_rollout(policy: GaussianPolicy, env: Mdp, cfg: AttackConfig, s0, z_pi, z_env,
                     rng: np.random.Generator) -> float:
    """Return of one episode in the true environment with attacked observations.

    ``z_pi``/``z_env`` fix the policy and transition noise so the episode can
    be paired with an abstract rollout that used the same draws.
    """
    s = np.asarray(s0, dtype=float)
    total = 0.0
    for t in range(len(z_env)):
        obs = attack_state(policy, s, cfg, rng, env)
        a = policy.act(obs, None if policy.deterministic_eval else z_pi[t])
        s, r = env.step_noise(s, a, z_env[t])
        total += float(r)
    return total


def attacked_return(policy: GaussianPolicy, env: Mdp, cfg: AttackConfig, episodes: int,
                    rng=0, horizon: Optional[int] = None) -> AttackResult:
    """Mean and standard deviation of the attacked return over ``episodes`` runs."""
    T = env.horizon if horizon is None else horizon
    root = as_seed_sequence(rng)
    returns = np.empty(episodes)
    for i, child in enumerate(root.spawn(episodes)):
        gen = np.random.default_rng(child)
        s0 = env.sample_init(gen)
        z_pi = gen.standard_normal((T, policy.action_dim))
        z_env = gen.standard_normal((T, env.state_dim))
        returns[i] = attacked_rollout(policy, env, cfg, s0, z_pi, z_env, gen)
    std = float(returns.std(ddof=1)) if episodes > 1 else 0.0
    return AttackResult(float(returns.mean()), std, returns)
