"""Shared oracles for the test suite: finite differences and brute-force adversaries."""

import itertools

import numpy as np

from certrl.box import Box
from certrl.certify import abstract_rollout, draw_noise
from certrl.envs import PerturbationSpec, rollout
from certrl.mlp import Mlp
from certrl.model import GaussianPolicy


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def fd_param_grad(net: Mlp, loss, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss()`` over every parameter of ``net`` (flattened)."""
    out = []
    for p in net.params():
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            out.append((up - down) / (2 * h))
    return np.array(out)


def random_tanh_instance(rng: np.random.Generator, max_layers: int = 3, max_width: int = 8):
    n_layers = int(rng.integers(1, max_layers + 1))
    sizes = [int(rng.integers(1, max_width + 1)) for _ in range(n_layers + 1)]
    net = Mlp.init(sizes, ["tanh"] * n_layers, rng)
    box = Box(rng.normal(size=sizes[0]), rng.uniform(0.0, 0.5, size=sizes[0]))
    return net, box


def random_policy(rng: np.random.Generator, dims: int, stochastic: bool = False,
                  hidden: int = 8) -> GaussianPolicy:
    net = Mlp.init((dims, hidden, dims), ["tanh", "tanh"], rng)
    for w in net.weights:
        w *= 2.0
    return GaussianPolicy(net, np.full(dims, -1.5), deterministic_eval=not stochastic)


def corner_sequences(dims: int, T: int, eps: float):
    """Every per-step choice of a corner of the eps-ball, as offset arrays ``(T, dims)``."""
    corners = [np.array(c) for c in itertools.product((-eps, eps), repeat=dims)]
    for seq in itertools.product(corners, repeat=T):
        yield np.array(seq)


def soundness_trial(env, policy, eps: float, T: int, rng: np.random.Generator,
                    n_random: int = 8, corners: bool = True):
    """Run one abstract rollout and its paired concrete adversaries.

    Returns ``(lower_bound, returns)`` where ``returns`` are the concrete
    returns of random and corner-grid adversaries sharing the noise draws.
    """
    model = env.as_model()
    s0 = env.sample_init(rng)
    noise = draw_noise(rng, policy, model, T)
    trace = abstract_rollout(policy, model, s0, PerturbationSpec(eps), T, noise=noise)
    z_pi, z_env = noise
    returns = []
    for _ in range(n_random):
        offs = rng.uniform(-eps, eps, size=(T, env.state_dim))
        returns.append(rollout(env, policy, s0, z_pi, z_env, lambda t, s, o=offs: s + o[t]))
    if corners:
        for offs in corner_sequences(env.state_dim, T, eps):
            returns.append(rollout(env, policy, s0, z_pi, z_env, lambda t, s, o=offs: s + o[t]))
    return trace.lower_bound, np.array(returns)
