"""Certified training: Dyna-style model learning plus a Lagrangian robustness term.

The policy minimizes ``L_normal + lambda * (L_symbolic - Delta)`` while the
multiplier follows projected dual ascent. ``L_normal`` is the negative return
of short differentiable rollouts through the learned model mean;
``L_symbolic`` is the gap between a concrete model rollout and the certified
lower bound of the matching interval rollout under shared noise.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .box import Box
from .envs import Mdp, PerturbationSpec, make_env
from .mlp import Adam, Mlp, ParamGradient
from .model import (GaussianModel, GaussianPolicy, TransitionDataset, fit_model,
                    measure_model_error)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "env_steps", "nominal_reward", "symbolic_loss", "lambda", "epsilon_t")


@dataclass
class TrainConfig:
    env: str = "pointmass1d"
    seed: int = 0
    epochs: int = 40
    grad_steps: int = 25
    model_rollouts: int = 64
    model_rollout_len: int = 5
    env_episodes: int = 1
    init_episodes: int = 20
    T_train: int = 1
    normal_horizon: int = 5
    batch_size: int = 64
    Delta: float = 0.05
    lambda0: float = 0.5
    lr: float = 3e-3
    dual_lr: float = 0.5
    epsilon_target: float = 0.1
    end_step: int = 600
    final_step: int = 1000
    temperature: float = 4.0
    policy_hidden: int = 32
    policy_log_sigma: float = -2.0
    model_hidden: int = 16
    model_layers: int = 1
    model_epochs: int = 40
    model_lr: float = 3e-3
    delta_E: float = 0.1
    heldout_frac: float = 0.2
    eval_episodes: int = 10

    def __post_init__(self):
        if not self.Delta > 0:
            raise ValueError("Delta must be positive")
        if self.lambda0 < 0 or self.dual_lr < 0 or self.lr <= 0:
            raise ValueError("need lambda0 >= 0, dual_lr >= 0 and lr > 0")
        if self.epsilon_target < 0:
            raise ValueError("epsilon_target must be nonnegative")
        if not 0 < self.end_step <= self.final_step:
            raise ValueError("need 0 < end_step <= final_step")
        if self.model_layers < 1:
            raise ValueError("model_layers must be at least 1")
        if self.T_train < 1 or self.normal_horizon < 1:
            raise ValueError("horizons must be at least 1")

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        cast = {}
        for key, val in values.items():
            default = getattr(cls, key)
            cast[key] = type(default)(val) if not isinstance(val, type(default)) else val
        return cls(**cast)

    def to_dict(self) -> dict:
        return asdict(self)


# -- epsilon schedule ---------------------------------------------------------

EPS_START = 1e-12


def epsilon_schedule(step: int, cfg: TrainConfig) -> float:
    """Smoothed warm-up of the training radius.

    Grows as ``EPS_START + alpha * step**temperature`` up to
    ``mid = 0.25 * end_step``, continues linearly with the matching value and
    slope until ``end_step`` where it reaches ``epsilon_target``, then stays.
    """
    target = cfg.epsilon_target
    if target == 0.0:
        return 0.0
    if step >= cfg.end_step:
        return target
    beta = cfg.temperature
    mid = 0.25 * cfg.end_step
    span = cfg.end_step - mid
    alpha = (target - EPS_START) / (span * beta * mid ** (beta - 1) + mid ** beta)
    if step <= mid:
        return EPS_START + alpha * float(step) ** beta
    mid_value = EPS_START + alpha * mid ** beta
    mid_slope = beta * alpha * mid ** (beta - 1)
    return min(target, mid_value + (step - mid) * mid_slope)


# -- differentiable rollouts --------------------------------------------------------

def _rollout_concrete(policy, model, s0, z_pi, z_env):
    k = model.state_dim
    s = s0
    ret = np.zeros(len(s0))
    caches = []
    for t in range(z_pi.shape[1]):
        a_mean, pc = policy.mean_net.forward_cached(s)
        a = a_mean + policy.sigma * z_pi[:, t]
        y, mc = model.mean_net.forward_cached(np.concatenate([s, a], axis=-1))
        s = s + y[:, :k]
        if z_env is not None:
            s = s + model.state_sigma * z_env[:, t]
        ret = ret + y[:, k]
        caches.append((pc, mc))
    return ret, caches


def _backprop_concrete(policy, model, caches, g_ret) -> ParamGradient:
    k = model.state_dim
    grads = ParamGradient.zeros_like(policy.mean_net)
    gs = np.zeros((len(g_ret), k))
    for pc, mc in reversed(caches):
        gy = np.concatenate([gs, g_ret[:, None]], axis=-1)
        _, gin = model.mean_net.vjp(mc, gy, param_grads=False)
        pg, g_obs = policy.mean_net.vjp(pc, gin[:, k:])
        grads = grads + pg
        gs = gs + gin[:, :k] + g_obs
    return grads


def _rollout_abstract(policy, model, s0, eps, z_pi, z_env):
    """Batched interval rollout, mirroring ``certify.abstract_rollout`` step for step."""
    k = model.state_dim
    c, d = s0, np.zeros_like(s0)
    rc = np.zeros(len(s0))
    rd = np.zeros(len(s0))
    caches = []
    for t in range(z_pi.shape[1]):
        a_box, pc = policy.mean_net.forward_abs_cached(Box(c, d + eps))
        ac = a_box.center + policy.sigma * z_pi[:, t]
        y, mc = model.mean_net.forward_abs_cached(
            Box(np.concatenate([c, ac], axis=-1),
                np.concatenate([d, a_box.deviation], axis=-1)))
        c = c + y.center[:, :k] + model.state_sigma * z_env[:, t]
        d = d + y.deviation[:, :k] + model.eps_E
        rc = rc + y.center[:, k]
        rd = rd + y.deviation[:, k]
        caches.append((pc, mc))
    return rc, rd, caches


def _backprop_abstract(policy, model, caches, g_rc, g_rd) -> ParamGradient:
    k = model.state_dim
    grads = ParamGradient.zeros_like(policy.mean_net)
    gc = np.zeros((len(g_rc), k))
    gd = np.zeros((len(g_rc), k))
    for pc, mc in reversed(caches):
        gyc = np.concatenate([gc, g_rc[:, None]], axis=-1)
        gyd = np.concatenate([gd, g_rd[:, None]], axis=-1)
        _, gic, gid = model.mean_net.vjp_abs(mc, gyc, gyd, param_grads=False)
        pg, goc, god = policy.mean_net.vjp_abs(pc, gic[:, k:], gid[:, k:])
        grads = grads + pg
        gc = gc + gic[:, :k] + goc
        gd = gd + gid[:, :k] + god
    return grads


def normal_loss(policy: GaussianPolicy, model: GaussianModel, states, rng: np.random.Generator,
                horizon: int = 5):
    """Negative mean ``horizon``-step return through the model mean.

    Action noise is reparameterized from ``rng``; state noise is not applied.
    """
    s0 = np.atleast_2d(np.asarray(states, dtype=float))
    if len(s0) == 0:
        raise ValueError("empty batch")
    z_pi = rng.standard_normal((len(s0), horizon, policy.action_dim))
    ret, caches = _rollout_concrete(policy, model, s0, z_pi, None)
    loss = -float(ret.mean())
    grads = _backprop_concrete(policy, model, caches, np.full(len(s0), -1.0 / len(s0)))
    return loss, grads


@dataclass
class SymbolicLossInfo:
    nominal: float
    lower: float
    skipped: int


def symbolic_loss(policy: GaussianPolicy, model: GaussianModel, states, spec: PerturbationSpec,
                  T_train: int, rng: np.random.Generator, *, noise=None):
    """Mean of ``R_o - R_min`` over the batch, with its exact gradient.

    Returns ``(loss, grads, info)``. Rows whose bounds explode are dropped
    from the mean and counted in ``info.skipped``.
    """
    s0 = np.atleast_2d(np.asarray(states, dtype=float))
    if len(s0) == 0:
        raise ValueError("empty batch")
    n = len(s0)
    if noise is None:
        z_pi = rng.standard_normal((n, T_train, policy.action_dim))
        z_env = rng.standard_normal((n, T_train, model.state_dim))
    else:
        z_pi, z_env = noise
    r_o, c_caches = _rollout_concrete(policy, model, s0, z_pi, z_env)
    with np.errstate(over="ignore", invalid="ignore"):
        rc, rd, a_caches = _rollout_abstract(policy, model, s0, spec.epsilon, z_pi, z_env)
        r_min = rc - rd
        ok = np.isfinite(r_o) & np.isfinite(r_min) & (np.abs(rc) + rd <= 1e12)
    n_ok = int(ok.sum())
    if n_ok == 0:
        return math.inf, ParamGradient.zeros_like(policy.mean_net), SymbolicLossInfo(
            math.nan, math.nan, n)
    w = np.where(ok, 1.0 / n_ok, 0.0)
    loss = float(np.sum(np.where(ok, r_o - r_min, 0.0)) / n_ok)
    grads = (_backprop_concrete(policy, model, c_caches, w)
             + _backprop_abstract(policy, model, a_caches, -w, w))
    info = SymbolicLossInfo(float(r_o[ok].mean()), float(r_min[ok].mean()), n - n_ok)
    return loss, grads, info


# -- data collection -------------------------------------------------------------

def collect_env_episodes(env: Mdp, act, n: int, rng: np.random.Generator,
                         data: Optional[TransitionDataset] = None):
    """Run ``n`` episodes with ``act(s, rng) -> a``; returns (dataset, returns)."""
    data = TransitionDataset(env.state_dim, env.action_dim) if data is None else data
    returns = []
    for _ in range(n):
        s = env.sample_init(rng)
        total = 0.0
        for _ in range(env.horizon):
            a = act(s, rng)
            z = rng.standard_normal(env.state_dim)
            s_next, r = env.step_noise(s, a, z)
            data.add(s, env.clip_action(a), s_next, r)
            total += float(r)
            s = s_next
        returns.append(total)
    return data, np.array(returns)


def collect_model_rollouts(policy: GaussianPolicy, model: GaussianModel, starts, length: int,
                           rng: np.random.Generator, data: TransitionDataset) -> None:
    s = np.atleast_2d(starts)
    for _ in range(length):
        a = policy.act(s, rng.standard_normal((len(s), policy.action_dim)))
        s_next, r = model.predict(s, a, rng.standard_normal(s.shape))
        keep = np.all(np.isfinite(s_next), axis=1) & np.isfinite(r)
        if not keep.any():
            break
        data.add(s[keep], a[keep], s_next[keep], r[keep])
        s = s_next[keep]


def evaluate(env: Mdp, policy: GaussianPolicy, episodes: int, rng: np.random.Generator) -> float:
    _, returns = collect_env_episodes(env, lambda s, _: policy.act(s), episodes, rng)
    return float(returns.mean())


# -- main loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    policy: GaussianPolicy
    model: GaussianModel
    log: list
    env_data: TransitionDataset


def make_policy(env: Mdp, cfg: TrainConfig, rng: np.random.Generator) -> GaussianPolicy:
    h = cfg.policy_hidden
    net = Mlp.init((env.state_dim, h, h, env.action_dim), ["tanh", "tanh", "tanh"], rng)
    return GaussianPolicy(net, np.full(env.action_dim, cfg.policy_log_sigma), True)


def train(env: Mdp | str, cfg: TrainConfig, rng: Optional[np.random.Generator] = None
          ) -> TrainResult:
    """Alternate model fitting, data collection and primal-dual policy updates."""
    env = make_env(env) if isinstance(env, str) else env
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    policy = make_policy(env, cfg, rng)
    opt = Adam(policy.mean_net.params(), lr=cfg.lr)

    bound = env.action_bound or 1.0
    d_env, _ = collect_env_episodes(
        env, lambda s, g: g.uniform(-bound, bound, env.action_dim), cfg.init_episodes, rng)
    d_model = TransitionDataset(env.state_dim, env.action_dim,
                                capacity=cfg.model_rollouts * cfg.model_rollout_len * 20)

    def explore(s, g):
        return policy.act(s, g.standard_normal(env.action_dim))

    model = None
    lam = cfg.lambda0
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        train_part, heldout = d_env.split(1.0 - cfg.heldout_frac, rng)
        model = fit_model(train_part, cfg.model_epochs, cfg.model_lr, rng, model=model,
                          hidden=(cfg.model_hidden,) * cfg.model_layers)
        model.delta_E = cfg.delta_E
        model.eps_E, model.d_E = measure_model_error(model, heldout, cfg.delta_E)

        starts = d_env.sample(cfg.model_rollouts, rng).states
        collect_model_rollouts(policy, model, starts, cfg.model_rollout_len, rng, d_model)
        collect_env_episodes(env, explore, cfg.env_episodes, rng, d_env)

        sym_losses = []
        eps_t = epsilon_schedule(step, cfg)
        for _ in range(cfg.grad_steps):
            eps_t = epsilon_schedule(step, cfg)
            l_norm, g_norm = normal_loss(policy, model, d_model.sample(cfg.batch_size, rng).states,
                                         rng, cfg.normal_horizon)
            l_sym = math.nan
            if cfg.epsilon_target > 0:
                # with no perturbation the run is plain model-based RL
                batch = d_model.sample(cfg.batch_size, rng).states
                l_sym, g_sym, _ = symbolic_loss(policy, model, batch, PerturbationSpec(eps_t),
                                                cfg.T_train, rng)
            if math.isfinite(l_sym):
                grads = g_norm + lam * g_sym
            else:
                grads = g_norm
            if not grads.is_finite():
                raise FloatingPointError(f"non-finite policy gradient at epoch {epoch}")
            opt.step(grads.arrays())
            if math.isfinite(l_sym):
                lam = max(0.0, lam + cfg.dual_lr * (l_sym - cfg.Delta))
                sym_losses.append(l_sym)
            step += 1
        if not all(np.all(np.isfinite(p)) for p in policy.mean_net.params()):
            raise FloatingPointError(f"non-finite policy parameters after epoch {epoch}")

        row = {
            "epoch": epoch,
            "env_steps": len(d_env),
            "nominal_reward": evaluate(env, policy, cfg.eval_episodes, rng),
            "symbolic_loss": float(np.mean(sym_losses)) if sym_losses else math.nan,
            "lambda": lam,
            "epsilon_t": eps_t,
        }
        history.append(row)
        log.info("epoch %(epoch)d reward %(nominal_reward).3f sym %(symbolic_loss).4f "
                 "lambda %(lambda).3f eps %(epsilon_t).4g", row)
    return TrainResult(policy, model, history, d_env)


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row["epoch"], row["env_steps"]]
                            + [f"{row[c]:.17g}" for c in LOG_COLUMNS[2:]])
