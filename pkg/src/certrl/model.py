"""Separable-noise actors and dynamics-model learning.

Both the policy and the dynamics model are a deterministic mean network plus
input-independent diagonal Gaussian noise. The model predicts the state
change and the reward, ``mean_net([s, a]) = [ds, r]``, and the next state is
``s + ds``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .box import Box, concat
from .mlp import Adam, Mlp

LOG_SIGMA_MIN, LOG_SIGMA_MAX = -10.0, 2.0


class TransitionDataset:
    """Append-only store of ``(s, a, s', r)`` records with a capacity cap.

    When full, the oldest records are dropped first.
    """

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 100_000):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.capacity = capacity
        self._rows = np.zeros((0, 2 * state_dim + action_dim + 1))

    def __len__(self):
        return len(self._rows)

    @property
    def width(self) -> int:
        return 2 * self.state_dim + self.action_dim + 1

    def add(self, s, a, s_next, r) -> None:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        a = np.atleast_2d(np.asarray(a, dtype=float))
        s_next = np.atleast_2d(np.asarray(s_next, dtype=float))
        r = np.asarray(r, dtype=float).reshape(-1, 1)
        rows = np.hstack([s, a, s_next, r])
        if rows.shape[1] != self.width:
            raise ValueError(f"record width {rows.shape[1]} != {self.width}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("transition records must be finite")
        self._rows = np.vstack([self._rows, rows])[-self.capacity:]

    def extend(self, other: TransitionDataset) -> None:
        self.add(other.states, other.actions, other.next_states, other.rewards)

    @property
    def states(self) -> np.ndarray:
        return self._rows[:, : self.state_dim]

    @property
    def actions(self) -> np.ndarray:
        k = self.state_dim
        return self._rows[:, k: k + self.action_dim]

    @property
    def next_states(self) -> np.ndarray:
        k, m = self.state_dim, self.action_dim
        return self._rows[:, k + m: 2 * k + m]

    @property
    def rewards(self) -> np.ndarray:
        return self._rows[:, -1]

    def subset(self, idx) -> TransitionDataset:
        out = TransitionDataset(self.state_dim, self.action_dim, self.capacity)
        out._rows = self._rows[idx].copy()
        return out

    def split(self, frac: float, rng: np.random.Generator):
        """Random disjoint ``(train, heldout)`` split with ``frac`` going to train."""
        perm = rng.permutation(len(self))
        n = int(round(frac * len(self)))
        return self.subset(perm[:n]), self.subset(perm[n:])

    def sample(self, n: int, rng: np.random.Generator) -> TransitionDataset:
        return self.subset(rng.integers(0, len(self), size=n))

    # Text layout: comment header, then one transition per line with columns
    # s[0..k-1] a[0..m-1] s_next[0..k-1] r.
    def save(self, path) -> None:
        header = (f"certrl-transitions v1 k={self.state_dim} m={self.action_dim}\n"
                  "columns: s a s_next r")
        np.savetxt(path, self._rows, fmt="%.17g", header=header)

    @classmethod
    def load(cls, path, capacity: int = 100_000) -> TransitionDataset:
        with open(path) as fh:
            first = fh.readline()
        if "certrl-transitions" not in first:
            raise ValueError(f"{path}: not a transition file")
        fields = dict(tok.split("=") for tok in first.split() if "=" in tok)
        ds = cls(int(fields["k"]), int(fields["m"]), capacity)
        rows = np.loadtxt(path, ndmin=2)
        if rows.size:
            ds._rows = rows.reshape(-1, ds.width)
        return ds


@dataclass
class GaussianPolicy:
    mean_net: Mlp
    log_sigma: np.ndarray
    deterministic_eval: bool = True

    def __post_init__(self):
        self.log_sigma = np.asarray(self.log_sigma, dtype=float).reshape(-1)
        if self.log_sigma.shape != (self.mean_net.output_dim,):
            raise ValueError("log_sigma must match the action dimension")

    @property
    def state_dim(self) -> int:
        return self.mean_net.input_dim

    @property
    def action_dim(self) -> int:
        return self.mean_net.output_dim

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def act(self, s, z=None) -> np.ndarray:
        """``mean(s) + sigma * z``; ``z=None`` gives the mean action."""
        a = self.mean_net.forward(s)
        return a if z is None else a + self.sigma * z

    def act_abs(self, box: Box, z=None) -> Box:
        out = self.mean_net.forward_abs(box)
        return out if z is None else out.shift(self.sigma * z)

    def save(self, path) -> None:
        path = Path(path)
        self.mean_net.save(path)
        meta = {"log_sigma": [repr(float(v)) for v in self.log_sigma],
                "deterministic_eval": self.deterministic_eval}
        Path(f"{path}.meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> GaussianPolicy:
        net = Mlp.load(path)
        meta = json.loads(Path(f"{path}.meta.json").read_text())
        return cls(net, [float(v) for v in meta["log_sigma"]], bool(meta["deterministic_eval"]))


@dataclass
class GaussianModel:
    """Learned (or exact) dynamics with residual mean and diagonal noise.

    ``log_sigma`` has one entry per state dimension plus one for the reward.
    Only the state entries are used when rolling out; rewards are taken at the
    mean.
    """

    mean_net: Mlp
    log_sigma: np.ndarray
    state_dim: int
    eps_E: float = 0.0
    delta_E: float = 0.0
    d_E: float = 0.0
    reward_mode: str = "learned"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.log_sigma = np.asarray(self.log_sigma, dtype=float).reshape(-1)
        if self.mean_net.output_dim != self.state_dim + 1:
            raise ValueError("model mean net must output state_dim + 1 values")
        if self.log_sigma.shape != (self.state_dim + 1,):
            raise ValueError("log_sigma must have state_dim + 1 entries")
        if self.eps_E < 0:
            raise ValueError("eps_E must be nonnegative")

    @property
    def action_dim(self) -> int:
        return self.mean_net.input_dim - self.state_dim

    @property
    def state_sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma[: self.state_dim])

    def predict(self, s, a, z=None):
        """Next state and reward; ``z`` is a standard-normal draw for the state noise."""
        s = np.asarray(s, dtype=float)
        y = self.mean_net.forward(np.concatenate([s, np.asarray(a, dtype=float)], axis=-1))
        s_next = s + y[..., : self.state_dim]
        if z is not None:
            s_next = s_next + self.state_sigma * z
        return s_next, y[..., self.state_dim]

    def predict_abs(self, s_box: Box, a_box: Box, z=None):
        """Abstract next state (widened by ``eps_E``) and reward box."""
        y = self.mean_net.forward_abs(concat(s_box, a_box))
        s_next = s_box + y[: self.state_dim]
        if z is not None:
            s_next = s_next.shift(self.state_sigma * z)
        return s_next.widen(self.eps_E), y[self.state_dim:]

    def metadata(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "log_sigma": [repr(float(v)) for v in self.log_sigma],
            "eps_E": repr(float(self.eps_E)),
            "delta_E": repr(float(self.delta_E)),
            "d_E": repr(float(self.d_E)),
            "reward_mode": self.reward_mode,
            **self.extra,
        }

    def save(self, path) -> None:
        path = Path(path)
        self.mean_net.save(path)
        Path(f"{path}.meta.json").write_text(
            json.dumps(self.metadata(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> GaussianModel:
        net = Mlp.load(path)
        meta = json.loads(Path(f"{path}.meta.json").read_text())
        known = {"state_dim", "log_sigma", "eps_E", "delta_E", "d_E", "reward_mode"}
        return cls(
            net,
            [float(v) for v in meta["log_sigma"]],
            int(meta["state_dim"]),
            eps_E=float(meta["eps_E"]),
            delta_E=float(meta["delta_E"]),
            d_E=float(meta["d_E"]),
            reward_mode=meta.get("reward_mode", "learned"),
            extra={k: v for k, v in meta.items() if k not in known},
        )


def _targets(data: TransitionDataset) -> np.ndarray:
    return np.hstack([data.next_states - data.states, data.rewards[:, None]])


def fit_model(
    data: TransitionDataset,
    epochs: int = 50,
    lr: float = 3e-3,
    rng: np.random.Generator | None = None,
    *,
    model: GaussianModel | None = None,
    hidden: tuple = (64, 64),
    activation: str = "relu",
    batch_size: int = 256,
) -> GaussianModel:
    """Maximum-likelihood fit of a diagonal Gaussian over ``(s' - s, r)``.

    Passing ``model`` warm-starts from (and updates) an existing model.
    One epoch is one pass over the data in shuffled minibatches.
    """
    if len(data) == 0:
        raise ValueError("cannot fit a model on an empty dataset")
    rng = np.random.default_rng() if rng is None else rng
    k, m = data.state_dim, data.action_dim
    x_all = np.hstack([data.states, data.actions])
    y_all = _targets(data)
    if model is None:
        net = Mlp.init((k + m, *hidden, k + 1), activation, rng)
        spread = np.log(np.std(y_all, axis=0) + 1e-3) if len(data) > 1 else np.zeros(k + 1)
        model = GaussianModel(net, np.clip(spread, LOG_SIGMA_MIN, LOG_SIGMA_MAX), k)
    params = model.mean_net.params() + [model.log_sigma]
    opt = Adam(params, lr=lr)
    n = len(data)
    bs = min(batch_size, n)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            idx = perm[start: start + bs]
            x, y = x_all[idx], y_all[idx]
            mu, cache = model.mean_net.forward_cached(x)
            inv_var = np.exp(-2.0 * model.log_sigma)
            resid = y - mu
            nll = 0.5 * np.mean(np.sum(resid ** 2 * inv_var + 2.0 * model.log_sigma, axis=1))
            if not math.isfinite(nll):
                raise FloatingPointError(f"model fit diverged at epoch {epoch}: nll={nll}")
            g_mu = -resid * inv_var / len(idx)
            grads, _ = model.mean_net.vjp(cache, g_mu)
            g_ls = np.mean(1.0 - resid ** 2 * inv_var, axis=0)
            opt.step(grads.arrays() + [g_ls])
            np.clip(model.log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX, out=model.log_sigma)
    return model


def nearest_rank_quantile(values, q: float) -> float:
    """Smallest value with at least a ``q`` fraction of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("quantile of an empty sample")
    rank = max(1, math.ceil(round(q * v.size, 9)))
    return float(v[min(rank, v.size) - 1])


def state_residuals(model: GaussianModel, data: TransitionDataset) -> np.ndarray:
    """Per-record ``||(s' - s) - ds_mean(s, a)||_inf``."""
    y = model.mean_net.forward(np.hstack([data.states, data.actions]))
    diff = (data.next_states - data.states) - y[:, : model.state_dim]
    return np.max(np.abs(diff), axis=1)


def measure_model_error(model: GaussianModel, heldout: TransitionDataset, delta_E: float):
    """Return ``(eps_E, d_E)``: the ``1 - delta_E`` residual quantile and the max residual."""
    if len(heldout) == 0:
        raise ValueError("held-out set is empty")
    if not 0.0 <= delta_E < 1.0:
        raise ValueError("delta_E must lie in [0, 1)")
    res = state_residuals(model, heldout)
    return nearest_rank_quantile(res, 1.0 - delta_E), float(res.max())
