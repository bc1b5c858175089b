"""Worst-case rollouts, WCAR estimation and replayable certificates.

A certificate for one sample is an :class:`AbstractTrace`: the boxes for the
true state, the observed (perturbed) state, the action and the reward at each
step, together with the standard-normal draws that resolved the policy and
model noise. Replaying the rollout from those draws must reproduce the boxes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .box import Box
from .envs import Mdp, PerturbationSpec
from .mlp import Mlp
from .model import GaussianModel, GaussianPolicy

BOUND_LIMIT = 1e12
TRACE_MAGIC = "certrl-certificate v1"


class NotCertifiable(ArithmeticError):
    """Raised when a box bound leaves ``[-1e12, 1e12]`` or stops being finite."""

    def __init__(self, step: int, what: str):
        super().__init__(f"bound explosion at step {step} ({what})")
        self.step = step
        self.what = what


@dataclass(frozen=True)
class CertConfig:
    N: int = 1000
    T: int = 2
    delta: float = 0.05
    epsilon_test: float = 1.0 / 255

    def __post_init__(self):
        if self.N < 1 or self.T < 1:
            raise ValueError("N and T must be at least 1")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.epsilon_test < 0:
            raise ValueError("epsilon_test must be nonnegative")


@dataclass(frozen=True)
class StepBoxes:
    s_orig: Box
    s_obs: Box
    a: Box
    r: Box


@dataclass
class AbstractTrace:
    steps: list
    z_pi: np.ndarray
    z_env: np.ndarray
    R_min: Box
    s0: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def lower_bound(self) -> float:
        return float(self.R_min.lo[0])

    @property
    def horizon(self) -> int:
        return len(self.steps)


def fingerprint_policy(policy: GaussianPolicy) -> str:
    h = hashlib.sha256(policy.mean_net.dumps().encode())
    h.update(" ".join(repr(float(v)) for v in policy.log_sigma).encode())
    h.update(b"1" if policy.deterministic_eval else b"0")
    return h.hexdigest()


def fingerprint_model(model: GaussianModel) -> str:
    h = hashlib.sha256(model.mean_net.dumps().encode())
    h.update(json.dumps(model.metadata(), sort_keys=True).encode())
    return h.hexdigest()


def draw_noise(rng: np.random.Generator, policy: GaussianPolicy, model: GaussianModel, T: int,
               deterministic: Optional[bool] = None):
    """Standard-normal draws ``(z_pi, z_env)`` of shapes ``(T, m)`` and ``(T, k)``.

    ``z_pi`` is drawn even for deterministic policies (then zeroed) so the
    stream position does not depend on the evaluation mode.
    """
    deterministic = policy.deterministic_eval if deterministic is None else deterministic
    z_pi = rng.standard_normal((T, policy.action_dim))
    z_env = rng.standard_normal((T, model.state_dim))
    if deterministic:
        z_pi = np.zeros_like(z_pi)
    return z_pi, z_env


def _check(box: Box, step: int, what: str) -> Box:
    if not box.is_finite(BOUND_LIMIT):
        raise NotCertifiable(step, what)
    return box


def abstract_rollout(policy: GaussianPolicy, model: GaussianModel, s0, spec: PerturbationSpec,
                     T: int, rng: Optional[np.random.Generator] = None, *, noise=None,
                     metadata: Optional[dict] = None) -> AbstractTrace:
    """Worst-case rollout over every admissible observation adversary.

    The noise is resolved once (``rng`` or an explicit ``noise=(z_pi, z_env)``)
    and injected as point boxes, so the trace bounds every concrete trajectory
    that shares these draws.
    """
    s0 = np.asarray(s0, dtype=float)
    if s0.shape != (model.state_dim,) or policy.state_dim != model.state_dim:
        raise ValueError("state dimensions of s0, policy and model do not agree")
    if policy.action_dim != model.action_dim:
        raise ValueError("policy action dim does not match the model")
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or an explicit noise record")
        noise = draw_noise(rng, policy, model, T)
    z_pi, z_env = (np.asarray(z, dtype=float) for z in noise)
    if len(z_pi) != T or len(z_env) != T:
        raise ValueError("noise record length does not match the horizon")

    s = Box.from_point(s0)
    total = Box.from_point([0.0])
    steps = []
    for i in range(T):
        s_obs = _check(spec.abstract(s), i, "observation")
        a = _check(policy.act_abs(s_obs, z_pi[i]), i, "action")
        s_next, r = model.predict_abs(s, a, z_env[i])
        _check(s_next, i, "state")
        _check(r, i, "reward")
        total = _check(total + r, i, "return")
        steps.append(StepBoxes(s, s_obs, a, r))
        s = s_next

    meta = {
        "epsilon": float(spec.epsilon),
        "eps_E": float(model.eps_E),
        "horizon": int(T),
        "state_dim": int(model.state_dim),
        "action_dim": int(policy.action_dim),
        "reward_mode": model.reward_mode,
    }
    meta.update(metadata or {})
    # callers certifying many samples pass the hashes in to avoid recomputing them
    if "policy_sha256" not in meta:
        meta["policy_sha256"] = fingerprint_policy(policy)
    if "model_sha256" not in meta:
        meta["model_sha256"] = fingerprint_model(model)
    return AbstractTrace(steps, z_pi, z_env, total, s0, meta)


@dataclass
class WcarResult:
    wcar: float
    variance: float
    lower_bounds: np.ndarray
    traces: list
    failures: list
    config: CertConfig

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    @property
    def certifiable(self) -> bool:
        return not self.failures


InitSource = Union[Mdp, Callable[[np.random.Generator], np.ndarray]]


def as_seed_sequence(rng) -> np.random.SeedSequence:
    if isinstance(rng, np.random.SeedSequence):
        return rng
    if isinstance(rng, np.random.Generator):
        return np.random.SeedSequence(rng.integers(0, 2 ** 63))
    return np.random.SeedSequence(int(rng))


def wcar(policy: GaussianPolicy, model: GaussianModel, env_init: InitSource, cfg: CertConfig,
         rng=0, epsilon: Optional[float] = None) -> WcarResult:
    """Mean certified lower bound over ``cfg.N`` sampled starts and noise draws.

    Each sample gets its own child seed, so results do not depend on
    evaluation order. Samples whose bounds explode are kept as NaN and make
    the overall WCAR NaN.
    """
    sample_init = env_init.sample_init if isinstance(env_init, Mdp) else env_init
    spec = PerturbationSpec(cfg.epsilon_test if epsilon is None else epsilon)
    root = as_seed_sequence(rng)
    bounds = np.full(cfg.N, np.nan)
    traces, failures = [], []
    hashes = {"policy_sha256": fingerprint_policy(policy), "model_sha256": fingerprint_model(model)}
    for i, child in enumerate(root.spawn(cfg.N)):
        gen = np.random.default_rng(child)
        s0 = sample_init(gen)
        meta = {"seed_entropy": str(root.entropy), "sample": i, **hashes}
        try:
            trace = abstract_rollout(policy, model, s0, spec, cfg.T, gen, metadata=meta)
        except NotCertifiable as err:
            failures.append((i, err.step, err.what))
            traces.append(None)
            continue
        traces.append(trace)
        bounds[i] = trace.lower_bound
    if failures:
        mean = var = math.nan
    else:
        mean = float(bounds.mean())
        var = float(bounds.var(ddof=1)) if cfg.N > 1 else 0.0
    return WcarResult(mean, var, bounds, traces, failures, cfg)


# -- probabilistic soundness bound -------------------------------------------

def _drift_fraction(x: float, T: int) -> float:
    """``(x^T + (1 - x) T - 1) / (1 - x)^2``, i.e. ``sum_{i=1..T} sum_{j<i-1} x^j``."""
    if abs(1.0 - x) < 1e-3:
        # the closed form cancels catastrophically near x = 1; sum the partial geometric series
        total, partial, power = 0.0, 0.0, 1.0
        for _ in range(T - 1):
            partial += power
            power *= x
            total += partial
        return total
    return (x ** T + (1.0 - x) * T - 1.0) / (1.0 - x) ** 2


def model_error_correction(delta_E: float, T: int, L_E: float, L_pi: float, L_r: float,
                           d_E: float) -> float:
    if delta_E == 0.0:
        return 0.0
    x = L_E * L_pi
    return (1.0 - (1.0 - delta_E) ** T) * L_r * (1.0 + L_pi) * d_E * _drift_fraction(x, T)


def theorem1_bound(wcar_mean: float, wcar_variance: float, N: int, delta: float, delta_E: float,
                   T: int, L_E: float, L_pi: float, L_r: float, d_E: float) -> float:
    """High-probability lower bound on the true worst-case expected return.

    Holds with probability at least ``1 - delta``: a Chebyshev term for the
    sampling error plus a correction for the chance that the model error
    exceeds ``eps_E`` on some step.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if not 0.0 <= delta_E < 1.0:
        raise ValueError("delta_E must lie in [0, 1)")
    sampling = math.sqrt(wcar_variance / N) / math.sqrt(delta)
    return wcar_mean - sampling - model_error_correction(delta_E, T, L_E, L_pi, L_r, d_E)


def _head(net: Mlp, rows) -> Mlp:
    out = net.copy()
    out.weights[-1] = out.weights[-1][rows]
    out.biases[-1] = out.biases[-1][rows]
    return out


def lipschitz_constants(policy: GaussianPolicy, model: GaussianModel) -> dict:
    """Upper bounds ``L_pi``, ``L_E`` (next-state map) and ``L_r`` (reward head)."""
    k = model.state_dim
    return {
        "L_pi": policy.mean_net.lipschitz_upper(),
        "L_E": 1.0 + _head(model.mean_net, slice(0, k)).lipschitz_upper(),
        "L_r": _head(model.mean_net, slice(k, k + 1)).lipschitz_upper(),
    }


def summarize(result: WcarResult, policy: GaussianPolicy, model: GaussianModel) -> dict:
    cfg = result.config
    lips = lipschitz_constants(policy, model)
    bound = math.nan
    if result.certifiable:
        bound = theorem1_bound(result.wcar, result.variance, cfg.N, cfg.delta, model.delta_E,
                               cfg.T, lips["L_E"], lips["L_pi"], lips["L_r"], model.d_E)
    return {
        "wcar": result.wcar,
        "wcar_per_step": result.wcar / cfg.T,
        "variance": result.variance,
        "N": cfg.N,
        "T": cfg.T,
        "epsilon": cfg.epsilon_test,
        "delta": cfg.delta,
        "delta_E": model.delta_E,
        "eps_E": model.eps_E,
        "d_E": model.d_E,
        "reward_mode": model.reward_mode,
        "theorem1_bound": bound,
        "n_failed": result.n_failed,
        "failures": [list(f) for f in result.failures],
        **lips,
    }


# -- verification ---------------------------------------------------------------

def verify_certificate(trace: AbstractTrace, policy: GaussianPolicy, model: GaussianModel,
                       spec: PerturbationSpec) -> bool:
    """Replay the rollout from the recorded noise and check every stored box.

    Raises ``ValueError`` when the trace was made for a different radius or
    dimensions; returns ``False`` when the checkpoints or any bound disagree.
    """
    meta = trace.metadata
    if float(meta.get("epsilon", math.nan)) != float(spec.epsilon):
        raise ValueError("certificate epsilon does not match the perturbation spec")
    if (int(meta.get("state_dim", -1)) != model.state_dim
            or int(meta.get("action_dim", -1)) != policy.action_dim):
        raise ValueError("certificate dimensions do not match policy/model")
    if meta.get("policy_sha256") != fingerprint_policy(policy):
        return False
    if meta.get("model_sha256") != fingerprint_model(model):
        return False
    try:
        replay = abstract_rollout(policy, model, trace.s0, spec, trace.horizon,
                                  noise=(trace.z_pi, trace.z_env))
    except NotCertifiable:
        return False
    for stored, fresh in zip(trace.steps, replay.steps):
        for name in ("s_orig", "s_obs", "a", "r"):
            if not getattr(stored, name).includes(getattr(fresh, name)):
                return False
    if not trace.R_min.includes(replay.R_min):
        return False
    total = Box.from_point([0.0])
    for st in trace.steps:
        total = total + st.r
    return bool(np.array_equal(total.center, trace.R_min.center)
                and np.array_equal(total.deviation, trace.R_min.deviation))


# -- certificate files ---------------------------------------------------------------

def _fmt(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in np.ravel(values))


def _fmt_box(box: Box) -> str:
    return f"{_fmt(box.center)} ; {_fmt(box.deviation)}"


def dumps_trace(trace: AbstractTrace) -> str:
    lines = [TRACE_MAGIC]
    for key in sorted(trace.metadata):
        val = trace.metadata[key]
        val = f"{val:.17g}" if isinstance(val, float) else str(val)
        lines.append(f"meta {key} {val}")
    lines.append(f"s0 {_fmt(trace.s0)}")
    for i, st in enumerate(trace.steps):
        for name in ("s_orig", "s_obs", "a", "r"):
            lines.append(f"step {i} {name} {_fmt_box(getattr(st, name))}")
        lines.append(f"noise {i} {_fmt(trace.z_pi[i])} ; {_fmt(trace.z_env[i])}")
    lines.append(f"R_min {_fmt_box(trace.R_min)}")
    lines.append(f"lower_bound {trace.lower_bound:.17g}")
    body = "\n".join(lines) + "\n"
    return body + f"sha256 {hashlib.sha256(body.encode()).hexdigest()}\n"


class CorruptCertificate(ValueError):
    pass


def _parse_vec(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split()], dtype=float)


def _parse_box(text: str) -> Box:
    c, d = text.split(";")
    return Box(_parse_vec(c), _parse_vec(d))


_INT_META = {"horizon", "state_dim", "action_dim", "sample"}
_FLOAT_META = {"epsilon", "eps_E"}


def loads_trace(text: str) -> AbstractTrace:
    """Parse a certificate file; the trailing content hash must match."""
    body, sep, tail = text.rpartition("sha256 ")
    if not sep or hashlib.sha256(body.encode()).hexdigest() != tail.strip():
        raise CorruptCertificate("content hash mismatch")
    lines = body.splitlines()
    if not lines or lines[0] != TRACE_MAGIC:
        raise CorruptCertificate("not a certificate file")
    meta, steps, noise = {}, {}, {}
    s0 = R_min = None
    try:
        for line in lines[1:]:
            tag, _, rest = line.partition(" ")
            if tag == "meta":
                key, _, val = rest.partition(" ")
                if key in _INT_META:
                    meta[key] = int(val)
                elif key in _FLOAT_META:
                    meta[key] = float(val)
                else:
                    meta[key] = val
            elif tag == "s0":
                s0 = _parse_vec(rest)
            elif tag == "step":
                i, name, box = rest.split(" ", 2)
                steps.setdefault(int(i), {})[name] = _parse_box(box)
            elif tag == "noise":
                i, vals = rest.split(" ", 1)
                zp, ze = vals.split(";")
                noise[int(i)] = (_parse_vec(zp), _parse_vec(ze))
            elif tag == "R_min":
                R_min = _parse_box(rest)
            elif tag == "lower_bound":
                pass
            else:
                raise CorruptCertificate(f"unknown record {tag!r}")
        T = len(steps)
        step_list = [StepBoxes(**steps[i]) for i in range(T)]
        z_pi = np.array([noise[i][0] for i in range(T)]).reshape(T, -1)
        z_env = np.array([noise[i][1] for i in range(T)]).reshape(T, -1)
    except (KeyError, TypeError, ValueError) as err:
        if isinstance(err, CorruptCertificate):
            raise
        raise CorruptCertificate(f"malformed certificate: {err}") from err
    if s0 is None or R_min is None:
        raise CorruptCertificate("certificate is missing s0 or R_min")
    return AbstractTrace(step_list, z_pi, z_env, R_min, s0, meta)


def save_trace(trace: AbstractTrace, path) -> str:
    text = dumps_trace(trace)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_trace(path) -> AbstractTrace:
    return loads_trace(Path(path).read_text())
