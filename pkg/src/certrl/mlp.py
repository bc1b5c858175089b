"""Dense feed-forward networks with concrete and interval forward passes.

Reverse mode is written out by hand for the fixed layer topology. Both the
concrete pass and the interval (IBP) pass keep a per-layer cache so that
vector-Jacobian products can be taken with respect to parameters and inputs.
Inputs may carry leading batch dimensions; parameter gradients are summed
over them.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .box import ACTIVATIONS, Box

_MAGIC = "certrl-mlp v1"


def _act_grad(name, z, y):
    """Derivative of activation ``name`` at pre-activation ``z`` (``y = g(z)``)."""
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(float)
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class ParamGradient:
    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, net: Mlp) -> ParamGradient:
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def arrays(self) -> list:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def __add__(self, other: ParamGradient) -> ParamGradient:
        return ParamGradient(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def __mul__(self, k: float) -> ParamGradient:
        return ParamGradient([k * w for w in self.weights], [k * b for b in self.biases])

    __rmul__ = __mul__

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class Mlp:
    """Layers ``y = act(W x + b)``; weights are stored ``(out, in)``."""

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        self.activations = list(self.activations)
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        if not self.weights:
            raise ValueError("an Mlp needs at least one layer")
        for i, (w, b, a) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not conform")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives "
                                 f"{self.weights[i - 1].shape[0]}")
            if a not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {a!r}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @classmethod
    def init(cls, sizes, activations, rng: np.random.Generator) -> Mlp:
        """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialization."""
        if isinstance(activations, str):
            activations = [activations] * (len(sizes) - 2) + ["identity"]
        ws, bs = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            k = 1.0 / np.sqrt(n_in)
            ws.append(rng.uniform(-k, k, size=(n_out, n_in)))
            bs.append(rng.uniform(-k, k, size=n_out))
        return cls(ws, bs, activations)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list:
        """Parameter arrays in ``ParamGradient.arrays()`` order (live references)."""
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def copy(self) -> Mlp:
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   list(self.activations))

    def _check_input(self, n):
        if n != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {n}")

    # -- concrete pass ----------------------------------------------------

    def forward_cached(self, x):
        x = np.asarray(x, dtype=float)
        self._check_input(x.shape[-1])
        cache = []
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w.T + b
            y = ACTIVATIONS[act](z)
            cache.append((h, z, y))
            h = y
        return h, cache

    def forward(self, x) -> np.ndarray:
        y, _ = self.forward_cached(x)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError("non-finite network output")
        return y

    __call__ = forward

    def vjp(self, cache, upstream, param_grads: bool = True):
        """Pull ``upstream`` (d out) back to parameters and to the input."""
        g = np.asarray(upstream, dtype=float)
        grads = ParamGradient.zeros_like(self) if param_grads else None
        for i in reversed(range(self.n_layers)):
            h, z, y = cache[i]
            gz = g * _act_grad(self.activations[i], z, y)
            if param_grads:
                grads.weights[i] = gz.reshape(-1, gz.shape[-1]).T @ h.reshape(-1, h.shape[-1])
                grads.biases[i] = gz.reshape(-1, gz.shape[-1]).sum(axis=0)
            g = gz @ self.weights[i]
        return grads, g

    def backward(self, x, upstream) -> ParamGradient:
        """Gradient of ``<upstream, forward(x)>`` with respect to the parameters."""
        y, cache = self.forward_cached(x)
        upstream = np.asarray(upstream, dtype=float)
        if upstream.shape != y.shape:
            raise ValueError(f"upstream shape {upstream.shape} != output shape {y.shape}")
        return self.vjp(cache, upstream)[0]

    def input_grad(self, x, upstream) -> np.ndarray:
        _, cache = self.forward_cached(x)
        return self.vjp(cache, upstream, param_grads=False)[1]

    # -- interval pass ----------------------------------------------------

    def forward_abs_cached(self, box: Box):
        self._check_input(box.dim)
        c, d = box.center, box.deviation
        cache = []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            zc = c @ w.T + b
            zd = d @ np.abs(w).T
            if act == "identity":
                cache.append((c, d, zc, zd, None))
                c, d = zc, zd
                continue
            g = ACTIVATIONS[act]
            z_hi, z_lo = zc + zd, zc - zd
            y_hi, y_lo = g(z_hi), g(z_lo)
            cache.append((c, d, zc, zd, (z_hi, z_lo, y_hi, y_lo)))
            c = (y_hi + y_lo) / 2.0
            d = np.maximum((y_hi - y_lo) / 2.0, 0.0)
        return Box(c, d), cache

    def forward_abs(self, box: Box) -> Box:
        out, _ = self.forward_abs_cached(box)
        return out

    def vjp_abs(self, cache, g_center, g_dev, param_grads: bool = True):
        """Pull gradients on the output box (center, deviation) back through IBP.

        The deviation path goes through ``|W|``, so its weight gradient carries
        ``sign(W)``.
        """
        gc = np.asarray(g_center, dtype=float)
        gd = np.asarray(g_dev, dtype=float)
        grads = ParamGradient.zeros_like(self) if param_grads else None
        for i in reversed(range(self.n_layers)):
            c, d, zc, zd, acts = cache[i]
            w = self.weights[i]
            if acts is None:
                gzc, gzd = gc, gd
            else:
                z_hi, z_lo, y_hi, y_lo = acts
                name = self.activations[i]
                g_hi = 0.5 * (gc + gd) * _act_grad(name, z_hi, y_hi)
                g_lo = 0.5 * (gc - gd) * _act_grad(name, z_lo, y_lo)
                gzc, gzd = g_hi + g_lo, g_hi - g_lo
            if param_grads:
                gzc2 = gzc.reshape(-1, gzc.shape[-1])
                gzd2 = gzd.reshape(-1, gzd.shape[-1])
                grads.weights[i] = (gzc2.T @ c.reshape(-1, c.shape[-1])
                                    + np.sign(w) * (gzd2.T @ d.reshape(-1, d.shape[-1])))
                grads.biases[i] = gzc2.sum(axis=0)
            gc = gzc @ w
            gd = gzd @ np.abs(w)
        return grads, gc, gd

    def backward_abs(self, box: Box, upstream_center, upstream_dev) -> ParamGradient:
        """Gradient of ``<uc, out.center> + <ud, out.deviation>`` w.r.t. the parameters."""
        out, cache = self.forward_abs_cached(box)
        uc = np.broadcast_to(np.asarray(upstream_center, dtype=float), out.center.shape)
        ud = np.broadcast_to(np.asarray(upstream_dev, dtype=float), out.deviation.shape)
        return self.vjp_abs(cache, uc, ud)[0]

    # -- misc ------------------------------------------------------------

    def lipschitz_upper(self) -> float:
        """Product of induced inf-norms; activations here are all 1-Lipschitz."""
        return float(np.prod([np.abs(w).sum(axis=1).max() for w in self.weights]))

    def apply_update(self, steps: list) -> None:
        for p, s in zip(self.params(), steps):
            p -= s

    # -- checkpoint text format ---------------------------------------------

    def dumps(self) -> str:
        out = io.StringIO()
        out.write(f"{_MAGIC}\n")
        out.write(f"layers {self.n_layers}\n")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            out.write(f"layer {w.shape[0]} {w.shape[1]} {act}\n")
            out.write(" ".join(f"{v:.17g}" for v in w.ravel()) + "\n")
            out.write(" ".join(f"{v:.17g}" for v in b) + "\n")
        return out.getvalue()

    @classmethod
    def loads(cls, text: str) -> Mlp:
        lines = text.splitlines()
        if not lines or lines[0].strip() != _MAGIC:
            raise ValueError("not an Mlp checkpoint")
        try:
            n = int(lines[1].split()[1])
            ws, bs, acts = [], [], []
            pos = 2
            for _ in range(n):
                _, n_out, n_in, act = lines[pos].split()
                n_out, n_in = int(n_out), int(n_in)
                w = np.array([float(v) for v in lines[pos + 1].split()]).reshape(n_out, n_in)
                b = np.array([float(v) for v in lines[pos + 2].split()]).reshape(n_out)
                ws.append(w)
                bs.append(b)
                acts.append(act)
                pos += 3
        except (IndexError, ValueError) as err:
            raise ValueError(f"corrupt Mlp checkpoint: {err}") from err
        return cls(ws, bs, acts)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> Mlp:
        return cls.loads(Path(path).read_text())


def forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def forward_abs(net: Mlp, box: Box) -> Box:
    return net.forward_abs(box)


def backward(net: Mlp, x, upstream) -> ParamGradient:
    return net.backward(x, upstream)


def backward_abs(net: Mlp, box: Box, upstream_center, upstream_dev) -> ParamGradient:
    return net.backward_abs(box, upstream_center, upstream_dev)


def lipschitz_upper(net: Mlp) -> float:
    return net.lipschitz_upper()


class Adam:
    """Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params: list, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list) -> None:
        self.t += 1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            m_hat = m / (1 - self.b1 ** self.t)
            v_hat = v / (1 - self.b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
