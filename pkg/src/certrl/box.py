"""Interval (box) abstract domain.

A box is stored as a center and a nonnegative per-dimension deviation, so it
concretizes to ``[center - deviation, center + deviation]``. Arrays may carry
leading batch dimensions; the last axis is the vector dimension.

No outward rounding is done, so containment holds up to unit roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


ACTIVATIONS = {
    "identity": lambda x: x,
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
}


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    deviation: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        d = np.asarray(self.deviation, dtype=float)
        if c.shape != d.shape:
            raise ValueError(f"center shape {c.shape} != deviation shape {d.shape}")
        if np.any(d < 0):
            raise ValueError("box deviation must be nonnegative")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "deviation", d)

    # -- constructors -----------------------------------------------------

    @classmethod
    def from_point(cls, x) -> Box:
        """Smallest box containing the single point ``x``."""
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("cannot abstract a non-finite point")
        return cls(x, np.zeros_like(x))

    @classmethod
    def from_bounds(cls, lo, hi) -> Box:
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if np.any(lo > hi):
            raise ValueError("empty interval: lo > hi")
        return cls((hi + lo) / 2.0, (hi - lo) / 2.0)

    # -- views ------------------------------------------------------------

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.deviation

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.deviation

    @property
    def dim(self) -> int:
        return self.center.shape[-1]

    def __len__(self):
        return self.dim

    def __getitem__(self, idx) -> Box:
        return Box(self.center[..., idx], self.deviation[..., idx])

    def contains(self, x, atol: float = 0.0) -> bool:
        """True if every point of ``x`` (broadcast against the box) lies inside."""
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - atol) and np.all(x <= self.hi + atol))

    def includes(self, other: Box, atol: float = 0.0) -> bool:
        """True if ``other`` concretizes to a subset of this box."""
        return bool(
            np.all(other.lo >= self.lo - atol) and np.all(other.hi <= self.hi + atol)
        )

    def is_finite(self, limit: float = np.inf) -> bool:
        lo, hi = self.lo, self.hi
        ok = np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))
        return bool(ok and np.all(np.abs(lo) <= limit) and np.all(np.abs(hi) <= limit))

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        shape = self.center.shape if n is None else (n,) + self.center.shape
        return self.center + self.deviation * rng.uniform(-1.0, 1.0, size=shape)

    def corners(self) -> np.ndarray:
        """All ``2**dim`` vertices of an unbatched box, shape ``(2**dim, dim)``."""
        if self.center.ndim != 1:
            raise ValueError("corners() needs an unbatched box")
        signs = np.array(np.meshgrid(*[[-1.0, 1.0]] * self.dim, indexing="ij"))
        signs = signs.reshape(self.dim, -1).T
        return self.center + signs * self.deviation

    # -- transfer functions ----------------------------------------------

    def widen(self, eps) -> Box:
        """Minkowski sum with the l-inf ball of radius ``eps``."""
        eps = np.asarray(eps, dtype=float)
        if np.any(eps < 0):
            raise ValueError("widening radius must be nonnegative")
        return Box(self.center, self.deviation + eps)

    def shift(self, x) -> Box:
        """Add a concrete vector (a deviation-0 box)."""
        return Box(self.center + x, self.deviation)

    def add(self, other: Box) -> Box:
        if self.center.shape[-1] != other.center.shape[-1]:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return Box(self.center + other.center, self.deviation + other.deviation)

    __add__ = add

    def affine(self, M, bias=None) -> Box:
        M = np.asarray(M, dtype=float)
        if M.ndim != 2 or M.shape[1] != self.dim:
            raise ValueError(f"matrix shape {M.shape} does not accept dim {self.dim}")
        c = self.center @ M.T
        if bias is not None:
            bias = np.asarray(bias, dtype=float)
            if bias.shape != (M.shape[0],):
                raise ValueError(f"bias shape {bias.shape} != ({M.shape[0]},)")
            c = c + bias
        return Box(c, self.deviation @ np.abs(M).T)

    def monotone(self, g) -> Box:
        """Image under an elementwise nondecreasing function ``g``."""
        up = g(self.center + self.deviation)
        down = g(self.center - self.deviation)
        # clamp guards against g(hi) < g(lo) by one ulp in saturated regimes
        return Box((up + down) / 2.0, np.maximum((up - down) / 2.0, 0.0))

    def activation(self, name: str) -> Box:
        if name == "identity":
            return self
        return self.monotone(ACTIVATIONS[name])

    def relu(self) -> Box:
        return self.monotone(ACTIVATIONS["relu"])

    def sigmoid(self) -> Box:
        return self.monotone(ACTIVATIONS["sigmoid"])

    def tanh(self) -> Box:
        return self.monotone(ACTIVATIONS["tanh"])

    def sum(self) -> Box:
        """Interval sum over the last axis, keeping a length-1 vector axis."""
        return Box(
            self.center.sum(axis=-1, keepdims=True),
            self.deviation.sum(axis=-1, keepdims=True),
        )


def concat(*boxes: Box) -> Box:
    return Box(
        np.concatenate([b.center for b in boxes], axis=-1),
        np.concatenate([b.deviation for b in boxes], axis=-1),
    )
