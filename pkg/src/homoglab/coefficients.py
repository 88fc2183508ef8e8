"""Periodic cell coefficients and macroscopic sources.

All are callables on point arrays ``(k, 2)``. Cell coefficients take the
micro variable ``y`` in the unit cell; sources take the macro variable ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np


@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, y):
        y = np.asarray(y)
        return np.full(y.shape[:-1], float(self.value))

    @property
    def bounds(self):
        return self.value, self.value

    def to_dict(self):
        return {"kind": "constant", **asdict(self)}


@dataclass(frozen=True)
class Smooth:
    """``base * (1 + amplitude * sin(2 pi y1) sin(2 pi y2))``."""

    base: float
    amplitude: float = 0.0

    def __call__(self, y):
        y = np.asarray(y)
        return self.base * (1.0 + self.amplitude * np.sin(2 * np.pi * y[..., 0]) * np.sin(2 * np.pi * y[..., 1]))

    @property
    def bounds(self):
        lo, hi = sorted((self.base * (1 - self.amplitude), self.base * (1 + self.amplitude)))
        return lo, hi

    def to_dict(self):
        return {"kind": "smooth", **asdict(self)}


@dataclass(frozen=True)
class Layered:
    """``v_left`` for ``y1 < split`` and ``v_right`` otherwise."""

    v_left: float
    v_right: float
    split: float = 0.5

    def __call__(self, y):
        y = np.asarray(y)
        return np.where(y[..., 0] < self.split, self.v_left, self.v_right).astype(float)

    @property
    def bounds(self):
        return min(self.v_left, self.v_right), max(self.v_left, self.v_right)

    def to_dict(self):
        return {"kind": "layered", **asdict(self)}


@dataclass(frozen=True)
class SineSource:
    """``amplitude * sin(pi x1) sin(pi x2)``; vanishes on the outer boundary."""

    amplitude: float

    def __call__(self, x):
        x = np.asarray(x)
        return self.amplitude * np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])

    def to_dict(self):
        return {"kind": "sine", **asdict(self)}


def from_dict(d: dict):
    kind = d["kind"]
    args = {k: v for k, v in d.items() if k != "kind"}
    return {"constant": Constant, "smooth": Smooth, "layered": Layered, "sine": SineSource}[kind](**args)
