"""Reaction terms and the damped Picard iteration.

Species are indexed from 0 in the Python API. Each built-in kind splits as
``R_i(u) = -c_i u_i + explicit_i(u)`` with ``c_i >= 0``, and every surface
kind as ``F(u) = u - (u - F(u))`` (both have ``F'(0) = 1``). Picard steps keep
the linear parts in the (SPD) operator and freeze the remainders at the
previous iterate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, NonConvergenceError

log = logging.getLogger(__name__)

VOLUME_KINDS = ("linear_exchange", "saturating")
SURFACE_KINDS = ("linear", "saturating")


@dataclass
class ReactionSystem:
    n_species: int
    volume_kind: str = "linear_exchange"
    kappa: np.ndarray | None = None  # (N, N) exchange rates, diagonal ignored
    sigma: np.ndarray | None = None
    lam: np.ndarray | None = None
    surface_kind: str = "linear"
    lipschitz_volume: np.ndarray | None = None
    lipschitz_surface: np.ndarray | None = None

    def __post_init__(self):
        N = self.n_species
        if N < 2:
            raise ConfigError("reactions.n_species", "at least two species are required")
        if self.volume_kind not in VOLUME_KINDS:
            raise ConfigError("reactions.volume.kind", f"unknown kind {self.volume_kind!r}")
        if self.surface_kind not in SURFACE_KINDS:
            raise ConfigError("reactions.surface.kind", f"unknown kind {self.surface_kind!r}")
        if self.volume_kind == "linear_exchange":
            k = np.zeros((N, N)) if self.kappa is None else np.array(self.kappa, dtype=float)
            if k.shape != (N, N) or np.any(k < 0):
                raise ConfigError("reactions.volume.kappa", "need an N x N array of non-negative rates")
            np.fill_diagonal(k, 0.0)
            self.kappa = k
        else:
            self.sigma = _per_species(self.sigma, N, "reactions.volume.sigma")
            self.lam = _per_species(self.lam, N, "reactions.volume.lam")
        analytic_v = self.analytic_lipschitz_volume()
        if self.lipschitz_volume is None:
            self.lipschitz_volume = analytic_v
        else:
            self.lipschitz_volume = np.asarray(self.lipschitz_volume, dtype=float)
            if np.any(self.lipschitz_volume < analytic_v):
                raise ConfigError("reactions.lipschitz_volume", "below the analytic Lipschitz constant")
        if self.lipschitz_surface is None:
            self.lipschitz_surface = np.ones(N)
        else:
            self.lipschitz_surface = np.asarray(self.lipschitz_surface, dtype=float)
            if np.any(self.lipschitz_surface < 1.0):
                raise ConfigError("reactions.lipschitz_surface", "must be at least 1")

    def analytic_lipschitz_volume(self) -> np.ndarray:
        if self.volume_kind == "linear_exchange":
            return 2.0 * self.kappa.sum(axis=1)
        return self.sigma + self.lam

    # evaluation is vectorised: u has shape (N, ...) and the result (...)
    def R(self, i: int, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.volume_kind == "linear_exchange":
            k = self.kappa[i]
            return np.tensordot(k, u, axes=1) - k.sum() * u[i]
        nxt = (i + 1) % self.n_species
        return self.sigma[i] * np.tanh(u[nxt]) - self.lam[i] * u[i]

    def F(self, i: int, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return u if self.surface_kind == "linear" else np.tanh(u)

    @property
    def surface_linear(self) -> bool:
        return self.surface_kind == "linear"

    def implicit_rate(self, i: int) -> float:
        """``c_i`` in ``R_i(u) = -c_i u_i + explicit_i(u)``."""
        if self.volume_kind == "linear_exchange":
            return float(self.kappa[i].sum())
        return float(self.lam[i])

    def explicit_R(self, i: int, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.R(i, u) + self.implicit_rate(i) * u[i]

    def surface_remainder(self, i: int, u) -> np.ndarray:
        """``u - F(u)``: the part of ``F`` left explicit when ``u`` is implicit."""
        u = np.asarray(u, dtype=float)
        return np.zeros_like(u) if self.surface_linear else u - np.tanh(u)

    def to_dict(self) -> dict:
        vol = {"kind": self.volume_kind}
        if self.volume_kind == "linear_exchange":
            vol["kappa"] = self.kappa.tolist()
        else:
            vol["sigma"] = self.sigma.tolist()
            vol["lam"] = self.lam.tolist()
        return {"volume": vol, "surface": {"kind": self.surface_kind}}


def _per_species(v, n, key):
    if v is None:
        return np.zeros(n)
    a = np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()
    if np.any(a < 0):
        raise ConfigError(key, "values must be non-negative")
    return a


def eval_R(sys: ReactionSystem, i: int, u) -> float:
    return sys.R(i, u)


def eval_F(sys: ReactionSystem, i: int, u) -> float:
    return sys.F(i, u)


@dataclass(frozen=True)
class PicardConfig:
    damping: float = 1.0
    tol: float = 1e-8
    max_iter: int = 200
    auto_damping: bool = True

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ConfigError("solver.picard_damping", "damping must lie in (0, 1]")
        if not self.tol > 0:
            raise ConfigError("solver.picard_tol", "tolerance must be positive")
        if self.max_iter < 1:
            raise ConfigError("solver.picard_max_iter", "need at least one iteration")


@dataclass
class PicardResult:
    fields: list
    trace: list = field(default_factory=list)
    damping: float = 1.0

    @property
    def iterations(self) -> int:
        return len(self.trace)


def _euclid(fields) -> float:
    return float(np.sqrt(sum(float(np.vdot(f, f)) for f in fields)))


def picard_solve(apply: Callable, reactions: Callable, u0: Sequence, cfg: PicardConfig = PicardConfig(),
                 norm: Callable | None = None) -> PicardResult:
    """Damped fixed-point iteration ``u <- (1-theta) u + theta apply(reactions(u))``.

    ``apply(load, last_update)`` performs the linear solves for a frozen load;
    ``last_update`` is the previous relative update (None on the first step,
    0.0 when a full-accuracy solve is required) and may be used to pick an
    inner tolerance. Stops when the relative update ``|u_new - u| / |u_new|``
    drops below ``cfg.tol``, or when the frozen load repeats exactly. With ``auto_damping``
    an increase of the update after the second step switches theta to 0.5.
    """
    norm = norm or _euclid
    u = [np.array(f, dtype=float) for f in u0]
    theta = cfg.damping
    trace: list[float] = []
    previous = None
    for k in range(1, cfg.max_iter + 1):
        load = reactions(u)
        if previous is not None and all(np.array_equal(a, b) for a, b in zip(load, previous)):
            # the frozen load does not depend on u, so its solve is the fixed
            # point; re-solve it at full accuracy instead of iterating
            u = [np.asarray(f, dtype=float) for f in apply(load, 0.0)]
            return PicardResult(u, trace, theta)
        previous = load
        g = apply(load, trace[-1] if trace else None)
        new = [(1.0 - theta) * a + theta * np.asarray(b, dtype=float) for a, b in zip(u, g)]
        if not all(np.all(np.isfinite(f)) for f in new):
            raise DivergenceError(f"Picard iterate became non-finite at step {k}", trace=trace)
        diff = norm([a - b for a, b in zip(new, u)])
        size = norm(new)
        update = diff / size if size > 0 else diff
        trace.append(update)
        u = new
        log.debug("picard step %d: relative update %.3e", k, update)
        if update <= cfg.tol:
            return PicardResult(u, trace, theta)
        if cfg.auto_damping and theta == 1.0 and k >= 3 and trace[-1] > trace[-2]:
            log.info("picard trace not monotone at step %d; damping with theta=0.5", k)
            theta = 0.5
    raise NonConvergenceError(f"Picard did not converge in {cfg.max_iter} steps", residual=trace[-1], trace=trace)
