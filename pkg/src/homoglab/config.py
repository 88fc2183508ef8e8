"""Study configuration: strict JSON schema and the validated runtime spec.

The schema rejects unknown keys. Structural problems surface as pydantic
errors and invariant violations are checked afterwards; both are reported
as :class:`ConfigError` carrying the dotted key of the offending entry.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import coefficients as coef
from .errors import ConfigError, GeometryError
from .geometry import UnitCellGeometry, cells_per_side
from .nonlinear import PicardConfig, ReactionSystem


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ConstantCoef(_Strict):
    kind: Literal["constant"] = "constant"
    value: float


class SmoothCoef(_Strict):
    kind: Literal["smooth"] = "smooth"
    base: float
    amplitude: float = 0.0


class LayeredCoef(_Strict):
    kind: Literal["layered"] = "layered"
    v_left: float
    v_right: float
    split: float = 0.5


CoefModel = Annotated[Union[ConstantCoef, SmoothCoef, LayeredCoef], Field(discriminator="kind")]


class SineSourceModel(_Strict):
    kind: Literal["sine"] = "sine"
    amplitude: float


class ConstantSourceModel(_Strict):
    kind: Literal["constant"] = "constant"
    value: float


SourceModel = Annotated[Union[SineSourceModel, ConstantSourceModel], Field(discriminator="kind")]


class GeometryModel(_Strict):
    hole_center: tuple[float, float] = (0.5, 0.5)
    hole_radius: float = 0.25


class LinearExchangeModel(_Strict):
    kind: Literal["linear_exchange"] = "linear_exchange"
    kappa: list[list[float]] = [[0.0, 1.0], [1.0, 0.0]]


class SaturatingVolumeModel(_Strict):
    kind: Literal["saturating"] = "saturating"
    sigma: list[float]
    lam: list[float]


class SurfaceModel(_Strict):
    kind: Literal["linear", "saturating"] = "linear"


class ReactionsModel(_Strict):
    volume: Annotated[Union[LinearExchangeModel, SaturatingVolumeModel], Field(discriminator="kind")] = \
        LinearExchangeModel()
    surface: SurfaceModel = SurfaceModel()
    lipschitz_volume: Optional[list[float]] = None
    lipschitz_surface: Optional[list[float]] = None


class DiscretizationModel(_Strict):
    cell_h: float = 1.0 / 24.0
    macro_h: float = 1.0 / 128.0


class SolverModel(_Strict):
    cg_tol: float = 1e-10
    cg_max_iter: int = 50000
    picard_tol: float = 1e-8
    picard_max_iter: int = 200
    picard_damping: float = 1.0


class StudyModel(_Strict):
    eps_list: list[float] = [1 / 4, 1 / 8, 1 / 16, 1 / 32]
    M: int = 2
    K: int = 0


class OutputModel(_Strict):
    formats: list[Literal["csv", "json", "plotdata"]] = ["csv", "json", "plotdata"]


class ConfigModel(_Strict):
    n_species: int = 2
    diffusion: list[CoefModel] = [SmoothCoef(base=1.0, amplitude=0.5)] * 2
    deposition_a: list[CoefModel] = [ConstantCoef(value=-1.0)] * 2
    deposition_b: list[CoefModel] = [ConstantCoef(value=1.0)] * 2
    sources: list[SourceModel] = [SineSourceModel(amplitude=10.0), SineSourceModel(amplitude=5.0)]
    allow_positive_a: bool = False
    geometry: GeometryModel = GeometryModel()
    reactions: ReactionsModel = ReactionsModel()
    discretization: DiscretizationModel = DiscretizationModel()
    solver: SolverModel = SolverModel()
    study: StudyModel = StudyModel()
    output: OutputModel = OutputModel()


_TAGS = {"constant", "smooth", "layered", "sine", "linear_exchange", "saturating"}


def _dotted(loc) -> str:
    return ".".join(str(p) for p in loc if not (isinstance(p, str) and (p in _TAGS or "[" in p)))


@dataclass
class ProblemSpec:
    """Validated runtime description of one study."""

    n_species: int
    diffusion: list
    deposition_a: list
    deposition_b: list
    sources: list
    reactions: ReactionSystem
    cell: UnitCellGeometry
    cell_h: float
    macro_h: float
    cg_tol: float
    cg_max_iter: int
    picard: PicardConfig
    eps_list: list
    M: int = 2
    K: int = 0
    formats: list = field(default_factory=lambda: ["csv", "json", "plotdata"])
    raw: dict = field(default_factory=dict)

    @property
    def macro_n(self) -> int:
        n = int(np.ceil(1.0 / self.macro_h - 1e-9))
        return n + (n % 2)


def default_config() -> dict:
    return ConfigModel().model_dump(mode="json")


def _coef_obj(m):
    return coef.from_dict(m.model_dump())


def build_spec(data: dict) -> ProblemSpec:
    """Validate a configuration mapping and return the runtime spec."""
    try:
        model = ConfigModel.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(_dotted(err["loc"]), err["msg"]) from None
    N = model.n_species
    if N < 2:
        raise ConfigError("n_species", "at least two species are required")
    for key in ("diffusion", "deposition_a", "deposition_b", "sources"):
        if len(getattr(model, key)) != N:
            raise ConfigError(key, f"expected {N} entries, one per species")
    d = [_coef_obj(m) for m in model.diffusion]
    a = [_coef_obj(m) for m in model.deposition_a]
    b = [_coef_obj(m) for m in model.deposition_b]
    for i, (dm, dc) in enumerate(zip(model.diffusion, d)):
        if isinstance(dm, SmoothCoef) and not 0.0 <= dm.amplitude < 1.0:
            raise ConfigError(f"diffusion.{i}.amplitude", "amplitude must lie in [0, 1)")
        if isinstance(dm, LayeredCoef) and not 0.0 < dm.split < 1.0:
            raise ConfigError(f"diffusion.{i}.split", "split must lie in (0, 1)")
        if not dc.bounds[0] > 0:
            raise ConfigError(f"diffusion.{i}", "diffusion must be strictly positive")
    if not model.allow_positive_a:
        for i, ac in enumerate(a):
            if ac.bounds[1] > 0:
                raise ConfigError(f"deposition_a.{i}", "a must be non-positive unless allow_positive_a is set")
    g = model.geometry
    try:
        cell = UnitCellGeometry(tuple(g.hole_center), g.hole_radius)
    except GeometryError as exc:
        key = "geometry.hole_radius" if not 0 <= g.hole_radius < 0.5 else "geometry.hole_center"
        raise ConfigError(key, str(exc)) from None
    vol = model.reactions.volume
    try:
        if isinstance(vol, LinearExchangeModel):
            reactions = ReactionSystem(N, "linear_exchange", kappa=np.array(vol.kappa),
                                       surface_kind=model.reactions.surface.kind,
                                       lipschitz_volume=model.reactions.lipschitz_volume,
                                       lipschitz_surface=model.reactions.lipschitz_surface)
        else:
            if len(vol.sigma) != N or len(vol.lam) != N:
                raise ConfigError("reactions.volume", f"sigma and lam need {N} entries")
            reactions = ReactionSystem(N, "saturating", sigma=vol.sigma, lam=vol.lam,
                                       surface_kind=model.reactions.surface.kind,
                                       lipschitz_volume=model.reactions.lipschitz_volume,
                                       lipschitz_surface=model.reactions.lipschitz_surface)
    except ValueError as exc:
        raise ConfigError("reactions", str(exc)) from None
    disc = model.discretization
    if not 0 < disc.cell_h <= 0.5:
        raise ConfigError("discretization.cell_h", "cell_h must lie in (0, 0.5]")
    if not 0 < disc.macro_h <= 0.5:
        raise ConfigError("discretization.macro_h", "macro_h must lie in (0, 0.5]")
    st = model.study
    if not st.eps_list:
        raise ConfigError("study.eps_list", "at least one eps is required")
    for k, e in enumerate(st.eps_list):
        try:
            cells_per_side(e)
        except GeometryError:
            raise ConfigError(f"study.eps_list.{k}", "1/eps must be an integer") from None
    if any(x <= y for x, y in zip(st.eps_list, st.eps_list[1:])):
        raise ConfigError("study.eps_list", "eps_list must be strictly decreasing")
    if st.M != 2:
        raise ConfigError("study.M", "only M = 2 is implemented")
    if not 0 <= st.K <= st.M - 2:
        raise ConfigError("study.K", "need 0 <= K <= M - 2")
    sv = model.solver
    if not sv.cg_tol > 0:
        raise ConfigError("solver.cg_tol", "tolerance must be positive")
    picard = PicardConfig(damping=sv.picard_damping, tol=sv.picard_tol, max_iter=sv.picard_max_iter)
    return ProblemSpec(
        n_species=N, diffusion=d, deposition_a=a, deposition_b=b,
        sources=[coef.from_dict(s.model_dump()) for s in model.sources],
        reactions=reactions, cell=cell, cell_h=disc.cell_h, macro_h=disc.macro_h,
        cg_tol=sv.cg_tol, cg_max_iter=sv.cg_max_iter, picard=picard,
        eps_list=list(st.eps_list), M=st.M, K=st.K, formats=list(model.output.formats),
        raw=model.model_dump(mode="json"),
    )


def parse_config(path) -> ProblemSpec:
    p = Path(path)
    if not p.exists():
        raise ConfigError("", f"config file {p} does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{p} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("", "top level of the config must be an object")
    return build_spec(data)
