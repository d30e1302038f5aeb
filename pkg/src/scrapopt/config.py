"""Run configuration: strict YAML/JSON parsing into validated models."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from scrapopt.model import DensityMatrix, SystemParams
from scrapopt.pulses import PulseSet, reference_gaussian_pulses, standard_scrap_pulses
from scrapopt.sweep import DetuningGrid

PRESETS = ("fig2", "fig3", "fig4-points", "decay")


class ConfigError(ValueError):
    pass


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SystemConfig(Strict):
    gamma: float = Field(0.0, ge=0)
    omega0_cap: float = Field(50.0, gt=0)
    s0_cap: float = Field(200.0, gt=0)
    t_start: float = -4.0
    t_end: float = 4.0
    n_steps: int = Field(800, ge=1)

    @model_validator(mode="after")
    def _window(self):
        if not self.t_end > self.t_start:
            raise ValueError("t_end must be greater than t_start")
        return self


class PointConfig(Strict):
    delta_p: float = 30.0
    delta_s: float = 45.0


class TermConfig(Strict):
    h: float = Field(ge=0)
    tau: float
    sigma: float = Field(gt=0)


class PulsesConfig(Strict):
    kind: Literal["table1", "reference", "zero", "explicit", "file"] = "table1"
    omega0: float = Field(50.0, ge=0)
    s0: float = Field(200.0, ge=0)
    tau_p: float = -1.0
    tau_s: float = -2.0
    t_p: float = Field(1.0, gt=0)
    t_s: float = Field(1.0, gt=0)
    t_st: float = Field(2.0, gt=0)
    q: int = Field(9, ge=1)
    terms: Optional[dict[str, List[TermConfig]]] = None
    path: Optional[str] = None

    @model_validator(mode="after")
    def _kind_fields(self):
        if self.kind == "explicit" and self.terms is None:
            raise ValueError("explicit pulses need 'terms'")
        if self.kind == "file" and self.path is None:
            raise ValueError("file pulses need 'path'")
        return self


class GridConfig(Strict):
    x_min: float = -80.0
    x_max: float = -2.0
    nx: int = Field(60, ge=1)
    y_min: float = 2.0
    y_max: float = 120.0
    ny: int = Field(60, ge=1)

    def build(self) -> DetuningGrid:
        return DetuningGrid.linspace(self.x_min, self.x_max, self.nx, self.y_min, self.y_max, self.ny)


class GreedyConfig(Strict):
    candidates: List[Tuple[float, float]] = Field(min_length=1)
    budget: int = Field(1, ge=1)
    grid: GridConfig = GridConfig()


class OptimizeConfig(Strict):
    detuning_points: Optional[List[Tuple[float, float]]] = None
    greedy: Optional[GreedyConfig] = None
    kappa: float = Field(1.1, gt=0)
    width_floor: float = Field(0.5, gt=0)
    width_ceiling: float = Field(4.0, gt=0)
    envelope_slack: float = Field(0.01, ge=0)
    penalty_weight: float = Field(10.0, ge=0)
    max_iter: int = Field(500, ge=0)
    gtol: float = Field(1e-6, gt=0)
    ftol: float = Field(1e-9, gt=0)
    gradient: Literal["exact", "first_order"] = "exact"
    project: bool = True

    @model_validator(mode="after")
    def _points(self):
        if self.detuning_points is None and self.greedy is None:
            raise ValueError("optimize needs 'detuning_points' or a 'greedy' block")
        if self.detuning_points is not None and self.greedy is not None:
            raise ValueError("give either 'detuning_points' or a 'greedy' block, not both")
        if self.detuning_points is not None and len(self.detuning_points) == 0:
            raise ValueError("detuning_points must not be empty")
        return self


class RunConfig(Strict):
    system: SystemConfig = SystemConfig()
    point: PointConfig = PointConfig()
    pulses: PulsesConfig = PulsesConfig()
    initial_state: int = Field(1, ge=1, le=3)
    target_state: int = Field(3, ge=1, le=3)
    grid: GridConfig = GridConfig()
    optimize: Optional[OptimizeConfig] = None

    def system_params(self) -> SystemParams:
        s = self.system
        return SystemParams(
            delta_p=self.point.delta_p,
            delta_s=self.point.delta_s,
            gamma=s.gamma,
            omega0_cap=s.omega0_cap,
            s0_cap=s.s0_cap,
            t_start=s.t_start,
            t_end=s.t_end,
            n_steps=s.n_steps,
        )

    def rho0(self):
        return DensityMatrix.projector(self.initial_state - 1).elements

    def target(self):
        return DensityMatrix.projector(self.target_state - 1).elements

    def fingerprint(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def build_pulses(cfg: PulsesConfig, base_dir: Optional[Path] = None):
    try:
        return _build_pulses(cfg, base_dir)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid pulses: {exc}") from exc


def _build_pulses(cfg: PulsesConfig, base_dir: Optional[Path]):
    args = (cfg.omega0, cfg.s0, cfg.tau_p, cfg.tau_s, cfg.t_p, cfg.t_s, cfg.t_st)
    if cfg.kind == "table1":
        return standard_scrap_pulses(*args)
    if cfg.kind == "reference":
        return reference_gaussian_pulses(*args)
    if cfg.kind == "zero":
        return PulseSet.zeros(cfg.q)
    if cfg.kind == "explicit":
        return PulseSet.from_dict({k: [t.model_dump() for t in v] for k, v in cfg.terms.items()})
    path = Path(cfg.path)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return load_pulses(path)


def load_pulses(path) -> PulseSet:
    """Read a PulseSet from a bare pulse JSON or an optimiser output file."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read pulses from {path}: {exc}") from exc
    if "pulses" in data:
        data = data["pulses"]
    try:
        return PulseSet.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid pulses in {path}: {exc}") from exc


def parse_config(data) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
        data = yaml.safe_load(text)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(data)


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("scrapopt.presets").joinpath(f"{name}.yaml").read_text()


def load_preset(name: str) -> RunConfig:
    return parse_config(yaml.safe_load(preset_text(name)))
