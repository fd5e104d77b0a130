"""Run configuration: a nested YAML document validated by pydantic.

Unknown keys are rejected at every level.  ``dump_config`` followed by
``load_config`` reproduces the same object.

Example::

    system: {name: harmonic-1, params: {k: 1.0}}
    observables: [q]
    model: {variant: fixed-beta, beta: 1.0, lambda0: [0.5]}
    weights: 1.0
    sampling: {N: 100000, seed: 7}
    run: {regimes: [linear-nonstationary, ensemble], T: 10.0, dt: 0.001, out: results}
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

REGIMES = ("adiabatic", "linear-stationary", "linear-nonstationary", "nonlinear-stationary", "ensemble")
Regime = Literal["adiabatic", "linear-stationary", "linear-nonstationary", "nonlinear-stationary", "ensemble"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SystemConfig(_Strict):
    name: str
    params: dict[str, Union[int, float, List[float]]] = Field(default_factory=dict)


class ModelConfig(_Strict):
    variant: Literal["fixed-beta", "fixed-energy"] = "fixed-beta"
    beta: Optional[float] = None
    energy: Optional[float] = None
    lambda0: List[float]

    @model_validator(mode="after")
    def _check_temperature(self):
        if self.variant == "fixed-beta" and self.beta is None:
            raise ValueError("field 'beta' is required when variant is fixed-beta")
        if self.variant == "fixed-energy" and self.beta is None and self.energy is None:
            raise ValueError("fixed-energy needs field 'energy' or field 'beta'")
        if self.beta is not None and not self.beta > 0:
            raise ValueError("field 'beta' must be positive")
        return self


class SamplingConfig(_Strict):
    N: int = Field(100_000, gt=19)
    seed: int = 0
    burn_in: int = Field(10_000, ge=0)
    thinning: int = Field(10, ge=1)
    force_mcmc: bool = False


class EnsembleConfig(_Strict):
    N: Optional[int] = Field(None, gt=19)
    dt: Optional[float] = Field(None, gt=0)
    max_outputs: int = Field(400, ge=2)
    threads: int = Field(1, ge=1)


class RunSection(_Strict):
    regimes: List[Regime] = Field(default_factory=lambda: ["linear-stationary"])
    T: float = Field(10.0, gt=0)
    dt: float = Field(1e-3, gt=0)
    stride: int = Field(10, ge=1)
    out: str = "results"
    normalize: bool = False

    @field_validator("regimes")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("at least one regime is required")
        if len(set(v)) != len(v):
            raise ValueError("regimes must not repeat")
        return v


class ValidateConfig(_Strict):
    closure: Optional[Regime] = None
    threshold: float = Field(3.0, gt=0)
    plateau_frac: float = Field(0.1, gt=0)
    window_tc: Optional[float] = Field(None, gt=0)
    fit_weight_max: float = Field(10.0, gt=0)


class RunConfig(_Strict):
    system: SystemConfig
    model: ModelConfig
    observables: Optional[List[str]] = None
    weights: Union[float, List[float], Literal["fit"]] = 1.0
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    run: RunSection = Field(default_factory=RunSection)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    validate_: ValidateConfig = Field(default_factory=ValidateConfig, alias="validate")

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    @field_validator("weights")
    @classmethod
    def _nonnegative(cls, v):
        vals = [v] if isinstance(v, float) else (v if isinstance(v, list) else [])
        if any(x < 0 for x in vals):
            raise ValueError("weights must be non-negative")
        return v

    @model_validator(mode="after")
    def _fit_needs_ensemble(self):
        if self.weights == "fit" and "ensemble" not in self.run.regimes:
            raise ValueError("weights: fit requires the ensemble regime")
        return self

    def with_overrides(self, seed=None, out=None, threads=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = cfg.model_copy(update={"sampling": cfg.sampling.model_copy(update={"seed": int(seed)})})
        if out is not None:
            cfg = cfg.model_copy(update={"run": cfg.run.model_copy(update={"out": str(out)})})
        if threads is not None:
            cfg = cfg.model_copy(update={"ensemble": cfg.ensemble.model_copy(update={"threads": int(threads)})})
        return cfg


def _format_errors(exc: ValidationError, source):
    parts = []
    for e in exc.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return f"invalid config {source}: " + "; ".join(parts)


def parse_config(data: dict, source="<dict>") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"invalid config {source}: top level must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, source)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return parse_config(data, str(path))


def config_dict(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json", by_alias=True)


def dump_config(cfg: RunConfig, path=None) -> str:
    text = yaml.safe_dump(config_dict(cfg), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text
