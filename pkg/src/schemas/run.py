# src/schemas/run.py
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from src.core.config import settings
from src.core.exceptions import ConfigurationError
from src.schemas.engine import EngineParams, FlywheelParams
from src.schemas.evolution import IntegrationConfig

EngineTag = Literal["2qe-reset", "2qe-local", "3qe-effective", "3qe-full"]
ModelSelector = Literal["2qe-reset", "2qe-local", "3qe-effective", "3qe-full", "flywheel"]

ENGINE_KEYS = {"E1", "E2", "E_v", "beta1", "beta2", "beta1E1", "beta2E2", "chi", "p", "g", "g_over_p",
               "k", "p_prime", "k_over_p_prime", "g_over_p_prime"}
FLYWHEEL_KEYS = {"chi", "p0", "omega_z", "omega_0", "d", "N", "beta1", "beta2"}
INTEGRATION_KEYS = {"dt", "t_end", "sample_stride", "transient_cut", "min_r2", "n_min", "n_max"}
RUN_KEYS = {"model", "sweep", "sweep_start", "sweep_stop", "sweep_count", "sweep_scale",
            "out", "seed", "trials", "jobs", "checkpoints"}
INT_KEYS = {"N", "sample_stride", "n_min", "n_max", "sweep_count", "seed", "trials", "jobs"}


class SweepAxis(BaseModel):
    name: str
    start: float
    stop: float
    count: int = Field(1, ge=1)
    scale: Literal["linear", "log"] = "linear"

    @model_validator(mode="after")
    def _check(self):
        if self.scale == "log" and (self.start <= 0 or self.stop <= 0):
            raise ValueError(f"Log sweep of '{self.name}' needs positive end points")
        return self

    def values(self) -> List[float]:
        if self.count == 1:
            return [self.start]
        if self.scale == "log":
            return list(np.geomspace(self.start, self.stop, self.count))
        return list(np.linspace(self.start, self.stop, self.count))


class RunConfig(BaseModel):
    """One CLI run: model selection, parameter assignments, optional sweep, output and seed."""
    models: Tuple[ModelSelector, ...] = Field(("2qe-reset",), description="One or more models to run.")
    params: Dict[str, float] = Field(default_factory=dict)
    sweep: Optional[SweepAxis] = None
    integration: Dict[str, float] = Field(default_factory=dict)
    out: Optional[str] = None
    seed: int = Field(0, ge=0, lt=2 ** 64)
    trials: int = Field(10000, ge=1)
    jobs: Optional[int] = Field(None, ge=1)
    checkpoints: List[int] = Field(default_factory=list)

    @field_validator("models")
    @classmethod
    def _not_mixed(cls, models):
        if "flywheel" in models and len(models) > 1:
            raise ValueError("The flywheel model cannot be combined with engine models in one run")
        return models

    @model_validator(mode="after")
    def _known_names(self):
        allowed = FLYWHEEL_KEYS if self.is_flywheel else ENGINE_KEYS
        unknown = set(self.params) - allowed
        if unknown:
            raise ValueError(f"Parameters {sorted(unknown)} do not apply to {', '.join(self.models)}")
        if self.sweep is not None and self.sweep.name not in allowed:
            raise ValueError(f"Cannot sweep '{self.sweep.name}' for {', '.join(self.models)}")
        N = int(self.params.get("N", 1000))
        outside = [c for c in self.checkpoints if not 0 <= c <= N]
        if outside:
            raise ValueError(f"Checkpoints {outside} lie outside 0..{N}")
        return self

    @classmethod
    def from_assignments(cls, assignments: Dict[str, str]) -> "RunConfig":
        """Build from flat key = value strings; unknown keys are configuration errors."""
        known = ENGINE_KEYS | FLYWHEEL_KEYS | INTEGRATION_KEYS | RUN_KEYS
        unknown = sorted(set(assignments) - known)
        if unknown:
            raise ConfigurationError(f"Unknown configuration keys: {', '.join(unknown)}")
        try:
            values = {k: _coerce(k, v) for k, v in assignments.items()}
            sweep = None
            if "sweep" in values:
                sweep = SweepAxis(
                    name=values["sweep"], start=values.get("sweep_start", 0.0),
                    stop=values.get("sweep_stop", values.get("sweep_start", 0.0)),
                    count=values.get("sweep_count", 1), scale=values.get("sweep_scale", "linear"),
                )
            return cls(
                models=tuple(m.strip() for m in values.get("model", "2qe-reset").split(",") if m.strip()),
                params={k: v for k, v in values.items() if k in ENGINE_KEYS | FLYWHEEL_KEYS},
                sweep=sweep,
                integration={k: v for k, v in values.items() if k in INTEGRATION_KEYS},
                out=values.get("out"),
                seed=values.get("seed", 0),
                trials=values.get("trials", 10000),
                jobs=values.get("jobs"),
                checkpoints=values.get("checkpoints", []),
            )
        except (ValidationError, ValueError) as e:
            raise ConfigurationError(str(e)) from e

    @property
    def is_flywheel(self) -> bool:
        return self.models == ("flywheel",)

    def points(self) -> List[Optional[float]]:
        return self.sweep.values() if self.sweep is not None else [None]

    def _values(self, point: Optional[float]) -> Dict[str, float]:
        values = dict(self.params)
        if point is not None:
            values[self.sweep.name] = point
        return values

    def engine_params(self, point: Optional[float] = None) -> EngineParams:
        """Engine constants at one sweep point; defaults are beta1 E1 = 3, beta2 E2 = 1, E1 = E_v = p = 1."""
        v = self._values(point)
        E1 = v.get("E1", 1.0)
        E2 = E1 + v["E_v"] if "E_v" in v else v.get("E2", E1 + 1.0)
        beta1 = v["beta1E1"] / E1 if "beta1E1" in v else v.get("beta1", 3.0 / E1)
        if "beta2E2" in v:
            beta2 = v["beta2E2"] / E2
        elif "chi" in v:
            beta2 = (beta1 * E1 - v["chi"]) / E2
        else:
            beta2 = v.get("beta2", 1.0 / E2)
        p = v.get("p", 1.0)
        p_prime = v.get("p_prime")
        g = v["g_over_p"] * p if "g_over_p" in v else v.get("g", 0.0)
        k = v.get("k", 0.0)
        if p_prime is not None:
            g = v["g_over_p_prime"] * p_prime if "g_over_p_prime" in v else g
            k = v["k_over_p_prime"] * p_prime if "k_over_p_prime" in v else k
        return EngineParams(E1=E1, E2=E2, beta1=beta1, beta2=beta2, p=p, g=g, k=k, p_prime=p_prime)

    def flywheel_params(self, point: Optional[float] = None) -> FlywheelParams:
        v = self._values(point)
        shared = {"omega_z": v.get("omega_z", 20.0), "omega_0": v.get("omega_0", 1.0),
                  "d": v.get("d", 0.1), "N": int(v.get("N", 1000))}
        if "p0" in v or ("beta1" not in v and "beta2" not in v):
            return FlywheelParams.from_bias(chi=v.get("chi", 2.0), p0=v.get("p0", 0.6), **shared)
        return FlywheelParams(beta1=v.get("beta1", 0.0), beta2=v.get("beta2", 0.0), **shared)

    def integration_config(self) -> IntegrationConfig:
        overrides = {k: v for k, v in self.integration.items() if k not in ("n_min", "n_max")}
        return IntegrationConfig(**overrides)

    def window(self) -> Optional[Tuple[int, int]]:
        if "n_min" not in self.integration and "n_max" not in self.integration:
            return None
        return (int(self.integration.get("n_min", settings.DEFAULT_N_MIN)),
                int(self.integration.get("n_max", settings.DEFAULT_N_MAX)))


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if key in ("model", "sweep", "sweep_scale", "out"):
        return raw
    if key == "checkpoints":
        return [int(x) for x in raw.replace(",", " ").split()]
    if key in INT_KEYS:
        return int(raw)
    return float(raw)
