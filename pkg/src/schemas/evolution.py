# src/schemas/evolution.py
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.config import settings
from src.schemas.engine import EngineParams


class IntegrationConfig(BaseModel):
    """Fixed-step integration settings; None means derive from the model's rates."""
    model_config = ConfigDict(frozen=True)

    dt: Optional[float] = Field(None, gt=0, description="Time step.")
    t_end: Optional[float] = Field(None, gt=0, description="Integration horizon.")
    sample_stride: int = Field(default_factory=lambda: settings.SAMPLE_STRIDE, ge=1, description="Steps per recorded sample.")
    transient_cut: float = Field(default_factory=lambda: settings.TRANSIENT_CUT, ge=0, lt=1,
                                 description="Fraction of the horizon discarded before fitting.")
    rotating_frame: bool = Field(True, description="Drop H0 from the generator (exact for resonant models).")
    sector_reduction: bool = Field(True, description="Integrate only the zero-frequency sector of [H0, .].")
    check_positivity: bool = Field(False, description="Smallest-eigenvalue check at start and end.")
    leak_tolerance: float = Field(default_factory=lambda: settings.LEAK_TOLERANCE, gt=0)
    trace_tolerance: float = Field(default_factory=lambda: settings.TRACE_TOLERANCE, gt=0)
    edge_rungs: int = Field(default_factory=lambda: settings.EDGE_RUNGS, ge=1)
    min_r2: float = Field(default_factory=lambda: settings.MIN_FIT_R2, gt=0, le=1)


class ObservableSeries(BaseModel):
    """Time-stamped expectation values from one integration run."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    tag: str
    params: EngineParams
    times: np.ndarray
    values: Dict[str, np.ndarray]
    leak: np.ndarray = Field(..., description="Population on the outer ladder rungs at each sample.")
    trace: np.ndarray
    dt: float
    t_end: float
    wall_time: float = 0.0
    characteristic_rate: float = Field(..., ge=0, description="Gamma of the model that produced the series.")
    bath_rate: float = Field(..., gt=0)

    @model_validator(mode="after")
    def _check(self):
        n = len(self.times)
        for name, series in {**self.values, "leak": self.leak, "trace": self.trace}.items():
            if len(series) != n:
                raise ValueError(f"Series '{name}' has {len(series)} samples, expected {n}")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("Sample times are not strictly increasing.")
        return self

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    @property
    def variance(self) -> np.ndarray:
        return self.values["W2"] - self.values["W"] ** 2


class NessReport(BaseModel):
    """Quasi-stationary rates fitted on the post-transient window."""
    tag: str
    W_dot: float
    DeltaW_dot: float
    Sigma_dot: float
    Q1_dot: float
    Q2_dot: float
    eta: float
    tur_ratio: float
    fit_r2_mean: float
    fit_r2_variance: float
    C_mean: float
    Z_mean: float = Field(..., description="<Z> for the 2QE, <sigma3_z> for the 3QE.")
    N_mean: Optional[float] = None
    H_int_mean: float
    window_start: float
    window_end: float
    samples: int
    accepted: bool = True

    @property
    def fit_r2(self) -> float:
        return min(self.fit_r2_mean, self.fit_r2_variance)


class EffectiveComparison(BaseModel):
    """Full three-qubit model against its adiabatically eliminated counterpart."""
    full: NessReport
    effective: NessReport
    gamma_plus: float
    gamma_minus: float
    p_effective: float
    rel_dev_W_dot: float
    rel_dev_DeltaW_dot: float
    rel_dev_Sigma_dot: float
