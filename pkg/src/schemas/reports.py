# src/schemas/reports.py
import math
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, model_validator

AnalyticTag = Literal["2qe-reset", "2qe-local", "3qe"]

# published lower bounds on the TUR ratio, one per engine model
BOUND_CONSTANTS: Dict[str, float] = {"2qe-reset": 2.0, "2qe-local": 1.982, "3qe": 1.245}


class AnalyticReport(BaseModel):
    """Closed-form quasi-stationary solution of one engine model."""
    tag: AnalyticTag
    Gamma: float = Field(..., description="Characteristic energy-transfer rate.")
    Z_eq: Optional[float] = Field(None, description="Virtual-qubit bias at equilibrium (2QE).")
    N_eq: Optional[float] = Field(None, description="Virtual-qubit occupation at equilibrium (2QE).")
    sigma3_eq: Optional[float] = Field(None, description="Bias of the engine qubit at equilibrium (3QE).")
    W_dot: float
    Sigma_dot: float
    DeltaW_dot: float
    tur_ratio: float
    eta: float
    eta_C: float
    T_v: float
    C_mean: float = Field(..., description="Quasi-stationary current <C>.")
    Z_mean: float = Field(..., description="<Z> for the 2QE, <sigma3_z> for the 3QE.")
    N_mean: Optional[float] = None
    S_mean: Optional[float] = None
    Q1_dot: float
    Q2_dot: float

    @model_validator(mode="after")
    def _above_bound(self):
        bound = BOUND_CONSTANTS[self.tag]
        if not math.isnan(self.tur_ratio) and self.tur_ratio < bound - 1e-9:
            raise ValueError(f"{self.tag} TUR ratio {self.tur_ratio:.9g} below its bound {bound}")
        return self


class BoundMinimum(BaseModel):
    tag: AnalyticTag
    chi_star: float = Field(..., description="Numerically located minimiser (0 for the chi -> 0 limit).")
    minimum: float
    published: float


class WalkMoments(BaseModel):
    """Exact moments of the flywheel displacement after N cycles."""
    N: int
    mean_alpha: float
    var_alpha: float
    E_alpha2: float
    E_alpha4: float
    cumulants: List[float] = Field(..., description="First four cumulants of alpha_N.")

    @property
    def mean_n(self) -> float:
        return self.E_alpha2

    @property
    def mean_n2(self) -> float:
        """Normal ordering: <n^2> = <a^dag2 a^2> + <n>."""
        return self.E_alpha4 + self.E_alpha2


class MonteCarloMoments(BaseModel):
    """Empirical moments of alpha_N with standard errors."""
    N: int
    trials: int
    mean_alpha: float
    se_mean_alpha: float
    var_alpha: float
    se_var_alpha: float
    E_alpha4: float
    se_E_alpha4: float
    mean_n: float
    se_mean_n: float
    mean_n2: float
    se_mean_n2: float

    def z_scores(self, analytic: WalkMoments) -> Dict[str, float]:
        def z(value: float, expected: float, se: float) -> float:
            if se == 0:
                return 0.0 if abs(value - expected) <= 1e-12 * max(1.0, abs(expected)) else math.inf
            return (value - expected) / se

        return {
            "mean_alpha": z(self.mean_alpha, analytic.mean_alpha, self.se_mean_alpha),
            "var_alpha": z(self.var_alpha, analytic.var_alpha, self.se_var_alpha),
            "mean_n": z(self.mean_n, analytic.mean_n, self.se_mean_n),
            "mean_n2": z(self.mean_n2, analytic.mean_n2, self.se_mean_n2),
        }


class MonteCarloRun(BaseModel):
    seed: int
    trials: int
    snapshots: List[MonteCarloMoments] = Field(..., description="One entry per checkpoint, in cycle order.")

    @property
    def final(self) -> MonteCarloMoments:
        return self.snapshots[-1]


class QuantumMapComparison(BaseModel):
    """Truncated-Fock channel iteration against the random-walk oracle."""
    n_cycles: int
    fock_truncation: int
    mean_n: float
    mean_n2: float
    oracle_mean_n: float
    oracle_mean_n2: float
    rel_dev_n: float
    rel_dev_n2: float
    top_population: float
    composite_mean_n: Optional[float] = Field(None, description="Flywheel marginal of the qubit-oscillator cycle.")
    composite_mean_n2: Optional[float] = None


class CycleThermodynamics(BaseModel):
    Q1: float
    Q2: float
    W_cyc: float


class FlywheelAsymptotics(BaseModel):
    """Leading-order large-N flywheel energy statistics."""
    N: int
    W_N: float
    DeltaW_N: float
    Sigma_N: float


class ValidationResult(BaseModel):
    name: str
    passed: bool
    value: float = math.nan
    expected: float = math.nan
    tolerance: float = math.nan
    detail: str = ""
    wall_time: float = 0.0
