# src/schemas/engine.py
import math
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, computed_field, model_validator
from scipy.special import expit

from src.core.config import logger


class EngineParams(BaseModel):
    """Physical constants of one autonomous-engine configuration (hbar = k_B = 1)."""
    model_config = ConfigDict(frozen=True)

    E1: float = Field(..., gt=0, description="Cold-qubit splitting.")
    E2: float = Field(..., gt=0, description="Hot-qubit splitting.")
    beta1: float = Field(..., ge=0, description="Inverse temperature of the cold bath.")
    beta2: float = Field(..., ge=0, description="Inverse temperature of the hot bath.")
    p: float = Field(..., gt=0, description="Thermalisation rate (effective rate for the 3QE).")
    g: float = Field(0.0, ge=0, description="Engine-load coupling.")
    k: float = Field(0.0, ge=0, description="Three-qubit interaction strength (full 3QE only).")
    p_prime: Optional[float] = Field(None, description="Underlying reset rate of qubits 1, 2 (full 3QE only).")

    @model_validator(mode="after")
    def _advisories(self):
        if self.chi < 0:
            logger.warning(f"chi = {self.chi:.4g} < 0: refrigerator regime, still simulable.")
        if self.p_prime is not None:
            if self.p_prime <= 0:
                raise ValueError(f"p_prime must be positive, got {self.p_prime}")
            if self.k / self.p_prime > 0.1 or self.g / self.p_prime > 0.1:
                logger.warning(
                    f"Fast-thermalisation regime is marginal: k/p'={self.k / self.p_prime:.3g}, "
                    f"g/p'={self.g / self.p_prime:.3g} (advisory limit 0.1)"
                )
        return self

    @classmethod
    def from_products(cls, beta1E1: float, beta2E2: float, E_v: float = 1.0, E1: float = 1.0, **rates) -> "EngineParams":
        """Parametrise by the dimensionless products beta_j E_j at fixed E1 and E_v."""
        E2 = E1 + E_v
        return cls(E1=E1, E2=E2, beta1=beta1E1 / E1, beta2=beta2E2 / E2, **rates)

    @computed_field
    @property
    def E_v(self) -> float:
        return self.E2 - self.E1

    @computed_field
    @property
    def chi(self) -> float:
        return self.beta1 * self.E1 - self.beta2 * self.E2

    @property
    def T_v(self) -> float:
        """Virtual temperature -E_v/chi; infinite at zero bias."""
        return math.inf if self.chi == 0 else -self.E_v / self.chi

    def beta_energy(self, j: int) -> float:
        return {1: self.beta1 * self.E1, 2: self.beta2 * self.E2}[j]

    def partition(self, j: int) -> float:
        return 2 * math.cosh(self.beta_energy(j) / 2)

    def gamma_plus(self, j: int, rate: Optional[float] = None) -> float:
        rate = self.p if rate is None else rate
        return rate * math.exp(-self.beta_energy(j) / 2) / self.partition(j)

    def gamma_minus(self, j: int, rate: Optional[float] = None) -> float:
        rate = self.p if rate is None else rate
        return rate * math.exp(self.beta_energy(j) / 2) / self.partition(j)

    def gamma_z(self, rate: Optional[float] = None) -> float:
        return (self.p if rate is None else rate) / 4

    def sigma_z_eq(self, j: int) -> float:
        return -math.tanh(self.beta_energy(j) / 2)

    @property
    def eta(self) -> float:
        return 1 - self.E1 / self.E2

    @property
    def eta_carnot(self) -> float:
        if self.beta1 == 0:
            return math.nan
        return 1 - self.beta2 / self.beta1


class FlywheelParams(BaseModel):
    """Spin-oscillator Otto engine driven by a quantised flywheel."""
    model_config = ConfigDict(frozen=True)

    omega_z: float = Field(..., gt=0, description="Qubit splitting.")
    omega_0: float = Field(1.0, gt=0, description="Oscillator frequency.")
    d: float = Field(..., ge=0, description="Dimensionless qubit-oscillator coupling.")
    beta1: float = Field(..., ge=0, description="Cold-bath inverse temperature.")
    beta2: float = Field(..., ge=0, description="Hot-bath inverse temperature.")
    N: int = Field(1000, ge=0, description="Number of engine cycles.")

    @model_validator(mode="after")
    def _advisories(self):
        if self.omega_z / self.omega_0 < 10:
            logger.warning(f"omega_z/omega_0 = {self.omega_z / self.omega_0:.3g} < 10: outside the large-splitting regime")
        if self.d > 0.2:
            logger.warning(f"d = {self.d:.3g} > 0.2: outside the weak-coupling regime")
        if self.chi < 0:
            logger.warning(f"chi = {self.chi:.4g} < 0: flywheel is driven backwards")
        return self

    @classmethod
    def from_bias(cls, chi: float, p0: float, omega_z: float = 20.0, omega_0: float = 1.0, d: float = 0.1,
                  N: int = 1000) -> "FlywheelParams":
        """Solve for (beta1, beta2) giving bias chi and idle probability p0 at fixed omega_z.

        Any (beta1, beta2, omega_z) with the same (chi, p0) yields the same walk.
        """
        if not 0 < p0 < 1:
            raise ValueError(f"p0 must lie in (0, 1), got {p0}")
        s = 1 - p0
        a = math.exp(chi)
        # x_j = exp(beta_j omega_z); s*a*y^2 - (1-s)(1+a)*y + s = 0 with y = x_2, x_1 = a*y
        disc = ((1 - s) * (1 + a)) ** 2 - 4 * s * s * a
        if disc < 0:
            raise ValueError(f"p0={p0} is not reachable at chi={chi}")
        y = ((1 - s) * (1 + a) + math.sqrt(disc)) / (2 * s * a)
        beta2 = math.log(y) / omega_z
        beta1 = beta2 + chi / omega_z
        if beta2 < 0:
            raise ValueError(f"(chi={chi}, p0={p0}) needs a negative hot-bath temperature")
        return cls(omega_z=omega_z, omega_0=omega_0, d=d, beta1=beta1, beta2=beta2, N=N)

    @computed_field
    @property
    def chi(self) -> float:
        return (self.beta1 - self.beta2) * self.omega_z

    @property
    def period(self) -> float:
        return 2 * math.pi / self.omega_0

    def excited_population(self, j: int) -> float:
        beta = {1: self.beta1, 2: self.beta2}[j]
        return float(expit(-beta * self.omega_z))


class StepDistribution(BaseModel):
    """One cycle of the phase-space walk: +2d, -2d or no move."""
    model_config = ConfigDict(frozen=True)

    p_plus: float = Field(..., ge=0, le=1)
    p_minus: float = Field(..., ge=0, le=1)
    p_zero: float = Field(..., ge=0, le=1)
    step: float = Field(..., ge=0, description="Displacement per step, 2d.")

    @model_validator(mode="after")
    def _normalised(self):
        total = self.p_plus + self.p_minus + self.p_zero
        if abs(total - 1) > 1e-12:
            raise ValueError(f"Step probabilities sum to {total:.15g}")
        return self

    @property
    def d(self) -> float:
        return self.step / 2

    @property
    def drift(self) -> float:
        return self.p_plus - self.p_minus
