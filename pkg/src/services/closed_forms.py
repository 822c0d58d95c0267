# src/services/closed_forms.py
"""Exact quasi-stationary solutions of the engine models and the TUR lower bounds."""
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from src.core.config import logger
from src.schemas.engine import EngineParams
from src.schemas.reports import BOUND_CONSTANTS, AnalyticReport, BoundMinimum

CHI_LIMIT = 1e-8

# c in chi coth(chi/2) [1 - c tanh^2(chi/2)]
BOUND_FACTORS = {"2qe-reset": 1 / 3, "2qe-local": 25 / 64, "3qe": 3 / 4}

_ANALYTIC_TAG = {
    "2qe-reset": "2qe-reset", "2qe-local": "2qe-local",
    "3qe": "3qe", "3qe-effective": "3qe", "3qe-full": "3qe",
}


def _analytic_tag(tag: str) -> str:
    try:
        return _ANALYTIC_TAG[tag]
    except KeyError:
        raise ValueError(f"Unknown model tag '{tag}'") from None


def chi_coth(chi: float) -> float:
    """chi coth(chi/2), continued to 2 at zero bias."""
    if abs(chi) < CHI_LIMIT:
        return 2.0 + chi * chi / 6.0
    return chi / math.tanh(chi / 2)


def eq_virtual(params: EngineParams) -> Tuple[float, float, float]:
    """(Z_eq, N_eq, T_v) of the virtual qubit with both qubits at their bath temperatures."""
    N_eq = 0.5 * (1 - math.tanh(params.beta_energy(1) / 2) * math.tanh(params.beta_energy(2) / 2))
    Z_eq = math.tanh(params.chi / 2) * N_eq
    return Z_eq, N_eq, params.T_v


def _equilibrium_spin(params: EngineParams) -> float:
    return 0.5 * (params.sigma_z_eq(1) + params.sigma_z_eq(2))


def _report(tag: str, params: EngineParams, Gamma: float, bias: float, f: float, occupation: float,
            C_mean: float, **means) -> AnalyticReport:
    """Shared assembly: W = Gamma E_v X, Sigma = Gamma chi X, TUR = chi coth(chi/2) - chi f X / occupation."""
    E_v, chi, g = params.E_v, params.chi, params.g
    W_dot = Gamma * E_v * bias
    Sigma_dot = Gamma * chi * bias
    DeltaW_dot = Gamma * E_v ** 2 * (occupation - f * bias ** 2)
    tur = chi_coth(chi) * (1 - f * bias ** 2 / occupation) if tag == "3qe" else chi_coth(chi) - chi * f * bias
    return AnalyticReport(
        tag=tag, Gamma=Gamma, W_dot=W_dot, Sigma_dot=Sigma_dot, DeltaW_dot=DeltaW_dot, tur_ratio=tur,
        eta=params.eta, eta_C=params.eta_carnot, T_v=params.T_v, C_mean=C_mean,
        Q1_dot=-g * params.E1 * C_mean, Q2_dot=g * params.E2 * C_mean, **means,
    )


def ness_2qe_reset(params: EngineParams) -> AnalyticReport:
    p, g = params.p, params.g
    Z_eq, N_eq, _ = eq_virtual(params)
    denom = p ** 2 + 2 * g ** 2
    Gamma = g ** 2 * p / denom
    f = 2 * Gamma * (2 * p ** 2 + g ** 2) / (p * denom)
    return _report(
        "2qe-reset", params, Gamma, Z_eq, f, N_eq,
        C_mean=g * p / denom * Z_eq,
        Z_eq=Z_eq, N_eq=N_eq,
        Z_mean=p ** 2 / denom * Z_eq,
        N_mean=N_eq - g ** 2 / denom * Z_eq ** 2,
        S_mean=_equilibrium_spin(params),
    )


def ness_2qe_local(params: EngineParams) -> AnalyticReport:
    p, g = params.p, params.g
    Z_eq, N_eq, _ = eq_virtual(params)
    denom = p ** 2 + 4 * g ** 2
    Gamma = 2 * g ** 2 * p / denom
    f = Gamma * (5 * p ** 2 + 4 * g ** 2) / (p * denom)
    return _report(
        "2qe-local", params, Gamma, Z_eq, f, N_eq,
        C_mean=2 * g * p / denom * Z_eq,
        Z_eq=Z_eq, N_eq=N_eq,
        Z_mean=p ** 2 / denom * Z_eq,
        N_mean=N_eq - 2 * g ** 2 / denom * Z_eq ** 2,
        S_mean=_equilibrium_spin(params),
    )


def ness_3qe(params: EngineParams) -> AnalyticReport:
    """Effective three-qubit engine; params.p is the effective thermalisation rate of qubit 3."""
    p, g = params.p, params.g
    sigma_eq = math.tanh(params.chi / 2)
    denom = p ** 2 + 8 * g ** 2
    Gamma = 4 * g ** 2 * p / denom
    f = 6 * Gamma * p / denom
    return _report(
        "3qe", params, Gamma, sigma_eq, f, 1.0,
        C_mean=4 * g * p / denom * sigma_eq,
        sigma3_eq=sigma_eq,
        Z_mean=p ** 2 / denom * sigma_eq,
    )


def analytic_report(tag: str, params: EngineParams) -> AnalyticReport:
    tag = _analytic_tag(tag)
    return {"2qe-reset": ness_2qe_reset, "2qe-local": ness_2qe_local, "3qe": ness_3qe}[tag](params)


def bound_function(tag: str, r: float) -> float:
    """f(r), r = g/p, multiplying the squared bias in the power-fluctuation bracket."""
    if r < 0:
        raise ValueError(f"g/p must be non-negative, got {r}")
    tag = _analytic_tag(tag)
    r2 = r * r
    if tag == "2qe-reset":
        return 2 * r2 * (2 + r2) / (1 + 2 * r2) ** 2
    if tag == "2qe-local":
        return 2 * r2 * (5 + 4 * r2) / (1 + 4 * r2) ** 2
    return 24 * r2 / (1 + 8 * r2) ** 2


def bound_function_max(tag: str) -> Tuple[float, float]:
    """(r*, f(r*)) maximising f over g/p."""
    res = minimize_scalar(lambda r: -bound_function(tag, r), bounds=(1e-6, 10.0), method="bounded",
                          options={"xatol": 1e-10})
    return float(res.x), float(-res.fun)


def bound_curve(tag: str, chi: float) -> float:
    c = BOUND_FACTORS[_analytic_tag(tag)]
    return chi_coth(chi) * (1 - c * math.tanh(chi / 2) ** 2)


def minimize_bound_curve(tag: str, chi_max: float = 20.0, xatol: float = 1e-6) -> BoundMinimum:
    """Minimise the bound curve over chi in (0, chi_max]."""
    tag = _analytic_tag(tag)
    res = minimize_scalar(lambda chi: bound_curve(tag, chi), bounds=(0.0, chi_max), method="bounded",
                          options={"xatol": xatol})
    chi_star, minimum = float(res.x), float(res.fun)
    # the reset curve only approaches its infimum as chi -> 0
    limit = bound_curve(tag, 0.0)
    if limit <= minimum:
        chi_star, minimum = 0.0, limit
    logger.debug(f"{tag} bound minimum {minimum:.6f} at chi={chi_star:.6f}")
    return BoundMinimum(tag=tag, chi_star=chi_star, minimum=minimum, published=BOUND_CONSTANTS[tag])


def tur_coherence_form(params: EngineParams, N_mean: float, C_mean: float) -> float:
    """chi coth(chi/2) (<N> - 3<C>^2) / N_eq for the reset model."""
    _, N_eq, _ = eq_virtual(params)
    if N_eq <= 0:
        raise ValueError("Equilibrium virtual-qubit occupation vanishes; the coherence form is undefined.")
    return chi_coth(params.chi) * (N_mean - 3 * C_mean ** 2) / N_eq


def optimal_coupling(tag: str, params: EngineParams, grid: Optional[Sequence[float]] = None) -> Tuple[float, float]:
    """Grid point g/p minimising the analytic TUR ratio at the bias of `params`."""
    grid = np.logspace(-2, 1, 301) if grid is None else np.asarray(grid, dtype=float)
    ratios = [analytic_report(tag, params.model_copy(update={"g": r * params.p})).tur_ratio for r in grid]
    best = int(np.argmin(ratios))
    return float(grid[best]), float(ratios[best])


def fluctuation_floor(tag: str, params: EngineParams) -> float:
    """Smallest power fluctuation the model's TUR bound allows: B T1 eta W / (eta_C - eta)."""
    report = analytic_report(tag, params)
    if params.beta1 == 0 or report.eta_C <= report.eta:
        return math.nan
    bound = BOUND_CONSTANTS[report.tag]
    return bound * report.eta * report.W_dot / (params.beta1 * (report.eta_C - report.eta))
