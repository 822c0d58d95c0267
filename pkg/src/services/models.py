# src/services/models.py
"""Hamiltonians, jump channels and observables for the four engine models."""
import math
from typing import Dict, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

from src.core.config import settings, logger
from src.schemas.engine import EngineParams
from src.services.closed_forms import ness_3qe
from src.services.hilbert import (
    Ladder, OperatorMatrix, Qubit, SpaceLayout, DensityState,
    SIGMA_MINUS, SIGMA_PLUS, SIGMA_Z,
    build_space, embed, identity, interior_mask, ladder_ops, product_state, rung_projector, thermal_qubit,
)

ModelTag = Literal["2qe-reset", "2qe-local", "3qe-effective", "3qe-full"]
WindowLike = Union[Ladder, Tuple[int, int], None]

RESONANCE_TOLERANCE = 1e-10


class JumpChannel(BaseModel):
    """One Lindblad term rate * D[L]; `bath` tags which reservoir it belongs to."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str
    operator: OperatorMatrix
    rate: float = Field(..., ge=0, description="Non-negative jump rate.")
    bath: int


class ModelBundle(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    tag: ModelTag
    params: EngineParams
    layout: SpaceLayout
    hamiltonian: OperatorMatrix
    free_hamiltonian: OperatorMatrix
    channels: Tuple[JumpChannel, ...]
    observables: Dict[str, OperatorMatrix]
    characteristic_rate: float = Field(..., ge=0, description="Gamma_2, Gamma_2' or Gamma_3.")
    bath_rate: float = Field(..., gt=0, description="p, or p' for the full three-qubit model.")
    initial_locals: Tuple[np.ndarray, ...]

    @model_validator(mode="after")
    def _check(self):
        if not self.hamiltonian.hermitian:
            raise ValueError("Hamiltonian is not Hermitian.")
        mask = interior_mask(self.layout)
        coupling = self.hamiltonian - self.free_hamiltonian
        residue = self.free_hamiltonian.commutator(coupling).max_abs(mask)
        if residue > RESONANCE_TOLERANCE:
            raise ValueError(f"Couplings are not resonant: max|[H0, H_int]| = {residue:.3e}")
        return self

    @property
    def coupling_scale(self) -> float:
        return self.params.g + (self.params.k if self.tag == "3qe-full" else 0.0)

    def max_rate(self, rotating_frame: bool = True) -> float:
        """Largest rate the integrator step has to resolve."""
        rate = sum(c.rate for c in self.channels) + 2 * self.coupling_scale
        if not rotating_frame:
            energies = self.free_hamiltonian.entries.diagonal().real
            rate += float(energies.max() - energies.min())
        return rate

    def default_initial_state(self) -> DensityState:
        """Qubits at their uncoupled equilibrium, load on rung 0."""
        return product_state(self.layout, list(self.initial_locals))

    def channels_for(self, bath: int):
        return tuple(c for c in self.channels if c.bath == bath)


def dissipator_adjoint(channels, op: OperatorMatrix) -> OperatorMatrix:
    """Heisenberg-picture dissipator sum_k rate_k (L^dag O L - {L^dag L, O}/2)."""
    result = op * 0.0
    for c in channels:
        L = c.operator
        Ld = L.dag()
        result = result + c.rate * (Ld @ op @ L - 0.5 * (Ld @ L).anticommutator(op))
    return result


def apply_dissipator(channels, rho: np.ndarray) -> np.ndarray:
    """Schrodinger-picture dissipator acting on a dense density matrix."""
    def right(m: np.ndarray, op) -> np.ndarray:
        return np.asarray((op.T @ m.T).T)

    out = np.zeros_like(rho, dtype=complex)
    for c in channels:
        L = c.operator.entries
        Ld = L.conj().T
        LdL = Ld @ L
        out += c.rate * (right(np.asarray(L @ rho), Ld) - 0.5 * (np.asarray(LdL @ rho) + right(rho, LdL)))
    return out


def heat_current_direct(bundle: ModelBundle, state: DensityState, bath: int) -> float:
    """Tr[H D_j rho], evaluated in the Schrodinger picture."""
    if bundle.tag == "3qe-effective" and bath in (1, 2):
        q3 = heat_current_direct(bundle, state, 3)
        share = -bundle.params.E1 if bath == 1 else bundle.params.E2
        return share / bundle.params.E_v * q3
    drho = apply_dissipator(bundle.channels_for(bath), state.matrix)
    return float(np.real(bundle.hamiltonian.entries.multiply(drho.T).sum()))


def _resolve_window(window: WindowLike, quantum: float, default: Optional[Tuple[int, int]] = None) -> Ladder:
    if window is None:
        n_min, n_max = default or (settings.DEFAULT_N_MIN, settings.DEFAULT_N_MAX)
        return Ladder(n_min=n_min, n_max=n_max, quantum=quantum)
    if isinstance(window, Ladder):
        return Ladder(n_min=window.n_min, n_max=window.n_max, quantum=quantum)
    n_min, n_max = window
    return Ladder(n_min=n_min, n_max=n_max, quantum=quantum)


def _load_window(params: EngineParams, bath_rate: float) -> Tuple[int, int]:
    """Default three-qubit window: the load's drift over the horizon plus WINDOW_SIGMAS spreads each way.

    `params.p` must already be the effective qubit-3 rate.
    """
    report = ness_3qe(params)
    if report.Gamma <= 0:
        return settings.DEFAULT_N_MIN, settings.DEFAULT_N_MAX
    t_end = settings.HORIZON_FACTOR / min(bath_rate, report.Gamma)
    drift = report.W_dot * t_end / params.E_v
    spread = settings.WINDOW_SIGMAS * math.sqrt(max(report.DeltaW_dot, 0.0) * t_end) / params.E_v
    n_min = math.floor(min(drift, 0.0) - spread) - settings.EDGE_RUNGS
    n_max = math.ceil(max(drift, 0.0) + spread) + settings.EDGE_RUNGS
    return n_min, n_max


def _check_params(params: EngineParams) -> None:
    if params.E_v <= 0:
        raise ValueError(f"Load quantum E_v = E2 - E1 must be positive, got {params.E_v}")


def _load_ground(ladder: Ladder) -> np.ndarray:
    return rung_projector(ladder, 0)


def _qubit_at(bias: float) -> np.ndarray:
    """Diagonal qubit state with <sigma^z> = bias."""
    return np.diag([(1 + bias) / 2, (1 - bias) / 2]).astype(complex)


def _reset_channels(params: EngineParams, qubit_ops: Dict[int, Tuple[OperatorMatrix, ...]],
                    rate: float, dephasing: bool):
    channels = []
    for j, (sp, sm, sz) in qubit_ops.items():
        channels.append(JumpChannel(name=f"sigma_plus_{j}", operator=sp, rate=params.gamma_plus(j, rate), bath=j))
        channels.append(JumpChannel(name=f"sigma_minus_{j}", operator=sm, rate=params.gamma_minus(j, rate), bath=j))
        if dephasing:
            channels.append(JumpChannel(name=f"sigma_z_{j}", operator=sz, rate=params.gamma_z(rate), bath=j))
    return tuple(channels)


def _build_two_qubit(params: EngineParams, window: WindowLike, dephasing: bool) -> ModelBundle:
    _check_params(params)
    ladder = _resolve_window(window, params.E_v)
    layout = build_space([Qubit(), Qubit(), ladder])
    s1p, s1m, s1z = (embed(m, 0, layout) for m in (SIGMA_PLUS, SIGMA_MINUS, SIGMA_Z))
    s2p, s2m, s2z = (embed(m, 1, layout) for m in (SIGMA_PLUS, SIGMA_MINUS, SIGMA_Z))
    W, A = ladder_ops(layout, 2)
    one = identity(layout)

    H0 = 0.5 * params.E1 * s1z + 0.5 * params.E2 * s2z + W
    forward = s1p @ s2m @ A.dag()
    H_int = params.g * (forward + forward.dag())
    H = H0 + H_int

    channels = _reset_channels(params, {1: (s1p, s1m, s1z), 2: (s2p, s2m, s2z)}, params.p, dephasing)

    C = 1j * (forward.dag() - forward)
    Z = 0.5 * (s2z - s1z)
    observables = {
        "W": W,
        "W2": W @ W,
        "C": C,
        "Z": Z,
        "N": 0.5 * (one - s1z @ s2z),
        "S": 0.5 * (s1z + s2z),
        "H_int": H_int,
        "K": W.anticommutator(C),
        "Omega": Z @ W,
        "sigma1_z": s1z,
        "sigma2_z": s2z,
    }
    for j in (1, 2):
        observables[f"Q{j}"] = dissipator_adjoint([c for c in channels if c.bath == j], H)

    p, g = params.p, params.g
    if dephasing:
        tag, gamma = "2qe-reset", g ** 2 * p / (p ** 2 + 2 * g ** 2)
    else:
        tag, gamma = "2qe-local", 2 * g ** 2 * p / (p ** 2 + 4 * g ** 2)

    bundle = ModelBundle(
        tag=tag, params=params, layout=layout, hamiltonian=H, free_hamiltonian=H0,
        channels=channels, observables=observables, characteristic_rate=gamma, bath_rate=p,
        initial_locals=(thermal_qubit(params.beta_energy(1)), thermal_qubit(params.beta_energy(2)),
                        _load_ground(ladder)),
    )
    logger.info(f"Built {tag} model: dim={layout.dim}, {len(channels)} channels, Gamma={gamma:.6g}")
    return bundle


def build_2qe_reset(params: EngineParams, window: WindowLike = None) -> ModelBundle:
    """Two-qubit engine with reset thermalisation in Lindblad form (gain, decay, dephasing)."""
    return _build_two_qubit(params, window, dephasing=True)


def build_2qe_local(params: EngineParams, window: WindowLike = None) -> ModelBundle:
    """Two-qubit engine with local gain/decay only (no dephasing channels)."""
    return _build_two_qubit(params, window, dephasing=False)


def _third_qubit_observables(layout: SpaceLayout, s3p, s3m, s3z, W, A, g: float):
    H_int = g * (s3m @ A.dag() + s3p @ A)
    C = 1j * (s3p @ A - s3m @ A.dag())
    observables = {
        "W": W,
        "W2": W @ W,
        "C": C,
        "sigma3_z": s3z,
        "H_int": H_int,
        "K": W.anticommutator(C),
        "Omega": s3z @ W,
    }
    return H_int, observables


def build_3qe_effective(params: EngineParams, window: WindowLike = None,
                        rates: Optional[Tuple[float, float]] = None) -> ModelBundle:
    """Qubit 3 plus load after eliminating the fast-thermalising qubits.

    By default gamma+ + gamma- = p with gamma+/gamma- = e^chi; `rates` overrides both.
    """
    _check_params(params)
    if rates is None:
        gamma_plus, gamma_minus = params.p * expit(params.chi), params.p * expit(-params.chi)
        p_eff = params.p
    else:
        gamma_plus, gamma_minus = rates
        p_eff = gamma_plus + gamma_minus
        if p_eff <= 0:
            raise ValueError(f"Effective rates must sum to a positive value, got {rates}")
        params = params.model_copy(update={"p": p_eff})
    ladder = _resolve_window(window, params.E_v, _load_window(params, p_eff))
    layout = build_space([Qubit(), ladder])
    s3p, s3m, s3z = (embed(m, 0, layout) for m in (SIGMA_PLUS, SIGMA_MINUS, SIGMA_Z))
    W, A = ladder_ops(layout, 1)

    H0 = 0.5 * params.E_v * s3z + W
    H_int, observables = _third_qubit_observables(layout, s3p, s3m, s3z, W, A, params.g)
    H = H0 + H_int
    channels = (
        JumpChannel(name="sigma_plus_3", operator=s3p, rate=gamma_plus, bath=3),
        JumpChannel(name="sigma_minus_3", operator=s3m, rate=gamma_minus, bath=3),
    )
    q3 = dissipator_adjoint(channels, H)
    observables["Q3"] = q3
    # each qubit-3 excitation moves E2 out of the hot bath and E1 into the cold one
    observables["Q1"] = (-params.E1 / params.E_v) * q3
    observables["Q2"] = (params.E2 / params.E_v) * q3

    g = params.g
    gamma = 4 * g ** 2 * p_eff / (p_eff ** 2 + 8 * g ** 2)
    bias = math.tanh(params.chi / 2)
    bundle = ModelBundle(
        tag="3qe-effective", params=params, layout=layout, hamiltonian=H, free_hamiltonian=H0,
        channels=channels, observables=observables, characteristic_rate=gamma, bath_rate=p_eff,
        initial_locals=(_qubit_at(bias), _load_ground(ladder)),
    )
    logger.info(f"Built 3qe-effective model: dim={layout.dim}, gamma+={gamma_plus:.6g}, gamma-={gamma_minus:.6g}")
    return bundle


def effective_rates_from_full(params: EngineParams) -> Tuple[float, float, float]:
    """gamma+- = k^2 exp(+-chi/2) / (p' Z1 Z2) from eliminating qubits 1 and 2."""
    if params.p_prime is None or params.p_prime <= 0:
        raise ValueError(f"p_prime must be set and positive, got {params.p_prime}")
    prefactor = params.k ** 2 / (params.p_prime * params.partition(1) * params.partition(2))
    gamma_plus = prefactor * math.exp(params.chi / 2)
    gamma_minus = prefactor * math.exp(-params.chi / 2)
    p_eff = gamma_plus + gamma_minus
    if p_eff >= 0.1 * params.p_prime:
        logger.warning(f"Effective rate {p_eff:.4g} is not much slower than p'={params.p_prime:.4g}")
    return gamma_plus, gamma_minus, p_eff


def build_3qe_full(params: EngineParams, window: WindowLike = None) -> ModelBundle:
    """Three qubits plus load; qubits 1, 2 reset at rate p', E3 = E_v."""
    _check_params(params)
    if params.p_prime is None:
        raise ValueError("The full three-qubit model needs p_prime.")
    _, _, p_eff = effective_rates_from_full(params)
    default = _load_window(params.model_copy(update={"p": p_eff}), params.p_prime)
    ladder = _resolve_window(window, params.E_v, default)
    layout = build_space([Qubit(), Qubit(), Qubit(), ladder])
    ops = {j: tuple(embed(m, j - 1, layout) for m in (SIGMA_PLUS, SIGMA_MINUS, SIGMA_Z)) for j in (1, 2, 3)}
    (s1p, s1m, s1z), (s2p, s2m, s2z), (s3p, s3m, s3z) = ops[1], ops[2], ops[3]
    W, A = ladder_ops(layout, 3)
    one = identity(layout)

    H0 = 0.5 * params.E1 * s1z + 0.5 * params.E2 * s2z + 0.5 * params.E_v * s3z + W
    three_body = s1p @ s2m @ s3p
    V = params.k * (three_body + three_body.dag())
    H_int, observables = _third_qubit_observables(layout, s3p, s3m, s3z, W, A, params.g)
    H = H0 + V + H_int
    channels = _reset_channels(params, {1: ops[1], 2: ops[2]}, params.p_prime, dephasing=True)

    observables.update({
        "V": V,
        "Z": 0.5 * (s2z - s1z),
        "N": 0.5 * (one - s1z @ s2z),
        "S": 0.5 * (s1z + s2z),
        "sigma1_z": s1z,
        "sigma2_z": s2z,
    })
    for j in (1, 2):
        observables[f"Q{j}"] = dissipator_adjoint([c for c in channels if c.bath == j], H)

    g = params.g
    gamma = 4 * g ** 2 * p_eff / (p_eff ** 2 + 8 * g ** 2) if p_eff > 0 else 0.0
    bundle = ModelBundle(
        tag="3qe-full", params=params, layout=layout, hamiltonian=H, free_hamiltonian=H0,
        channels=channels, observables=observables, characteristic_rate=gamma, bath_rate=params.p_prime,
        initial_locals=(thermal_qubit(params.beta_energy(1)), thermal_qubit(params.beta_energy(2)),
                        _qubit_at(math.tanh(params.chi / 2)), _load_ground(ladder)),
    )
    logger.info(f"Built 3qe-full model: dim={layout.dim}, p'={params.p_prime:.4g}, p_eff={p_eff:.4g}")
    return bundle


BUILDERS = {
    "2qe-reset": build_2qe_reset,
    "2qe-local": build_2qe_local,
    "3qe-effective": build_3qe_effective,
    "3qe-full": build_3qe_full,
}


def build_model(tag: str, params: EngineParams, window: WindowLike = None) -> ModelBundle:
    try:
        builder = BUILDERS[tag]
    except KeyError:
        raise ValueError(f"Unknown engine model '{tag}'. Choose from {sorted(BUILDERS)}")
    return builder(params, window)
