# src/services/evolution.py
"""Fixed-step RK4 integration of the engine master equations and NESS extraction."""
import math
import time
from typing import Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.stats import linregress

from src.core.config import settings, logger
from src.core.exceptions import FitRejected, IntegrationAborted
from src.schemas.engine import EngineParams
from src.schemas.evolution import EffectiveComparison, IntegrationConfig, NessReport, ObservableSeries
from src.services.hilbert import DensityState, OperatorMatrix, edge_mask
from src.services.models import (
    ModelBundle, WindowLike, build_3qe_effective, build_3qe_full, effective_rates_from_full,
)

SECTOR_ENERGY_TOLERANCE = 1e-9
OUT_OF_SECTOR_TOLERANCE = 1e-14
MIN_SAMPLES = 20


def liouvillian(bundle: ModelBundle, rotating_frame: bool = True) -> sparse.csr_matrix:
    """Superoperator acting on row-major vec(rho): vec(A rho B) = (A kron B^T) vec(rho)."""
    dim = bundle.layout.dim
    one = sparse.identity(dim, dtype=complex, format="csr")
    H = bundle.hamiltonian.entries
    if rotating_frame:
        H = H - bundle.free_hamiltonian.entries
    gen = -1j * (sparse.kron(H, one) - sparse.kron(one, H.T))
    for c in bundle.channels:
        L = c.operator.entries
        LdL = (L.conj().T @ L).tocsr()
        gen = gen + c.rate * (sparse.kron(L, L.conj()) - 0.5 * sparse.kron(LdL, one) - 0.5 * sparse.kron(one, LdL.T))
    return sparse.csr_matrix(gen)


def resonant_sector(bundle: ModelBundle) -> np.ndarray:
    """Sorted vec(rho) positions (a*D + b) with equal free energies E_a = E_b."""
    dim = bundle.layout.dim
    energies = bundle.free_hamiltonian.entries.diagonal().real
    order = np.argsort(energies, kind="stable")
    scale = max(1.0, float(np.max(np.abs(energies))))
    breaks = np.flatnonzero(np.diff(energies[order]) > SECTOR_ENERGY_TOLERANCE * scale) + 1
    positions = []
    for group in np.split(order, breaks):
        a, b = np.meshgrid(group, group, indexing="ij")
        positions.append((a * dim + b).ravel())
    return np.sort(np.concatenate(positions))


class LiouvilleGenerator:
    """Vectorised generator, optionally restricted to the resonant sector.

    The sector is invariant because every coupling commutes with H0 and every
    jump operator lowers or raises H0 by a fixed amount.
    """

    def __init__(self, bundle: ModelBundle, rotating_frame: bool = True, sector_reduction: bool = True):
        self.bundle = bundle
        self.dim = bundle.layout.dim
        full = liouvillian(bundle, rotating_frame=rotating_frame or sector_reduction)
        if sector_reduction:
            if not bundle.free_hamiltonian.is_diagonal:
                raise ValueError("Sector reduction needs a diagonal free Hamiltonian.")
            self.index = resonant_sector(bundle)
            self.matrix = sparse.csr_matrix(full[self.index][:, self.index])
        else:
            self.index = np.arange(self.dim * self.dim)
            self.matrix = full
        self.reduced = sector_reduction
        a, b = np.divmod(self.index, self.dim)
        self._transpose = np.searchsorted(self.index, b * self.dim + a)
        logger.debug(f"Generator size {self.matrix.shape[0]} (full {self.dim ** 2}), nnz={self.matrix.nnz}")

    def vectorise(self, rho: np.ndarray) -> np.ndarray:
        flat = np.asarray(rho, dtype=complex).reshape(-1)
        if self.reduced:
            outside = flat.copy()
            outside[self.index] = 0
            if np.max(np.abs(outside)) > OUT_OF_SECTOR_TOLERANCE:
                raise ValueError("Initial state has coherences outside the resonant sector.")
        return flat[self.index].copy()

    def unvectorise(self, v: np.ndarray) -> np.ndarray:
        flat = np.zeros(self.dim * self.dim, dtype=complex)
        flat[self.index] = v
        return flat.reshape(self.dim, self.dim)

    def readout(self, op: OperatorMatrix) -> sparse.csr_matrix:
        """Row r with r . v = Tr(rho O)."""
        row = sparse.csr_matrix(op.entries.T).reshape((1, self.dim * self.dim))
        return sparse.csr_matrix(row)[:, self.index]

    def hermiticity_error(self, v: np.ndarray) -> float:
        return float(np.max(np.abs(v - v[self._transpose].conj())))

    def rk4_step(self, v: np.ndarray, dt: float) -> np.ndarray:
        L = self.matrix
        k1 = L @ v
        k2 = L @ (v + 0.5 * dt * k1)
        k3 = L @ (v + 0.5 * dt * k2)
        k4 = L @ (v + dt * k3)
        return v + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def resolve_config(bundle: ModelBundle, cfg: IntegrationConfig) -> Tuple[float, int, float]:
    """Concrete (dt, n_steps, t_end) honouring the step and horizon rules."""
    max_rate = bundle.max_rate(rotating_frame=cfg.rotating_frame or cfg.sector_reduction)
    dt = cfg.dt if cfg.dt is not None else settings.MAX_RATE_STEP / max_rate
    if dt * max_rate > settings.MAX_RATE_STEP * (1 + 1e-9):
        raise ValueError(f"dt={dt:.4g} too large: dt * max_rate = {dt * max_rate:.4g} > {settings.MAX_RATE_STEP}")
    slow = min(r for r in (bundle.bath_rate, bundle.characteristic_rate) if r > 0)
    horizon = settings.HORIZON_FACTOR / slow
    t_end = cfg.t_end if cfg.t_end is not None else horizon
    if t_end < horizon * (1 - 1e-9):
        logger.warning(f"t_end={t_end:.4g} is shorter than the recommended horizon {horizon:.4g}")
    samples = max(MIN_SAMPLES, math.ceil(t_end / dt / cfg.sample_stride))
    n_steps = samples * cfg.sample_stride
    return t_end / n_steps, n_steps, t_end


def _minimum_eigenvalue(rho: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0])


def _generator_for(bundle: ModelBundle, initial: DensityState, cfg: IntegrationConfig):
    reduce = cfg.sector_reduction
    if reduce:
        generator = LiouvilleGenerator(bundle, cfg.rotating_frame, sector_reduction=True)
        try:
            return generator, generator.vectorise(initial.matrix)
        except ValueError:
            logger.info("Initial state leaves the resonant sector; integrating the full Liouville space.")
    generator = LiouvilleGenerator(bundle, cfg.rotating_frame, sector_reduction=False)
    return generator, generator.vectorise(initial.matrix)


def integrate(bundle: ModelBundle, initial: Optional[DensityState] = None,
              cfg: Optional[IntegrationConfig] = None) -> ObservableSeries:
    """Integrate d rho/dt = L rho with fixed-step RK4 and record every bundle observable."""
    cfg = cfg or IntegrationConfig()
    initial = initial or bundle.default_initial_state()
    if initial.layout != bundle.layout:
        raise ValueError("Initial state does not live on the model's layout.")
    if cfg.rotating_frame or cfg.sector_reduction:
        for name, op in bundle.observables.items():
            if bundle.free_hamiltonian.commutator(op).max_abs() > 1e-10:
                raise ValueError(f"Observable '{name}' does not commute with H0; disable rotating_frame/sector_reduction.")
    if cfg.check_positivity and not initial.check_positive():
        raise IntegrationAborted("positivity", f"Initial state has eigenvalue {initial.min_eigenvalue():.3e}", 0.0)

    dt, n_steps, t_end = resolve_config(bundle, cfg)
    generator, v = _generator_for(bundle, initial, cfg)

    names = list(bundle.observables)
    readout = sparse.vstack([generator.readout(bundle.observables[n]) for n in names]).tocsr()
    trace_row = generator.readout(OperatorMatrix.from_matrix(bundle.layout, sparse.identity(bundle.layout.dim)))
    leak_mask = edge_mask(bundle.layout, bundle.layout.ladder_index(), cfg.edge_rungs)
    leak_row = generator.readout(OperatorMatrix.from_matrix(bundle.layout, sparse.diags(leak_mask.astype(float))))
    hermitian = np.array([bundle.observables[n].hermitian for n in names])

    n_samples = n_steps // cfg.sample_stride + 1
    times = np.arange(n_samples) * cfg.sample_stride * dt
    values = np.empty((len(names), n_samples))
    leak = np.empty(n_samples)
    trace = np.empty(n_samples)

    logger.info(f"Integrating {bundle.tag}: {n_steps} steps of dt={dt:.4g} to t={t_end:.4g}, "
                f"generator size {generator.matrix.shape[0]}")
    started = time.perf_counter()
    for s in range(n_samples):
        if s > 0:
            for _ in range(cfg.sample_stride):
                v = generator.rk4_step(v, dt)
        t = times[s]
        if not np.all(np.isfinite(v)):
            raise IntegrationAborted("nan", f"Non-finite state entries at t={t:.4g}", t)
        raw = readout @ v
        if np.any(np.abs(raw.imag[hermitian]) > 1e-8 * np.maximum(1.0, np.abs(raw.real[hermitian]))):
            logger.debug(f"Hermitian observables picked up imaginary parts at t={t:.4g}")
        values[:, s] = raw.real
        trace[s] = float((trace_row @ v).real[0])
        leak[s] = float((leak_row @ v).real[0])
        if abs(trace[s] - 1) > cfg.trace_tolerance:
            raise IntegrationAborted("trace", f"Trace drifted to {trace[s]:.12g} at t={t:.4g}", t)
        if leak[s] > cfg.leak_tolerance:
            raise IntegrationAborted(
                "leak", f"Population {leak[s]:.3e} on the outer {cfg.edge_rungs} rungs at t={t:.4g}; widen the window", t)
        asym = generator.hermiticity_error(v)
        if asym > settings.HERMITIAN_TOLERANCE:
            raise IntegrationAborted("hermiticity", f"State lost Hermiticity ({asym:.3e}) at t={t:.4g}", t)

    if cfg.check_positivity:
        lowest = _minimum_eigenvalue(generator.unvectorise(v))
        if lowest < -settings.POSITIVITY_TOLERANCE:
            raise IntegrationAborted("positivity", f"Final state has eigenvalue {lowest:.3e}", t_end)

    wall = time.perf_counter() - started
    logger.info(f"Finished {bundle.tag} in {wall:.2f}s; max trace drift {np.max(np.abs(trace - 1)):.2e}")
    return ObservableSeries(
        tag=bundle.tag, params=bundle.params, times=times,
        values={n: values[i] for i, n in enumerate(names)},
        leak=leak, trace=trace, dt=dt, t_end=float(times[-1]), wall_time=wall,
        characteristic_rate=bundle.characteristic_rate, bath_rate=bundle.bath_rate,
    )


def evolve_state(bundle: ModelBundle, t: float, initial: Optional[DensityState] = None,
                 cfg: Optional[IntegrationConfig] = None) -> DensityState:
    """State at time t (lab frame only when rotating_frame and sector_reduction are both off).

    Trace and Hermiticity drift abort the run like in `integrate`; the state is never renormalised.
    """
    cfg = cfg or IntegrationConfig()
    initial = initial or bundle.default_initial_state()
    generator, v = _generator_for(bundle, initial, cfg)
    max_rate = bundle.max_rate(rotating_frame=cfg.rotating_frame or cfg.sector_reduction)
    dt = cfg.dt or settings.MAX_RATE_STEP / max_rate
    n_steps = max(1, math.ceil(t / dt))
    for _ in range(n_steps):
        v = generator.rk4_step(v, t / n_steps)
    if not np.all(np.isfinite(v)):
        raise IntegrationAborted("nan", f"Non-finite state entries at t={t:.4g}", t)
    asym = generator.hermiticity_error(v)
    if asym > settings.HERMITIAN_TOLERANCE:
        raise IntegrationAborted("hermiticity", f"State lost Hermiticity ({asym:.3e}) at t={t:.4g}", t)
    rho = generator.unvectorise(v)
    trace = float(np.trace(rho).real)
    if abs(trace - 1) > cfg.trace_tolerance:
        raise IntegrationAborted("trace", f"Trace drifted to {trace:.12g} at t={t:.4g}", t)
    state = DensityState(layout=bundle.layout, matrix=rho)
    if cfg.check_positivity and state.min_eigenvalue() < -settings.POSITIVITY_TOLERANCE:
        raise IntegrationAborted("positivity", f"Evolved state has eigenvalue {state.min_eigenvalue():.3e}", t)
    return state


def _linear_fit(t: np.ndarray, y: np.ndarray) -> Tuple[float, float, float]:
    """Least-squares slope, intercept and r^2; a flat series counts as a perfect fit."""
    fit = linregress(t, y)
    residual = y - (fit.intercept + fit.slope * t)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    floor = len(y) * (1e-12 * max(1.0, float(np.max(np.abs(y))))) ** 2
    if ss_tot <= floor:
        return float(fit.slope), float(fit.intercept), 1.0
    return float(fit.slope), float(fit.intercept), 1.0 - float(np.sum(residual ** 2)) / ss_tot


def extract_ness(series: ObservableSeries, cfg: Optional[IntegrationConfig] = None) -> NessReport:
    """Fit the asymptotic linear regime of <W> and Var(W); average the heat currents."""
    cfg = cfg or IntegrationConfig()
    params = series.params
    window = series.times >= cfg.transient_cut * series.t_end
    if np.count_nonzero(window) < 3:
        raise ValueError("Fewer than three samples remain after the transient cut.")
    t = series.times[window]
    span = float(t[-1] - t[0])
    slow = min(r for r in (series.bath_rate, series.characteristic_rate) if r > 0)
    if span < 10 / slow * (1 - 1e-9):
        logger.warning(f"Fit window spans {span:.4g}, shorter than 10/min-rate = {10 / slow:.4g}")

    W_dot, _, r2_mean = _linear_fit(t, series["W"][window])
    DeltaW_dot, _, r2_var = _linear_fit(t, series.variance[window])
    Q1 = float(np.mean(series["Q1"][window]))
    Q2 = float(np.mean(series["Q2"][window]))
    Sigma_dot = float(np.mean(-params.beta1 * series["Q1"][window] - params.beta2 * series["Q2"][window]))

    scale = series.bath_rate * params.E_v
    eta = W_dot / Q2 if abs(Q2) > 1e-12 * scale else math.nan
    tur = DeltaW_dot * Sigma_dot / W_dot ** 2 if abs(W_dot) > 1e-12 * scale else math.nan
    bias = "Z" if "Z" in series.values and not series.tag.startswith("3qe") else "sigma3_z"

    report = NessReport(
        tag=series.tag, W_dot=W_dot, DeltaW_dot=DeltaW_dot, Sigma_dot=Sigma_dot, Q1_dot=Q1, Q2_dot=Q2,
        eta=eta, tur_ratio=tur, fit_r2_mean=r2_mean, fit_r2_variance=r2_var,
        C_mean=float(np.mean(series["C"][window])),
        Z_mean=float(np.mean(series[bias][window])),
        N_mean=float(np.mean(series["N"][window])) if "N" in series.values else None,
        H_int_mean=float(np.mean(series["H_int"][window])),
        window_start=float(t[0]), window_end=float(t[-1]), samples=len(t),
    )
    if report.fit_r2 < cfg.min_r2:
        rejected = report.model_copy(update={"accepted": False})
        logger.error(f"Rejected {series.tag} fit: r2(mean)={r2_mean:.6f}, r2(var)={r2_var:.6f} < {cfg.min_r2}")
        raise FitRejected(f"Linear fit r^2 {report.fit_r2:.6f} below {cfg.min_r2}", rejected)
    logger.info(f"{series.tag}: W_dot={W_dot:.6g}, DeltaW_dot={DeltaW_dot:.6g}, Sigma_dot={Sigma_dot:.6g}, TUR={tur:.6g}")
    return report


def relative_deviation(value: float, reference: float, floor: float = 1e-12) -> float:
    return abs(value - reference) / max(abs(reference), floor)


def validate_effective_3qe(full_params: EngineParams, cfg: Optional[IntegrationConfig] = None,
                           window: WindowLike = None) -> EffectiveComparison:
    """Run the full three-qubit model and its eliminated counterpart with matching rates."""
    if full_params.p_prime is None or full_params.p_prime < 20 * max(full_params.k, full_params.g):
        raise ValueError(f"Need p' >= 20 max(k, g); got p'={full_params.p_prime}, k={full_params.k}, g={full_params.g}")
    cfg = cfg or IntegrationConfig()
    gamma_plus, gamma_minus, p_eff = effective_rates_from_full(full_params)

    full_bundle = build_3qe_full(full_params, window)
    effective_bundle = build_3qe_effective(full_params, window, rates=(gamma_plus, gamma_minus))
    # both runs share one horizon so the fit windows coincide
    _, _, t_end = resolve_config(effective_bundle, cfg)
    shared = cfg.model_copy(update={"t_end": cfg.t_end or t_end})

    full = extract_ness(integrate(full_bundle, cfg=shared), shared)
    effective = extract_ness(integrate(effective_bundle, cfg=shared), shared)

    comparison = EffectiveComparison(
        full=full, effective=effective, gamma_plus=gamma_plus, gamma_minus=gamma_minus, p_effective=p_eff,
        rel_dev_W_dot=relative_deviation(full.W_dot, effective.W_dot),
        rel_dev_DeltaW_dot=relative_deviation(full.DeltaW_dot, effective.DeltaW_dot),
        rel_dev_Sigma_dot=relative_deviation(full.Sigma_dot, effective.Sigma_dot),
    )
    logger.info(f"Full vs effective 3QE: dW={comparison.rel_dev_W_dot:.3%}, dDelta={comparison.rel_dev_DeltaW_dot:.3%}, "
                f"dSigma={comparison.rel_dev_Sigma_dot:.3%}")
    return comparison
