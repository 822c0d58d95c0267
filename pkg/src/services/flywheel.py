# src/services/flywheel.py
"""Qubit Otto engine driving a quantised flywheel: random-walk analytics, sampling and channel checks."""
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm

from src.core.config import logger
from src.core.exceptions import IntegrationAborted
from src.schemas.engine import FlywheelParams, StepDistribution
from src.schemas.reports import (
    CycleThermodynamics, FlywheelAsymptotics, MonteCarloMoments, MonteCarloRun, QuantumMapComparison, WalkMoments,
)
from src.services.closed_forms import chi_coth
from src.services.evolution import relative_deviation
from src.services.hilbert import (
    PROJ_EXCITED, PROJ_GROUND, FockOscillator, Qubit, build_space, embed_product, oscillator_ops, reduce_matrix,
    thermal_qubit,
)

MAX_MAP_CYCLES = 50
TRUNCATION_TOLERANCE = 1e-8
MC_BLOCK_SIZE = 1000


def step_distribution(params: FlywheelParams) -> StepDistribution:
    p1 = params.excited_population(1)
    p2 = params.excited_population(2)
    p_plus = p2 * (1 - p1)
    p_minus = p1 * (1 - p2)
    return StepDistribution(p_plus=p_plus, p_minus=p_minus, p_zero=1 - p_plus - p_minus, step=2 * params.d)


def generating_function(dist: StepDistribution, s: float, N: int = 1) -> float:
    """E[exp(s alpha_N)] = G1(s)^N with G1(s) = 1 + 2 sinh(ds)(p+ e^{ds} - p- e^{-ds})."""
    ds = dist.d * s
    g1 = 1 + 2 * math.sinh(ds) * (dist.p_plus * math.exp(ds) - dist.p_minus * math.exp(-ds))
    return g1 ** N


def step_cumulants(dist: StepDistribution) -> Tuple[float, float, float, float]:
    d = dist.d
    odd, even = dist.p_plus - dist.p_minus, dist.p_plus + dist.p_minus
    m1, m2, m3, m4 = 2 * d * odd, 4 * d ** 2 * even, 8 * d ** 3 * odd, 16 * d ** 4 * even
    k1 = m1
    k2 = m2 - m1 ** 2
    k3 = m3 - 3 * m2 * m1 + 2 * m1 ** 3
    k4 = m4 - 4 * m3 * m1 - 3 * m2 ** 2 + 12 * m2 * m1 ** 2 - 6 * m1 ** 4
    return k1, k2, k3, k4


def moments(dist: StepDistribution, N: int) -> WalkMoments:
    """Exact moments of alpha_N from N-fold cumulant addition."""
    if N < 0:
        raise ValueError(f"N must be non-negative, got {N}")
    K1, K2, K3, K4 = (N * k for k in step_cumulants(dist))
    E2 = K2 + K1 ** 2
    E4 = K4 + 4 * K3 * K1 + 3 * K2 ** 2 + 6 * K2 * K1 ** 2 + K1 ** 4
    return WalkMoments(N=N, mean_alpha=K1, var_alpha=K2, E_alpha2=E2, E_alpha4=E4, cumulants=[K1, K2, K3, K4])


def cycle_thermodynamics(params: FlywheelParams, displacement: float) -> CycleThermodynamics:
    """Heat from each isochore and work per cycle at flywheel displacement <a + a^dag>."""
    p1, p2 = params.excited_population(1), params.excited_population(2)
    shift = params.omega_0 * params.d * displacement
    return CycleThermodynamics(
        Q1=(p1 - p2) * (params.omega_z - shift),
        Q2=(p2 - p1) * (params.omega_z + shift),
        W_cyc=2 * params.omega_0 * params.d * (p2 - p1) * displacement,
    )


def asymptotic_work_fluct_entropy(params: FlywheelParams, N: Optional[int] = None) -> FlywheelAsymptotics:
    N = params.N if N is None else N
    dist = step_distribution(params)
    drift, spread = dist.drift, dist.p_plus + dist.p_minus
    d, w0 = params.d, params.omega_0
    return FlywheelAsymptotics(
        N=N,
        W_N=4 * w0 * d ** 2 * drift ** 2 * N ** 2,
        DeltaW_N=64 * w0 ** 2 * d ** 4 * drift ** 2 * (spread - drift ** 2) * N ** 3,
        Sigma_N=params.chi * drift * N,
    )


def tur_ratio_flywheel(params: FlywheelParams) -> float:
    """Large-N TUR ratio of the coherent-state flywheel."""
    drift = step_distribution(params).drift
    return 3 * (chi_coth(params.chi) - params.chi * drift)


def tur_ratio_fock(params: FlywheelParams) -> float:
    return tur_ratio_flywheel(params) / 3


def tur_ratio_ct(chi: float) -> float:
    """Continuous-time biased random walk."""
    return chi_coth(chi)


def _walk_block(p_plus: float, p_minus: float, N: int, checkpoints: Tuple[int, ...],
                seed: int, start: int, stop: int) -> np.ndarray:
    """Net step counts at each checkpoint for trials start..stop-1, one Philox stream per trial."""
    out = np.empty((stop - start, len(checkpoints)), dtype=np.int64)
    upper = 1 - p_minus
    idx = np.asarray(checkpoints)
    for row, trial in enumerate(range(start, stop)):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(trial,))))
        u = rng.random(N)
        steps = (u < p_plus).astype(np.int64) - (u >= upper).astype(np.int64)
        path = np.concatenate(([0], np.cumsum(steps)))
        out[row] = path[idx]
    return out


def _walk_block_args(args) -> np.ndarray:
    return _walk_block(*args)


def _empirical(alpha: np.ndarray, N: int) -> MonteCarloMoments:
    T = len(alpha)
    ddof = 1 if T > 1 else 0
    root = math.sqrt(T)
    a2, a4 = alpha ** 2, alpha ** 4
    mean = float(alpha.mean())
    var = float(alpha.var(ddof=ddof))
    central4 = float(np.mean((alpha - mean) ** 4))
    return MonteCarloMoments(
        N=N, trials=T,
        mean_alpha=mean, se_mean_alpha=float(alpha.std(ddof=ddof)) / root,
        var_alpha=var, se_var_alpha=math.sqrt(max(central4 - var ** 2, 0.0) / T),
        E_alpha4=float(a4.mean()), se_E_alpha4=float(a4.std(ddof=ddof)) / root,
        mean_n=float(a2.mean()), se_mean_n=float(a2.std(ddof=ddof)) / root,
        mean_n2=float((a4 + a2).mean()), se_mean_n2=float((a4 + a2).std(ddof=ddof)) / root,
    )


def monte_carlo_walk(params: FlywheelParams, trials: int, seed: int,
                     checkpoints: Optional[Sequence[int]] = None, jobs: int = 1) -> MonteCarloRun:
    """Sample the phase-space walk; identical output for a given seed whatever `jobs` is."""
    if trials < 1:
        raise ValueError("monte_carlo_walk needs at least one trial.")
    if trials < 100:
        logger.warning(f"Only {trials} trials: standard errors will be unreliable")
    N = params.N
    checkpoints = tuple(sorted(set(checkpoints or (N,)) | {N}))
    if checkpoints[0] < 0 or checkpoints[-1] > N:
        raise ValueError(f"Checkpoints must lie in 0..{N}, got {list(checkpoints)}")
    dist = step_distribution(params)
    blocks = [(dist.p_plus, dist.p_minus, N, checkpoints, seed, s, min(s + MC_BLOCK_SIZE, trials))
              for s in range(0, trials, MC_BLOCK_SIZE)]
    logger.info(f"Monte Carlo: {trials} trials x {N} cycles in {len(blocks)} blocks, seed={seed}, jobs={jobs}")
    if jobs > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            counts = list(executor.map(_walk_block_args, blocks))
    else:
        counts = [_walk_block(*b) for b in blocks]
    positions = np.concatenate(counts, axis=0) * dist.step
    snapshots = [_empirical(positions[:, i], n) for i, n in enumerate(checkpoints)]
    return MonteCarloRun(seed=seed, trials=trials, snapshots=snapshots)


def _displacement(alpha: float, n_max: int, pad: int) -> np.ndarray:
    """D(alpha) for real alpha, built in a padded space and cut to levels 0..n_max."""
    layout = build_space([FockOscillator(n_max=n_max + pad)])
    a, _ = oscillator_ops(layout, 0)
    big = expm(alpha * (a.dag() - a).to_dense())
    return big[: n_max + 1, : n_max + 1]


def _fock_moments(rho: np.ndarray) -> Tuple[float, float, float]:
    levels = np.arange(rho.shape[0])
    pops = np.real(np.diag(rho))
    return float(pops @ levels), float(pops @ levels ** 2), float(pops[-1])


def _check_truncation(top: float, cycle: int) -> None:
    if top > TRUNCATION_TOLERANCE:
        raise IntegrationAborted(
            "truncation", f"Top Fock level holds {top:.3e} after cycle {cycle}; raise fock_truncation", float(cycle))


def _reduced_map(dist: StepDistribution, n_cycles: int, n_max: int, pad: int) -> np.ndarray:
    forward = _displacement(dist.step, n_max, pad)
    backward = _displacement(-dist.step, n_max, pad)
    rho = np.zeros((n_max + 1, n_max + 1), dtype=complex)
    rho[0, 0] = 1.0
    for cycle in range(1, n_cycles + 1):
        rho = (dist.p_plus * forward @ rho @ forward.conj().T
               + dist.p_minus * backward @ rho @ backward.conj().T
               + dist.p_zero * rho)
        _check_truncation(float(np.real(rho[-1, -1])), cycle)
    return rho


def _composite_map(params: FlywheelParams, n_cycles: int, n_max: int, pad: int) -> np.ndarray:
    """Cycle U K1 U K2 on qubit (x) oscillator; returns the flywheel marginal."""
    layout = build_space([Qubit(), FockOscillator(n_max=n_max, frequency=params.omega_0)])
    parity = np.diag((-1.0) ** np.arange(n_max + 1))
    unitary = (embed_product({0: PROJ_EXCITED, 1: parity @ _displacement(params.d, n_max, pad)}, layout)
               + embed_product({0: PROJ_GROUND, 1: parity @ _displacement(-params.d, n_max, pad)}, layout)).to_dense()
    baths = [thermal_qubit(params.omega_z * params.beta2), thermal_qubit(params.omega_z * params.beta1)]
    dim = n_max + 1

    osc = np.zeros((dim, dim), dtype=complex)
    osc[0, 0] = 1.0
    for cycle in range(1, n_cycles + 1):
        for qubit in baths:
            joint = unitary @ np.kron(qubit, osc) @ unitary.conj().T
            osc = reduce_matrix(joint, layout.dims, keep=[1])
        _check_truncation(float(np.real(osc[-1, -1])), cycle)
    return osc


def quantum_map_check(params: FlywheelParams, n_cycles: int = 20, fock_truncation: int = 80,
                      composite: bool = True, pad: Optional[int] = None) -> QuantumMapComparison:
    """Iterate the flywheel channel on a truncated Fock space from the ground state."""
    if not 0 <= n_cycles <= MAX_MAP_CYCLES:
        raise ValueError(f"n_cycles must lie in 0..{MAX_MAP_CYCLES}, got {n_cycles}")
    pad = max(20, fock_truncation // 2) if pad is None else pad
    dist = step_distribution(params)
    oracle = moments(dist, n_cycles)

    mean_n, mean_n2, top = _fock_moments(_reduced_map(dist, n_cycles, fock_truncation, pad))
    composite_n = composite_n2 = None
    if composite:
        composite_n, composite_n2, _ = _fock_moments(_composite_map(params, n_cycles, fock_truncation, pad))

    result = QuantumMapComparison(
        n_cycles=n_cycles, fock_truncation=fock_truncation,
        mean_n=mean_n, mean_n2=mean_n2, oracle_mean_n=oracle.mean_n, oracle_mean_n2=oracle.mean_n2,
        rel_dev_n=relative_deviation(mean_n, oracle.mean_n),
        rel_dev_n2=relative_deviation(mean_n2, oracle.mean_n2),
        top_population=top, composite_mean_n=composite_n, composite_mean_n2=composite_n2,
    )
    logger.info(f"Fock channel after {n_cycles} cycles: <n>={mean_n:.8g} (oracle {oracle.mean_n:.8g}), "
                f"<n^2>={mean_n2:.8g} (oracle {oracle.mean_n2:.8g})")
    return result
