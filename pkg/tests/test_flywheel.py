import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.core.exceptions import IntegrationAborted
from src.schemas.engine import FlywheelParams
from src.services import flywheel as fw


@pytest.fixture
def params():
    return FlywheelParams.from_bias(chi=2.0, p0=0.6, omega_z=20.0, omega_0=1.0, d=0.1, N=1000)


def test_from_bias_hits_requested_walk(params):
    assert params.chi == pytest.approx(2.0)
    assert params.beta2 * params.omega_z == pytest.approx(0.482, abs=1e-3)
    dist = fw.step_distribution(params)
    assert dist.p_zero == pytest.approx(0.6)
    assert_allclose([dist.p_plus, dist.p_minus], [0.352319, 0.047681], rtol=1e-5)
    assert math.log(dist.p_plus / dist.p_minus) == pytest.approx(params.chi)


def test_from_bias_rejects_unreachable_points():
    with pytest.raises(ValueError):
        FlywheelParams.from_bias(chi=2.0, p0=1.2)
    with pytest.raises(ValueError):
        FlywheelParams.from_bias(chi=2.0, p0=0.3)


def test_tur_ratios_at_reference_point(params):
    assert fw.tur_ratio_flywheel(params) == pytest.approx(6.050384, rel=1e-6)
    assert fw.tur_ratio_fock(params) == pytest.approx(2.016795, rel=1e-6)
    assert fw.tur_ratio_ct(params.chi) == pytest.approx(2.6260706, rel=1e-7)


def test_moments_from_cumulants(params):
    dist = fw.step_distribution(params)
    one = fw.moments(dist, 1)
    assert one.mean_alpha == pytest.approx(0.0609276, rel=1e-5)
    # a single step is +-2d, so alpha^2 is 4d^2 whenever the flywheel moves
    assert one.E_alpha2 == pytest.approx(4 * params.d ** 2 * (dist.p_plus + dist.p_minus))
    many = fw.moments(dist, 250)
    assert many.mean_alpha == pytest.approx(250 * one.mean_alpha)
    assert many.var_alpha == pytest.approx(250 * one.var_alpha)
    assert fw.moments(dist, 0).E_alpha4 == 0.0


def test_generating_function_derivatives_match_cumulants(params):
    dist = fw.step_distribution(params)
    N, h = 40, 1e-4
    log_g = [math.log(fw.generating_function(dist, s, N)) for s in (-h, 0.0, h)]
    exact = fw.moments(dist, N)
    assert log_g[1] == 0.0
    assert (log_g[2] - log_g[0]) / (2 * h) == pytest.approx(exact.mean_alpha, rel=1e-6)
    assert (log_g[2] - 2 * log_g[1] + log_g[0]) / h ** 2 == pytest.approx(exact.var_alpha, rel=1e-4)


def test_cycle_heat_and_work_balance(params):
    cycle = fw.cycle_thermodynamics(params, displacement=3.0)
    assert cycle.Q1 + cycle.Q2 == pytest.approx(cycle.W_cyc)
    assert cycle.W_cyc > 0


def test_work_increment_matches_cycle_work(params):
    N = 100
    drift = fw.step_distribution(params).drift
    increment = (fw.asymptotic_work_fluct_entropy(params, N + 1).W_N
                 - fw.asymptotic_work_fluct_entropy(params, N).W_N)
    # <a + a^dag> = 2 <a> = 4 d (p+ - p-) N
    cycle = fw.cycle_thermodynamics(params, displacement=4 * params.d * drift * N)
    assert increment == pytest.approx(cycle.W_cyc, rel=1 / N)


def test_asymptotic_entropy_and_work(params):
    asym = fw.asymptotic_work_fluct_entropy(params)
    assert asym.Sigma_N / asym.N == pytest.approx(0.609276, rel=1e-5)
    # per-cycle rates at large N reproduce the flywheel TUR ratio
    N = 10 ** 6
    now, later = (fw.asymptotic_work_fluct_entropy(params, n) for n in (N, N + 1))
    power = later.W_N - now.W_N
    spread = later.DeltaW_N - now.DeltaW_N
    entropy = later.Sigma_N - now.Sigma_N
    assert spread * entropy / power ** 2 == pytest.approx(fw.tur_ratio_flywheel(params), rel=1e-4)


def test_monte_carlo_agrees_with_exact_moments(params):
    small = params.model_copy(update={"N": 100})
    run = fw.monte_carlo_walk(small, trials=5000, seed=7, checkpoints=[10, 50])
    assert [s.N for s in run.snapshots] == [10, 50, 100]
    exact = fw.moments(fw.step_distribution(small), 100)
    for name, z in run.final.z_scores(exact).items():
        assert abs(z) < 4.5, name


def test_monte_carlo_is_reproducible_across_worker_counts(params):
    small = params.model_copy(update={"N": 30})
    serial = fw.monte_carlo_walk(small, trials=2500, seed=11, jobs=1)
    parallel = fw.monte_carlo_walk(small, trials=2500, seed=11, jobs=2)
    assert serial.final.model_dump() == parallel.final.model_dump()
    other = fw.monte_carlo_walk(small, trials=2500, seed=12, jobs=1)
    assert other.final.mean_alpha != serial.final.mean_alpha


def test_monte_carlo_needs_trials(params):
    with pytest.raises(ValueError):
        fw.monte_carlo_walk(params, trials=0, seed=1)


def test_quantum_map_matches_random_walk(params):
    check = fw.quantum_map_check(params, n_cycles=10, fock_truncation=40)
    assert check.rel_dev_n < 1e-6
    assert check.rel_dev_n2 < 1e-6
    assert check.composite_mean_n == pytest.approx(check.oracle_mean_n, rel=1e-6)
    assert check.composite_mean_n2 == pytest.approx(check.oracle_mean_n2, rel=1e-6)


def test_quantum_map_aborts_when_truncation_is_too_small(params):
    with pytest.raises(IntegrationAborted) as info:
        fw.quantum_map_check(params, n_cycles=30, fock_truncation=5, composite=False)
    assert info.value.reason == "truncation"
    with pytest.raises(ValueError):
        fw.quantum_map_check(params, n_cycles=51)


def test_excited_population_is_finite_at_large_inverse_temperature():
    cold = FlywheelParams(omega_z=20.0, d=0.1, beta1=100.0, beta2=0.05, N=10)
    assert cold.excited_population(1) == pytest.approx(0.0, abs=1e-300)
    assert np.isfinite(fw.tur_ratio_flywheel(cold))


def test_cold_baths_never_move_the_flywheel():
    # both excited populations underflow to zero, so every cycle idles
    frozen = FlywheelParams(omega_z=20.0, omega_0=1.0, d=0.1, beta1=1e3, beta2=1e3, N=200)
    dist = fw.step_distribution(frozen)
    assert (dist.p_plus, dist.p_minus, dist.p_zero) == (0.0, 0.0, 1.0)

    run = fw.monte_carlo_walk(frozen, trials=500, seed=3, checkpoints=[50, 200])
    for snap in run.snapshots:
        assert snap.mean_alpha == 0.0
        assert snap.var_alpha == 0.0
        assert snap.mean_n == 0.0

    result = fw.quantum_map_check(frozen, n_cycles=10, fock_truncation=30)
    assert result.mean_n == 0.0
    assert result.mean_n2 == 0.0
    assert result.top_population == 0.0
    assert result.composite_mean_n == pytest.approx(0.0, abs=1e-10)
