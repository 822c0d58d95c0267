import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.core.config import settings
from src.core.exceptions import FitRejected, IntegrationAborted
from src.schemas.engine import EngineParams
from src.schemas.evolution import IntegrationConfig, ObservableSeries
from src.services import closed_forms as cf
from src.services import sweeps
from src.services.evolution import (
    LiouvilleGenerator, evolve_state, extract_ness, integrate, relative_deviation, resolve_config,
    validate_effective_3qe,
)
from src.services.hilbert import DensityState, expectation, product_state, rung_projector
from src.services.models import build_2qe_reset, build_model, effective_rates_from_full


@pytest.fixture
def params():
    return EngineParams.from_products(beta1E1=3.0, beta2E2=1.0, p=1.0, g=1.0)


def test_default_step_resolves_fastest_rate(params):
    bundle = build_2qe_reset(params, window=(-6, 6))
    dt, n_steps, t_end = resolve_config(bundle, IntegrationConfig())
    assert dt * bundle.max_rate() <= settings.MAX_RATE_STEP * (1 + 1e-9)
    assert t_end == pytest.approx(settings.HORIZON_FACTOR / bundle.characteristic_rate)
    assert n_steps * dt == pytest.approx(t_end)
    with pytest.raises(ValueError):
        resolve_config(bundle, IntegrationConfig(dt=1.0))


def test_short_horizon_still_gives_enough_samples(params):
    bundle = build_2qe_reset(params, window=(-6, 6))
    cfg = IntegrationConfig(t_end=0.01)
    _, n_steps, _ = resolve_config(bundle, cfg)
    assert n_steps // cfg.sample_stride >= 20


def test_sector_reduction_matches_full_liouville_space(params):
    bundle = build_2qe_reset(params, window=(-15, 15))
    reduced_cfg = IntegrationConfig(t_end=2.0, edge_rungs=2)
    full_cfg = reduced_cfg.model_copy(update={"sector_reduction": False})
    reduced = integrate(bundle, cfg=reduced_cfg)
    full = integrate(bundle, cfg=full_cfg)
    assert LiouvilleGenerator(bundle).matrix.shape[0] < bundle.layout.dim ** 2
    assert_allclose(reduced.times, full.times)
    for name in ("W", "W2", "C", "Q1", "Q2"):
        assert_allclose(reduced[name], full[name], atol=1e-10)


def test_off_sector_state_is_rejected_by_reduced_generator(params):
    bundle = build_2qe_reset(params, window=(-3, 3))
    generator = LiouvilleGenerator(bundle)
    rho = bundle.default_initial_state().matrix.copy()
    # coherence between states whose free energies differ by E1
    rho[0, 2 * 7] = rho[2 * 7, 0] = 0.01
    with pytest.raises(ValueError):
        generator.vectorise(rho)


def test_trace_and_hermiticity_preserved(params):
    series = integrate(build_2qe_reset(params, window=(-15, 15)), cfg=IntegrationConfig(t_end=3.0, edge_rungs=2))
    assert np.max(np.abs(series.trace - 1)) < 1e-9
    assert np.all(series.leak < 1e-8)
    assert series["W"][0] == pytest.approx(0.0, abs=1e-14)


def test_narrow_window_aborts_on_leak(params):
    with pytest.raises(IntegrationAborted) as info:
        integrate(build_2qe_reset(params, window=(-3, 3)))
    assert info.value.reason == "leak"


def test_evolve_state_keeps_a_valid_density_matrix(params):
    bundle = build_2qe_reset(params, window=(-10, 10))
    state = evolve_state(bundle, 1.0, cfg=IntegrationConfig(check_positivity=True))
    assert isinstance(state, DensityState)
    assert state.check_positive()


def test_evolve_state_agrees_with_integrated_series(params):
    bundle = build_2qe_reset(params, window=(-10, 10))
    series = integrate(bundle, cfg=IntegrationConfig(t_end=1.0))
    state = evolve_state(bundle, 1.0, cfg=IntegrationConfig(dt=series.dt))
    assert abs(np.trace(state.matrix).real - 1) <= settings.TRACE_TOLERANCE
    for name in ("W", "W2", "Z", "N"):
        assert expectation(state, bundle.observables[name]) == pytest.approx(series[name][-1], abs=1e-8), name


def test_zero_coupling_gives_no_power():
    params = EngineParams.from_products(beta1E1=3.0, beta2E2=1.0, p=1.0, g=0.0)
    cfg = IntegrationConfig(t_end=20.0)
    ness = extract_ness(integrate(build_2qe_reset(params, window=(-10, 10)), cfg=cfg), cfg)
    assert ness.W_dot == pytest.approx(0.0, abs=1e-12)
    assert ness.DeltaW_dot == pytest.approx(0.0, abs=1e-12)
    assert math.isnan(ness.tur_ratio)


@pytest.mark.parametrize("tag", ["2qe-reset", "2qe-local", "3qe-effective"])
def test_steady_state_rates_match_closed_forms(params, tag):
    cfg = IntegrationConfig()
    ness = extract_ness(integrate(build_model(tag, params), cfg=cfg), cfg)
    oracle = cf.analytic_report(tag, params)
    for field in ("W_dot", "DeltaW_dot", "Sigma_dot", "tur_ratio"):
        assert relative_deviation(getattr(ness, field), getattr(oracle, field)) < 1e-2, field
    assert ness.C_mean == pytest.approx(oracle.C_mean, rel=1e-2)
    assert ness.Q1_dot + ness.Q2_dot == pytest.approx(ness.W_dot, rel=1e-2)
    assert ness.eta == pytest.approx(params.eta, abs=1e-2)
    assert ness.Sigma_dot > 0
    assert ness.fit_r2 >= cfg.min_r2


def test_reset_interaction_energy_vanishes_in_steady_state(params):
    cfg = IntegrationConfig()
    ness = extract_ness(integrate(build_2qe_reset(params), cfg=cfg), cfg)
    assert ness.H_int_mean == pytest.approx(0.0, abs=1e-4)
    assert ness.W_dot == pytest.approx(0.073838, rel=1e-2)


def _synthetic_series(params, W, W2):
    times = np.linspace(0.0, 40.0, 81)
    flat = np.ones_like(times)
    return ObservableSeries(
        tag="2qe-reset", params=params, times=times,
        values={"W": W(times), "W2": W2(times), "Q1": -0.3 * flat, "Q2": 0.8 * flat,
                "C": 0.1 * flat, "Z": 0.2 * flat, "H_int": 0.0 * flat},
        leak=0.0 * flat, trace=flat, dt=0.01, t_end=40.0, characteristic_rate=1.0, bath_rate=1.0,
    )


def test_extract_ness_on_linear_series(params):
    series = _synthetic_series(params, lambda t: 0.5 * t, lambda t: 0.25 * t ** 2 + 0.2 * t)
    ness = extract_ness(series)
    assert ness.W_dot == pytest.approx(0.5)
    assert ness.DeltaW_dot == pytest.approx(0.2)
    assert ness.eta == pytest.approx(0.5 / 0.8)
    assert ness.Sigma_dot == pytest.approx(0.3 * params.beta1 - 0.8 * params.beta2)
    assert ness.window_start == pytest.approx(20.0)
    assert ness.accepted


def test_extract_ness_rejects_nonlinear_growth(params):
    series = _synthetic_series(params, np.sin, lambda t: np.sin(t) ** 2 + t)
    with pytest.raises(FitRejected) as info:
        extract_ness(series)
    assert info.value.report is not None
    assert not info.value.report.accepted


def test_effective_model_check_needs_separated_scales(params):
    with pytest.raises(ValueError):
        validate_effective_3qe(params.model_copy(update={"k": 0.5, "p_prime": 1.0}))


def test_effective_model_check_without_load_coupling():
    full = EngineParams.from_products(beta1E1=3.0, beta2E2=1.0, p=1.0, g=0.0, k=0.05, p_prime=1.0)
    comparison = validate_effective_3qe(full, IntegrationConfig(t_end=5.0), window=(-10, 10))
    assert comparison.full.W_dot == pytest.approx(0.0, abs=1e-12)
    assert comparison.rel_dev_W_dot == pytest.approx(0.0, abs=1e-9)
    assert comparison.p_effective == pytest.approx(comparison.gamma_plus + comparison.gamma_minus)


@pytest.mark.slow
def test_full_three_qubit_model_approaches_effective_model():
    full = EngineParams.from_products(beta1E1=3.0, beta2E2=1.0, p=1.0, g=0.05, k=0.05, p_prime=1.0)
    _, _, p_eff = effective_rates_from_full(full)
    comparison = validate_effective_3qe(full, IntegrationConfig(t_end=16 / p_eff), window=(-10, 30))
    assert comparison.rel_dev_W_dot < 5e-2


@pytest.mark.parametrize("ratio", [5.0, 10.0])
def test_strong_coupling_stays_inside_default_window(params, ratio):
    row = sweeps.engine_point("3qe-effective", params.model_copy(update={"g": ratio}), None,
                              IntegrationConfig(), "g_over_p", ratio)
    assert row["status"] == "ok"
    assert row["rel_dev_W_dot"] < 1e-2
    assert row["rel_dev_tur_ratio"] < 1e-2


@pytest.mark.slow
def test_halving_the_step_leaves_rates_unchanged(params):
    bundle = build_2qe_reset(params)
    cfg = IntegrationConfig()
    dt, _, _ = resolve_config(bundle, cfg)
    coarse = extract_ness(integrate(bundle, cfg=cfg), cfg)
    fine_cfg = cfg.model_copy(update={"dt": dt / 2, "sample_stride": cfg.sample_stride * 2})
    fine = extract_ness(integrate(bundle, cfg=fine_cfg), fine_cfg)
    assert fine.W_dot == pytest.approx(coarse.W_dot, rel=1e-3)
    assert fine.DeltaW_dot == pytest.approx(coarse.DeltaW_dot, rel=1e-3)


@pytest.mark.slow
def test_effective_model_improves_as_qubits_get_faster(params):
    coarse, fine = sweeps.adiabatic_elimination_deviations(params, IntegrationConfig(), ratios=(10, 20))
    assert fine < coarse


def test_decoupled_load_stays_frozen_while_qubits_relax(params):
    bundle = build_2qe_reset(params.model_copy(update={"g": 0.0}), window=(-3, 3))
    ladder = bundle.layout.factor(2)
    start = product_state(bundle.layout, [np.diag([0.5, 0.5]), np.diag([0.5, 0.5]), rung_projector(ladder, 0)])
    series = integrate(bundle, initial=start, cfg=IntegrationConfig(t_end=30.0))
    assert np.abs(series["W"]).max() < 1e-12
    assert np.abs(series["W2"]).max() < 1e-12
    assert np.abs(series["C"]).max() < 1e-12
    assert series["Z"][0] == pytest.approx(0.0, abs=1e-14)
    assert series["Z"][-1] == pytest.approx(0.221515, rel=1e-5)
