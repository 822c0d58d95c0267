# src/services/sweeps.py
"""Config loading, parameter sweeps, validation suites and CSV output behind the CLI."""
import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np

from src.core.config import settings, logger
from src.core.exceptions import ConfigurationError, FitRejected, IntegrationAborted
from src.schemas.engine import EngineParams, FlywheelParams
from src.schemas.evolution import IntegrationConfig
from src.schemas.reports import BOUND_CONSTANTS, ValidationResult
from src.schemas.run import RunConfig
from src.services import closed_forms as cf
from src.services import flywheel as fw
from src.services.evolution import (
    extract_ness, integrate, relative_deviation, resolve_config, validate_effective_3qe,
)
from src.services.models import build_model, effective_rates_from_full

PRESETS_DIR = Path(__file__).resolve().parent.parent / "presets"

RATE_FIELDS = ("W_dot", "DeltaW_dot", "Sigma_dot", "tur_ratio", "eta")
ENGINE_COLUMNS = (
    ["model", "sweep_name", "sweep_value"]
    + list(RATE_FIELDS)
    + [f"{f}_analytic" for f in RATE_FIELDS]
    + [f"rel_dev_{f}" for f in RATE_FIELDS]
    + ["fit_r2", "wall_time", "status"]
)
FLYWHEEL_COLUMNS = [
    "sweep_name", "sweep_value", "chi", "p_plus", "p_minus", "p_zero",
    "tur_coherent", "tur_fock", "tur_ct", "W_N", "DeltaW_N", "Sigma_N", "status",
]
MC_COLUMNS = [
    "N", "trials",
    "mean_alpha", "se_mean_alpha", "var_alpha", "se_var_alpha",
    "mean_n", "se_mean_n", "mean_n2", "se_mean_n2",
    "analytic_mean_alpha", "analytic_var_alpha", "analytic_mean_n", "analytic_mean_n2",
    "z_mean_alpha", "z_var_alpha", "z_mean_n", "z_mean_n2", "status",
]
VALIDATION_COLUMNS = ["name", "passed", "value", "expected", "tolerance", "wall_time", "detail"]


# --- configuration -----------------------------------------------------------

def parse_assignments(text: str, source: str = "<config>") -> Dict[str, str]:
    """Flat `key = value` lines; `#` starts a comment."""
    assignments: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{number}: expected 'key = value', got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigurationError(f"{source}:{number}: empty key or value")
        assignments[key] = value
    return assignments


def parse_overrides(overrides: Sequence[str]) -> Dict[str, str]:
    return parse_assignments("\n".join(overrides), source="--set")


def load_preset(name: str) -> Dict[str, str]:
    path = PRESETS_DIR / f"{name}.conf"
    if not path.is_file():
        available = sorted(p.stem for p in PRESETS_DIR.glob("*.conf"))
        raise ConfigurationError(f"Unknown preset '{name}'. Available: {', '.join(available)}")
    return parse_assignments(path.read_text(encoding="utf-8"), source=str(path))


def load_run_config(preset: Optional[str] = None, config_path: Optional[str] = None,
                    overrides: Sequence[str] = (), defaults: Optional[Dict[str, str]] = None) -> RunConfig:
    """Merge defaults < preset < config file < --set overrides into a RunConfig."""
    assignments = dict(defaults or {})
    if preset:
        assignments.update(load_preset(preset))
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"Config file not found: {config_path}")
        assignments.update(parse_assignments(path.read_text(encoding="utf-8"), source=str(path)))
    assignments.update(parse_overrides(overrides))
    return RunConfig.from_assignments(assignments)


# --- CSV ---------------------------------------------------------------------

def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, f".{settings.CSV_SIGNIFICANT_DIGITS}g")
    return str(value)


class CsvSink:
    """Writes rows under a fixed header and flushes after each one."""

    def __init__(self, path: Path, columns: Sequence[str]):
        self.path = Path(path)
        self.columns = list(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = self.path.open("w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._handle, lineterminator="\n")
        self._writer.writerow(self.columns)

    def write(self, row: Dict[str, object]) -> None:
        self._writer.writerow([format_cell(row.get(c)) for c in self.columns])
        self._handle.flush()

    def failure(self, message: str, **fields) -> None:
        self.write({**fields, "status": f"FAILED: {message}"})

    def close(self) -> None:
        self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_rows(path: Path, columns: Sequence[str], rows: Iterable[Dict[str, object]]) -> Path:
    with CsvSink(path, columns) as sink:
        for row in rows:
            sink.write(row)
    return Path(path)


# --- sweeps ------------------------------------------------------------------

def analytic_params(tag: str, params: EngineParams) -> EngineParams:
    """Parameters the closed forms expect; the full 3QE is compared at its effective rate."""
    if tag == "3qe-full":
        _, _, p_eff = effective_rates_from_full(params)
        return params.model_copy(update={"p": p_eff})
    return params


def engine_point(tag: str, params: EngineParams, window, cfg: IntegrationConfig,
                 sweep_name: Optional[str], sweep_value: Optional[float]) -> Dict[str, object]:
    """Simulate one sweep point and set it against the closed forms."""
    started = time.perf_counter()
    series = integrate(build_model(tag, params, window), cfg=cfg)
    ness = extract_ness(series, cfg)
    oracle = cf.analytic_report(tag, analytic_params(tag, params))
    row: Dict[str, object] = {"model": tag, "sweep_name": sweep_name, "sweep_value": sweep_value,
                              "fit_r2": ness.fit_r2, "status": "ok"}
    analytic = {"W_dot": oracle.W_dot, "DeltaW_dot": oracle.DeltaW_dot, "Sigma_dot": oracle.Sigma_dot,
                "tur_ratio": oracle.tur_ratio, "eta": oracle.eta}
    for field in RATE_FIELDS:
        simulated = getattr(ness, field)
        row[field] = simulated
        row[f"{field}_analytic"] = analytic[field]
        row[f"rel_dev_{field}"] = relative_deviation(simulated, analytic[field])
    row["wall_time"] = time.perf_counter() - started
    return row


def _engine_point_args(args) -> Dict[str, object]:
    return engine_point(*args)


def flywheel_point(params: FlywheelParams, sweep_name: Optional[str], sweep_value: Optional[float]) -> Dict[str, object]:
    dist = fw.step_distribution(params)
    asym = fw.asymptotic_work_fluct_entropy(params)
    return {
        "sweep_name": sweep_name, "sweep_value": sweep_value, "chi": params.chi,
        "p_plus": dist.p_plus, "p_minus": dist.p_minus, "p_zero": dist.p_zero,
        "tur_coherent": fw.tur_ratio_flywheel(params), "tur_fock": fw.tur_ratio_fock(params),
        "tur_ct": fw.tur_ratio_ct(params.chi),
        "W_N": asym.W_N, "DeltaW_N": asym.DeltaW_N, "Sigma_N": asym.Sigma_N, "status": "ok",
    }


def _ordered_map(fn: Callable, tasks: List[tuple], jobs: int) -> Iterator:
    """Results in task order; a worker pool only when it can help."""
    if jobs <= 1 or len(tasks) <= 1:
        return (fn(t) for t in tasks)
    executor = ProcessPoolExecutor(max_workers=jobs)

    def results():
        try:
            yield from executor.map(fn, tasks)
        finally:
            executor.shutdown(wait=True, cancel_futures=True)

    return results()


def output_paths(run: RunConfig, label: str) -> Dict[str, Path]:
    base = Path(run.out) if run.out else Path(settings.RESULTS_DIR) / f"{label}.csv"
    if len(run.models) == 1:
        return {run.models[0]: base}
    return {tag: base.with_name(f"{base.stem}_{tag}{base.suffix or '.csv'}") for tag in run.models}


def run_sweep(run: RunConfig, jobs: int = 1, label: str = "sweep") -> List[Path]:
    """One CSV per model; on failure a marker row is flushed and the error re-raised."""
    paths = output_paths(run, label)
    name = run.sweep.name if run.sweep else None
    points = run.points()
    written = []
    if run.is_flywheel:
        path = paths["flywheel"]
        with CsvSink(path, FLYWHEEL_COLUMNS) as sink:
            for value in points:
                try:
                    sink.write(flywheel_point(run.flywheel_params(value), name, value))
                except ValueError as e:
                    sink.failure(str(e), sweep_name=name, sweep_value=value)
                    raise
        logger.info(f"Wrote {len(points)} flywheel rows to {path}")
        return [path]

    cfg = run.integration_config()
    window = run.window()
    for tag in run.models:
        path = paths[tag]
        tasks = [(tag, run.engine_params(value), window, cfg, name, value) for value in points]
        logger.info(f"Sweeping {tag} over {len(tasks)} point(s) with {jobs} worker(s) -> {path}")
        with CsvSink(path, ENGINE_COLUMNS) as sink:
            done = 0
            try:
                for row in _ordered_map(_engine_point_args, tasks, jobs):
                    sink.write(row)
                    done += 1
            except (FitRejected, IntegrationAborted, ValueError) as e:
                value = points[done] if done < len(points) else None
                sink.failure(f"{type(e).__name__}: {e}", model=tag, sweep_name=name, sweep_value=value)
                raise
        written.append(path)
    return written


# --- Monte Carlo ----------------------------------------------------------------

def flywheel_mc_rows(params: FlywheelParams, trials: int, seed: int,
                     checkpoints: Sequence[int] = (), jobs: int = 1) -> List[Dict[str, object]]:
    run = fw.monte_carlo_walk(params, trials, seed, checkpoints=checkpoints or None, jobs=jobs)
    dist = fw.step_distribution(params)
    rows = []
    for snap in run.snapshots:
        exact = fw.moments(dist, snap.N)
        z = snap.z_scores(exact)
        rows.append({
            "N": snap.N, "trials": snap.trials,
            "mean_alpha": snap.mean_alpha, "se_mean_alpha": snap.se_mean_alpha,
            "var_alpha": snap.var_alpha, "se_var_alpha": snap.se_var_alpha,
            "mean_n": snap.mean_n, "se_mean_n": snap.se_mean_n,
            "mean_n2": snap.mean_n2, "se_mean_n2": snap.se_mean_n2,
            "analytic_mean_alpha": exact.mean_alpha, "analytic_var_alpha": exact.var_alpha,
            "analytic_mean_n": exact.mean_n, "analytic_mean_n2": exact.mean_n2,
            "z_mean_alpha": z["mean_alpha"], "z_var_alpha": z["var_alpha"],
            "z_mean_n": z["mean_n"], "z_mean_n2": z["mean_n2"], "status": "ok",
        })
    return rows


def write_flywheel_mc(path: Path, params: FlywheelParams, trials: int, seed: int,
                      checkpoints: Sequence[int] = (), jobs: int = 1) -> Path:
    """Monte Carlo table; on failure a marker row is flushed and the error re-raised."""
    with CsvSink(path, MC_COLUMNS) as sink:
        try:
            rows = flywheel_mc_rows(params, trials, seed, checkpoints, jobs=jobs)
        except (IntegrationAborted, ValueError) as e:
            sink.failure(f"{type(e).__name__}: {e}", N=params.N, trials=trials)
            raise
        for row in rows:
            sink.write(row)
    logger.info(f"Wrote {len(rows)} Monte Carlo rows to {path}")
    return Path(path)


# --- validation suites ------------------------------------------------------------

def _check(name: str, value: float, expected: float, tolerance: float, relative: bool = False,
           detail: str = "") -> ValidationResult:
    error = relative_deviation(value, expected) if relative else abs(value - expected)
    return ValidationResult(name=name, passed=bool(error <= tolerance), value=value, expected=expected,
                            tolerance=tolerance, detail=detail)


def _bound(name: str, value: float, floor: float, detail: str = "") -> ValidationResult:
    return ValidationResult(name=name, passed=bool(value >= floor), value=value, expected=floor, detail=detail)


def _analytic_checks(params: EngineParams) -> List[ValidationResult]:
    results = []
    reset = cf.ness_2qe_reset(params)
    results.append(_check("coherence_form_identity",
                          cf.tur_coherence_form(params, reset.N_mean, reset.C_mean), reset.tur_ratio, 1e-10))
    for tag, r_star in (("2qe-reset", 1.0), ("2qe-local", math.sqrt(5 / 12)), ("3qe", 1 / (2 * math.sqrt(2)))):
        r, f = cf.bound_function_max(tag)
        results.append(_check(f"bound_function_argmax_{tag}", r, r_star, 1e-5))
        results.append(_check(f"bound_function_max_{tag}", f, cf.bound_function(tag, r_star), 1e-9))
        found = cf.minimize_bound_curve(tag)
        results.append(_check(f"bound_constant_{tag}", found.minimum, BOUND_CONSTANTS[tag],
                              1e-6 if tag == "2qe-reset" else 1e-3, detail=f"chi*={found.chi_star:.6f}"))
        report = cf.analytic_report(tag, params)
        results.append(_bound(f"tur_above_bound_{tag}", report.tur_ratio, BOUND_CONSTANTS[tag] - 1e-9))
    biased = params.model_copy(update={"beta2": (params.beta1 * params.E1 - 2.0) / params.E2})
    r_opt, _ = cf.optimal_coupling("2qe-reset", biased, grid=np.logspace(-1, 1, 41))
    results.append(_check("optimal_coupling_reset", r_opt, 1.0, 10 ** 0.05 - 1, relative=True))
    violating = EngineParams.from_products(beta1E1=3.0, beta2E2=1.0, p=1.0, g=1 / (2 * math.sqrt(2)))
    results.append(_check("three_qubit_tur_violation", cf.ness_3qe(violating).tur_ratio, 1.48368, 1e-5))
    return results


def _simulation_checks(params: EngineParams, cfg: IntegrationConfig, window,
                       tags: Sequence[str] = ("2qe-reset", "2qe-local", "3qe-effective")) -> List[ValidationResult]:
    results = []
    for tag in tags:
        started = time.perf_counter()
        series = integrate(build_model(tag, params, window), cfg=cfg)
        ness = extract_ness(series, cfg)
        oracle = cf.analytic_report(tag, params)
        wall = time.perf_counter() - started
        for field in ("W_dot", "DeltaW_dot", "Sigma_dot", "tur_ratio"):
            check = _check(f"{tag}_{field}", getattr(ness, field), getattr(oracle, field), 5e-3, relative=True)
            results.append(check.model_copy(update={"wall_time": wall}))
        results.append(_check(f"{tag}_C_mean", ness.C_mean, oracle.C_mean, 5e-3, relative=True))
        results.append(_check(f"{tag}_first_law", ness.Q1_dot + ness.Q2_dot, ness.W_dot, 1e-3, relative=True))
        results.append(_check(f"{tag}_efficiency", ness.eta, params.eta, 1e-3))
        results.append(_bound(f"{tag}_second_law", ness.Sigma_dot, -1e-9))
        results.append(_bound(f"{tag}_carnot", params.eta_carnot - ness.eta, 0.0))
        results.append(_check(f"{tag}_trace_drift", float(np.max(np.abs(series.trace - 1))), 0.0, settings.TRACE_TOLERANCE))
        if tag == "2qe-reset":
            results.append(_check(f"{tag}_H_int_vanishes", ness.H_int_mean, 0.0, 1e-4))
    return results


def _flywheel_checks(trials: int, N: int, seed: int, jobs: int) -> List[ValidationResult]:
    params = FlywheelParams.from_bias(chi=2.0, p0=0.6, omega_z=20.0, omega_0=1.0, d=0.1, N=N)
    results = [
        _check("flywheel_tur_coherent", fw.tur_ratio_flywheel(params), 6.0504, 1e-4),
        _check("flywheel_tur_fock", fw.tur_ratio_fock(params), 2.0168, 1e-4),
        _check("flywheel_tur_ct", fw.tur_ratio_ct(params.chi), 2.62607, 1e-5),
        _check("flywheel_detailed_balance", math.log(fw.step_distribution(params).p_plus
                                                     / fw.step_distribution(params).p_minus), params.chi, 1e-10),
    ]
    started = time.perf_counter()
    snap = fw.monte_carlo_walk(params, trials, seed, jobs=jobs).final
    z = snap.z_scores(fw.moments(fw.step_distribution(params), N))
    worst = max(z, key=lambda k: abs(z[k]))
    results.append(ValidationResult(name="flywheel_monte_carlo", passed=bool(abs(z[worst]) <= 4.0),
                                    value=abs(z[worst]), expected=0.0, tolerance=4.0,
                                    detail=f"worst z on {worst}", wall_time=time.perf_counter() - started))
    qmap = fw.quantum_map_check(params, n_cycles=20, fock_truncation=60)
    results.append(_check("quantum_map_mean_n", qmap.mean_n, qmap.oracle_mean_n, 1e-6, relative=True))
    results.append(_check("quantum_map_mean_n2", qmap.mean_n2, qmap.oracle_mean_n2, 1e-6, relative=True))
    results.append(_check("composite_map_mean_n", qmap.composite_mean_n, qmap.oracle_mean_n, 1e-6, relative=True))
    return results


def adiabatic_elimination_deviations(params: EngineParams, cfg: IntegrationConfig,
                                     ratios: Sequence[float], window=(-10, 30)) -> List[float]:
    """Relative W_dot deviation of the full from the effective 3QE at p'/k = p'/g = ratio."""
    deviations = []
    for ratio in ratios:
        full = params.model_copy(update={"p_prime": 1.0, "k": 1.0 / ratio, "g": 1.0 / ratio})
        _, _, p_eff = effective_rates_from_full(full)
        run_cfg = cfg.model_copy(update={"t_end": 16 / p_eff})
        deviations.append(validate_effective_3qe(full, run_cfg, window=window).rel_dev_W_dot)
    return deviations


def _full_only_checks(params: EngineParams, cfg: IntegrationConfig, window, jobs: int) -> List[ValidationResult]:
    results = []
    for tag in ("2qe-reset", "2qe-local", "3qe-effective"):
        tasks = [(tag, params.model_copy(update={"g": r * params.p}), window, cfg, "g_over_p", r)
                 for r in np.geomspace(0.05, 5, 20)]
        rows = list(_ordered_map(_engine_point_args, tasks, jobs))
        worst = max(max(row[f"rel_dev_{f}"] for f in ("W_dot", "Sigma_dot", "DeltaW_dot", "tur_ratio")) for row in rows)
        results.append(ValidationResult(name=f"oracle_sweep_{tag}", passed=bool(worst <= 5e-3), value=worst,
                                        expected=0.0, tolerance=5e-3,
                                        wall_time=float(sum(row["wall_time"] for row in rows))))

    bundle = build_model("2qe-reset", params, window)
    dt, _, _ = resolve_config(bundle, cfg)
    coarse = extract_ness(integrate(bundle, cfg=cfg), cfg)
    fine_cfg = cfg.model_copy(update={"dt": dt / 2, "sample_stride": cfg.sample_stride * 2})
    fine = extract_ness(integrate(bundle, cfg=fine_cfg), fine_cfg)
    results.append(_check("dt_halving_W_dot", fine.W_dot, coarse.W_dot, 1e-3, relative=True))
    results.append(_check("dt_halving_DeltaW_dot", fine.DeltaW_dot, coarse.DeltaW_dot, 1e-3, relative=True))

    ratios = sorted(settings.ADIABATIC_RATIOS)
    deviations = adiabatic_elimination_deviations(params, cfg, ratios)
    for ratio, deviation in zip(ratios, deviations):
        results.append(_check(f"adiabatic_elimination_W_dot_ratio_{ratio:g}", deviation, 0.0, 5e-2))
    improving = all(later < earlier for earlier, later in zip(deviations, deviations[1:]))
    results.append(ValidationResult(name="adiabatic_elimination_improves", passed=bool(improving),
                                    value=deviations[-1], expected=deviations[0]))
    return results


def run_validation(level: str, params: EngineParams, cfg: Optional[IntegrationConfig] = None,
                   window=None, seed: int = 1, jobs: int = 1) -> List[ValidationResult]:
    """Run the invariant suites; `quick` stays within about a minute."""
    if level not in ("quick", "full"):
        raise ConfigurationError(f"Unknown validation level '{level}'")
    cfg = cfg or IntegrationConfig()
    results = _analytic_checks(params)
    results += _simulation_checks(params, cfg, window)
    if level == "quick":
        results += _flywheel_checks(trials=2000, N=200, seed=seed, jobs=1)
    else:
        results += _flywheel_checks(trials=100_000, N=1000, seed=seed, jobs=jobs)
        results += _full_only_checks(params, cfg, window, jobs)
    passed = sum(r.passed for r in results)
    logger.info(f"Validation ({level}): {passed}/{len(results)} checks passed")
    return results


def validation_rows(results: Sequence[ValidationResult]) -> List[Dict[str, object]]:
    return [r.model_dump() for r in results]
