# src/cli/commands.py
from pathlib import Path
from typing import Optional, Sequence

from src.core.config import default_jobs, logger, settings
from src.core.exceptions import ConfigurationError, FitRejected, IntegrationAborted
from src.schemas.run import RunConfig
from src.services import sweeps

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

VALIDATION_DEFAULTS = {"g_over_p": "1"}


def _load(preset: Optional[str], config: Optional[str], overrides: Sequence[str],
          out: Optional[str], seed: Optional[int], defaults=None) -> RunConfig:
    run = sweeps.load_run_config(preset, config, overrides, defaults=defaults)
    updates = {}
    if out is not None:
        updates["out"] = out
    if seed is not None:
        updates["seed"] = seed
    return run.model_copy(update=updates) if updates else run


def _jobs(run: RunConfig, jobs: Optional[int]) -> int:
    return jobs or run.jobs or default_jobs()


def cmd_sweep(preset: Optional[str] = None, config: Optional[str] = None, overrides: Sequence[str] = (),
              out: Optional[str] = None, seed: Optional[int] = None, jobs: Optional[int] = None) -> int:
    """Run a parameter sweep and write one CSV per model."""
    try:
        run = _load(preset, config, overrides, out, seed)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG

    try:
        paths = sweeps.run_sweep(run, jobs=_jobs(run, jobs), label=preset or "sweep")
    except IntegrationAborted as e:
        logger.error(f"Integration aborted ({e.reason}): {e}", exc_info=True)
        return EXIT_NUMERICAL
    except FitRejected as e:
        logger.error(f"Fit rejected: {e}", exc_info=True)
        return EXIT_VALIDATION
    except ValueError as e:
        logger.error(f"Invalid parameters: {e}", exc_info=True)
        return EXIT_VALIDATION

    for path in paths:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_validate(level: str = "quick", preset: Optional[str] = None, config: Optional[str] = None,
                 overrides: Sequence[str] = (), out: Optional[str] = None, seed: Optional[int] = None,
                 jobs: Optional[int] = None) -> int:
    """Run the invariant suites; exit 0 only if every check passes."""
    try:
        run = _load(preset, config, overrides, out, seed, defaults=VALIDATION_DEFAULTS)
        if run.is_flywheel:
            raise ConfigurationError("validate runs the engine suites; drop model = flywheel")
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG

    try:
        params = run.engine_params()
        results = sweeps.run_validation(level, params, run.integration_config(), run.window(),
                                        seed=run.seed or 1, jobs=_jobs(run, jobs))
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except IntegrationAborted as e:
        logger.error(f"Integration aborted ({e.reason}): {e}", exc_info=True)
        return EXIT_NUMERICAL
    except (FitRejected, ValueError) as e:
        logger.error(f"Validation failed during construction or fitting: {e}", exc_info=True)
        return EXIT_VALIDATION

    path = Path(run.out) if run.out else Path(settings.RESULTS_DIR) / f"validate_{level}.csv"
    sweeps.write_rows(path, sweeps.VALIDATION_COLUMNS, sweeps.validation_rows(results))
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<45} value={r.value:.9g} expected={r.expected:.9g}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed; summary in {path}")
    if failed:
        logger.error(f"First failing invariant: {failed[0].name}")
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_flywheel_mc(preset: Optional[str] = None, config: Optional[str] = None, overrides: Sequence[str] = (),
                    out: Optional[str] = None, seed: Optional[int] = None, jobs: Optional[int] = None) -> int:
    """Monte Carlo moments of the flywheel walk against the generating-function values."""
    try:
        run = _load(preset, config, overrides, out, seed, defaults={"model": "flywheel"})
        if not run.is_flywheel:
            raise ConfigurationError("flywheel-mc needs model = flywheel")
        params = run.flywheel_params()
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except ValueError as e:
        logger.error(f"Invalid flywheel parameters: {e}")
        return EXIT_VALIDATION

    path = Path(run.out) if run.out else Path(settings.RESULTS_DIR) / "flywheel_mc.csv"
    try:
        sweeps.write_flywheel_mc(path, params, run.trials, run.seed, run.checkpoints, jobs=_jobs(run, jobs))
    except ValueError as e:
        logger.error(f"Monte Carlo failed: {e}", exc_info=True)
        return EXIT_VALIDATION
    print(f"wrote {path}")
    return EXIT_OK
