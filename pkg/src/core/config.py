# src/core/config.py
import os
from typing import Optional, Tuple

from pydantic import Field
from pydantic_settings import BaseSettings
import logging
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

class Settings(BaseSettings):
    """Toolkit-wide numerical defaults and tolerances."""
    APP_NAME: str = "Quantum Engine Precision Toolkit"
    LOG_LEVEL: str = "INFO"

    # Load ladder truncation window
    DEFAULT_N_MIN: int = -40
    DEFAULT_N_MAX: int = 40
    EDGE_RUNGS: int = 5
    LEAK_TOLERANCE: float = 1e-8
    # three-qubit default window: load drift +- this many spreads over the horizon
    WINDOW_SIGMAS: float = 8.0

    # State and operator hygiene
    TRACE_TOLERANCE: float = 1e-9
    HERMITIAN_TOLERANCE: float = 1e-10
    SPARSE_DROP_TOLERANCE: float = 1e-15
    POSITIVITY_TOLERANCE: float = 1e-9

    # Integration and fitting
    MAX_RATE_STEP: float = 0.05
    HORIZON_FACTOR: float = 20.0
    TRANSIENT_CUT: float = 0.5
    SAMPLE_STRIDE: int = 10
    MIN_FIT_R2: float = 0.999
    # p'/k ratios of the full-versus-effective three-qubit check, e.g. ADIABATIC_RATIOS=[50,100]
    ADIABATIC_RATIOS: Tuple[float, ...] = Field(default=(20.0, 30.0), min_length=1)

    # Output
    RESULTS_DIR: str = "results"
    CSV_SIGNIFICANT_DIGITS: int = 12
    DEFAULT_JOBS: Optional[int] = None

    class Config:
        case_sensitive = True
        env_file = '.env'
        env_file_encoding = 'utf-8'

settings = Settings()

# Basic logging configuration
logging.basicConfig(level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO))
logger = logging.getLogger("qengine")

logger.debug("Settings loaded.")
if settings.DEFAULT_N_MIN >= 0 or settings.DEFAULT_N_MAX <= 0:
    logger.warning("Default ladder window does not straddle rung 0; models built without an explicit window will fail.")


def default_jobs() -> int:
    """Worker-pool size used when no --jobs flag is given."""
    return settings.DEFAULT_JOBS or os.cpu_count() or 1
