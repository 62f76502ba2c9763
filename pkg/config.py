import os

from dotenv import load_dotenv

load_dotenv()


def _env_flag(name: str, default: bool) -> bool:
    value = os.environ.get(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


class Config:
    """Configuration settings for the controllable-factors laboratory"""

    # Storage settings
    RUNS_DIR = os.environ.get("ICF_RUNS_DIR", "runs")
    STORAGE_DB = os.environ.get("ICF_STORAGE_DB", "icf_runs.db")

    # Numerical floors shared by log/division guards
    LOG_EPSILON = 1e-8
    NORM_EPSILON = 1e-8
    BATCHNORM_EPSILON = 1e-5

    # Finite-value checks after every forward op (slow, meant for debugging)
    DEBUG_CHECKS = _env_flag("ICF_DEBUG_CHECKS", False)

    # Training loop progress line every N steps (0 disables)
    LOG_EVERY = int(os.environ.get("ICF_LOG_EVERY", "500"))

    # Hard cap for exhaustive state enumeration
    MAX_ENUMERATED_STATES = 1_000_000

    @classmethod
    def ensure_storage_dir(cls):
        """Create the runs directory if it doesn't exist"""
        os.makedirs(cls.RUNS_DIR, exist_ok=True)
