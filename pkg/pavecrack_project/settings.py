
"""
Django settings for pavecrack_project.

The toolkit has no web surface and no database: Django provides the
settings layer, the management-command CLI and the test runner. Operator
knobs are read from the environment or a local ``.env`` file.
"""

from __future__ import annotations

import os
from pathlib import Path

from dotenv import load_dotenv


# Repository root; holds weights.lock and the optional .env.
BASE_DIR = Path(__file__).resolve().parent.parent
load_dotenv(BASE_DIR / ".env")


def _env_bool(name: str, default: bool = False) -> bool:
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in {"1", "true", "yes", "on"}


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    if value is None or not value.strip():
        return default
    return int(value)


def _env_float(name: str, default: float) -> float:
    value = os.getenv(name)
    if value is None or not value.strip():
        return default
    return float(value)


def _env_path(name: str, default: Path) -> Path:
    value = os.getenv(name)
    if value is None or not value.strip():
        return default
    return Path(value).expanduser()


INSTALLED_APPS = ["pavecrack.apps.PavecrackConfig"]

# Every artifact is a file; Django runs without a database or translations.
USE_I18N = False


# -----------------------------------------------------------------------------
# Pretrained weights
# -----------------------------------------------------------------------------

PAVECRACK_CACHE = _env_path("PAVECRACK_CACHE", Path.home() / ".cache" / "pavecrack")
PAVECRACK_WEIGHTS_LOCK = _env_path("PAVECRACK_WEIGHTS_LOCK", BASE_DIR / "weights.lock")
PAVECRACK_ALLOW_DOWNLOAD = _env_bool("PAVECRACK_ALLOW_DOWNLOAD", default=False)


# -----------------------------------------------------------------------------
# Training defaults (overridden by experiment config files and CLI flags)
# -----------------------------------------------------------------------------

PAVECRACK_DETERMINISTIC = _env_bool("PAVECRACK_DETERMINISTIC", default=True)

PAVECRACK_TRAIN_DEFAULTS = {
    "total_epochs": _env_int("PAVECRACK_TOTAL_EPOCHS", 80),
    "finetune_start_epoch": _env_int("PAVECRACK_FINETUNE_START", 60),
    "batch_size": _env_int("PAVECRACK_BATCH_SIZE", 32),
    "phase1_learning_rate": _env_float("PAVECRACK_PHASE1_LR", 1e-3),
    "phase2_learning_rate": _env_float("PAVECRACK_PHASE2_LR", 1e-5),
    "replicates": _env_int("PAVECRACK_REPLICATES", 5),
    "unfreeze_fraction": _env_float("PAVECRACK_UNFREEZE_FRACTION", 0.25),
    "threshold": _env_float("PAVECRACK_THRESHOLD", 0.5),
}


# -----------------------------------------------------------------------------
# Logging: structured key=value lines on stderr
# -----------------------------------------------------------------------------

PAVECRACK_LOG_LEVEL = os.getenv("PAVECRACK_LOG_LEVEL", "INFO").upper()

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "structured": {
            "format": "ts=%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s",
        },
    },
    "handlers": {
        "stderr": {
            "class": "logging.StreamHandler",
            "stream": "ext://sys.stderr",
            "formatter": "structured",
        },
    },
    "loggers": {
        "pavecrack": {
            "handlers": ["stderr"],
            "level": PAVECRACK_LOG_LEVEL,
            "propagate": False,
        },
    },
}
