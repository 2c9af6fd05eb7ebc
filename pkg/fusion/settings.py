"""
Configuration management for the fusion calculus
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import field_validator
from pydantic_settings import BaseSettings

logger = logging.getLogger("Fusion.Settings")

DEFAULTS_PATH = Path(__file__).resolve().parent.parent / "config" / "defaults.yaml"


class Settings(BaseSettings):
    """Numerical and runtime settings."""

    # Runtime
    seed: Optional[int] = None
    log_level: str = "INFO"
    threads: int = 1

    # Support handling
    strict: bool = True
    empirical_floor: float = 1e-12

    # Tolerances
    tolerance: float = 1e-9
    adjoint_tolerance: float = 1e-11
    rank_tolerance: float = 1e-9
    decompose_tolerance: float = 1e-8
    fd_step: float = 1e-4

    defaults_path: str = str(DEFAULTS_PATH)

    class Config:
        env_prefix = "FUSION_"
        env_file = ".env"
        case_sensitive = False
        extra = "ignore"

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        level = v.upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"Unknown log level: {v}")
        return level

    @field_validator("threads")
    @classmethod
    def validate_threads(cls, v):
        if v < 1:
            raise ValueError("threads must be at least 1")
        return v

    @field_validator(
        "empirical_floor", "tolerance", "adjoint_tolerance",
        "rank_tolerance", "decompose_tolerance", "fd_step",
    )
    @classmethod
    def validate_positive(cls, v):
        if not v > 0:
            raise ValueError("tolerances and steps must be positive")
        return v


def _load_yaml(path: Path) -> Dict[str, Any]:
    """Load YAML defaults, returning an empty mapping when unavailable."""
    if not path.exists():
        logger.debug(f"No defaults file at {path}, using built-in defaults")
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        logger.error(f"Invalid YAML in {path}: {e}")
        return {}
    return data


def load_settings(path: Optional[str] = None) -> Settings:
    """Build settings from YAML defaults; environment variables take precedence."""
    yaml_path = Path(path or os.getenv("FUSION_DEFAULTS_PATH", str(DEFAULTS_PATH)))
    values = {
        key: value
        for key, value in (_load_yaml(yaml_path).get("settings") or {}).items()
        if f"FUSION_{key.upper()}" not in os.environ
    }
    return Settings(**values)


settings = load_settings()


def load_defaults(section: str, path: Optional[str] = None) -> Dict[str, Any]:
    """A non-settings section of the YAML defaults (``simulate``, ``figure``)."""
    return _load_yaml(Path(path or settings.defaults_path)).get(section, {}) or {}
