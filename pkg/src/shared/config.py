"""Configuration management using Pydantic Settings."""

import os
from functools import lru_cache
from typing import List, Optional

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings with environment variable support."""

    model_config = SettingsConfigDict(
        env_prefix="PRERANKCAL_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Application settings
    environment: str = Field(default="development", description="Environment name")
    debug: bool = Field(default=False, description="Debug mode (console log renderer)")
    log_level: str = Field(default="INFO", description="Logging level")
    threads: Optional[int] = Field(
        default=None, ge=1, description="Worker threads; machine parallelism when unset"
    )

    # Distribution and calibration settings
    chol_floor: float = Field(default=1e-4, gt=0, description="Cholesky diagonal floor")
    grid_size: int = Field(default=100, ge=1, description="Quantile grid size M")
    temperature: float = Field(default=100.0, gt=0, description="Sigmoid temperature")
    samples: int = Field(default=100, ge=1, description="Predictive samples S per row")
    energy_samples: int = Field(default=100, ge=1, description="Energy score samples G")
    null_simulations: int = Field(
        default=50_000, ge=1, description="Null distribution replicates"
    )

    # Network and optimizer settings
    components: int = Field(default=5, ge=1, description="Mixture components K")
    hidden_widths: List[int] = Field(
        default=[100, 100, 100], description="Hidden layer widths"
    )
    learning_rate: float = Field(default=1e-4, gt=0, description="Adam learning rate")
    batch_size: int = Field(default=256, ge=1, description="Mini-batch size")
    max_epochs: int = Field(default=200, ge=1, description="Epoch budget")
    patience: int = Field(default=20, ge=1, description="Early-stopping patience")
    lambda_grid: List[float] = Field(
        default=[0.0, 0.01, 0.1, 1.0, 5.0, 10.0],
        description="Regularization strengths tried by the tuner",
    )

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level."""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"Log level must be one of: {valid_levels}")
        return v.upper()

    @field_validator("hidden_widths", "lambda_grid", mode="before")
    @classmethod
    def parse_list(cls, v: object) -> object:
        """Parse list settings from a comma-separated string."""
        if isinstance(v, str):
            return [item.strip() for item in v.split(",") if item.strip()]
        return v


class DevelopmentSettings(Settings):
    """Development environment settings."""

    debug: bool = True
    log_level: str = "DEBUG"


class ProductionSettings(Settings):
    """Production environment settings."""

    debug: bool = False
    log_level: str = "INFO"


class TestingSettings(Settings):
    """Testing environment settings."""

    debug: bool = True
    log_level: str = "WARNING"
    null_simulations: int = 2_000


@lru_cache()
def get_settings() -> Settings:
    """Get application settings based on environment."""
    environment = os.getenv("PRERANKCAL_ENVIRONMENT", "development").lower()

    if environment == "production":
        return ProductionSettings()
    elif environment == "testing":
        return TestingSettings()
    else:
        return DevelopmentSettings()


def resolve_threads(flag: Optional[int] = None) -> int:
    """Worker count: explicit flag, then PRERANKCAL_THREADS, then CPU count."""
    if flag is not None:
        return max(1, flag)
    configured = get_settings().threads
    if configured is not None:
        return configured
    return os.cpu_count() or 1
