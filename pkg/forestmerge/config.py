"""
Process configuration using pydantic-settings.
Loads configuration from environment variables with validation.
"""

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide settings loaded from FORESTMERGE_* environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="FORESTMERGE_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Application
    APP_NAME: str = "forestmerge"
    APP_VERSION: str = "0.1.0"
    LOG_LEVEL: str = "INFO"

    # Workers
    N_JOBS: int = 1
    PARALLEL_PREFER: str = "threads"  # joblib backend hint; closures need threads

    # Artifacts
    OUTPUT_DIR: str = "runs/latest"

    # Numerics
    PROBABILITY_FLOOR: float = 1e-6  # floor on classifier probabilities

    # Density traces
    MIXTURE_TRACE_BANDWIDTH: float = 0.4
    TRACE_GRID_POINTS: int = 512
    MODE_PROMINENCE: float = 0.1


# Global settings instance
settings = Settings()
