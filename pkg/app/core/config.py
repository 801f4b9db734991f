"""
app/core/config.py - Process Settings

Centralizes the process-level knobs of the tool: logging, worker pools and
the default external-command timeout. These never change the physics of a
run - everything that does lives in the JSON run configuration
(app/core/run_config.py), which has no environment overrides.

Pydantic Settings reads environment variables with the ANVIL_ prefix:

    ANVIL_LOG_LEVEL=DEBUG anvil cfd --config configs/land_vehicle_cfd.json

Usage:
    from app.core.config import settings

    settings.log_level  # "INFO"
"""

from pydantic_settings import BaseSettings, SettingsConfigDict

# Tool version written into every run manifest
TOOL_VERSION = "0.1.0"


class Settings(BaseSettings):
    """
    Process settings loaded from environment variables.

    The field 'log_level' is populated from ANVIL_LOG_LEVEL, and so on.
    """

    model_config = SettingsConfigDict(
        env_prefix="ANVIL_",
        env_file=".env",
        env_ignore_empty=True,
        extra="ignore",
    )

    # ============ Logging ============
    # loguru level name for the stderr sink
    log_level: str = "INFO"

    # Emit one JSON object per log line instead of the human format
    log_json: bool = False

    # ============ Execution ============
    # Upper bound on worker processes for data generation; the run config
    # may ask for fewer, never more
    max_workers: int = 8

    # Fallback timeout for external solver commands (seconds)
    external_timeout_s: float = 3600.0


settings = Settings()
