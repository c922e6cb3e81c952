import json
from pathlib import Path
from typing import Optional, Union

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from tsb_monitor.core.exceptions import ConfigError
from tsb_monitor.schemas.schemas import SamplerConfig, SimConfig, StaticLimitsConfig, Thresholds


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="TSB_",
        env_file=".env",
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="ignore",
    )

    # Application
    app_name: str = "TSB Monitor"
    log_level: str = "INFO"
    log_json: bool = True

    # Execution
    seed: int = 0
    workers: int = 1
    checkpoint_every: int = 500

    # Numerical configuration
    sim: SimConfig = SimConfig()
    sampler: SamplerConfig = SamplerConfig()
    static_limits: StaticLimitsConfig = StaticLimitsConfig()
    thresholds: Thresholds = Thresholds()


def load_settings(config_file: Optional[Union[str, Path]] = None, **overrides) -> Settings:
    """Build settings from the environment, overlaid by a JSON config file and overrides.

    Args:
        config_file: Optional JSON document mirroring the Settings structure
        overrides: Explicit values (e.g. CLI flags) that win over both sources

    Returns:
        Validated settings
    """
    data = {}
    if config_file is not None:
        path = Path(config_file)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file is not valid JSON: {e}") from e
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return Settings(**data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


# Global settings instance
settings = Settings()
