"""
Configuration management for plink
Handles environment-based process settings (logging, cache location, seeds)
"""

from functools import lru_cache
from typing import Optional

from pydantic import field_validator
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Process settings with environment variable support"""

    # Application
    app_name: str = "plink"
    environment: str = "development"
    debug: bool = False

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        if self.environment == "development":
            object.__setattr__(self, "debug", True)

    # Representation cache (PLINK_CACHE_DIR)
    plink_cache_dir: str = ".plink_cache"
    memory_cache_entries: int = 4096

    # Reproducibility
    default_seed: int = 13

    # Logging
    log_level: str = "INFO"
    log_format: str = "pretty"
    log_file: Optional[str] = None

    @field_validator("log_level")
    @classmethod
    def normalize_level(cls, v: str) -> str:
        """Accept lower-case level names from the environment"""
        return v.upper()

    class Config:
        env_file = ".env"
        case_sensitive = False


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()
