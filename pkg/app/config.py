"""Application configuration using pydantic-settings."""
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )

    # Application Settings
    app_name: str = Field(default="oppswitch", alias="APP_NAME")
    app_version: str = Field(default="1.0.0", alias="APP_VERSION")
    debug: bool = Field(default=False, alias="DEBUG")
    environment: str = Field(default="production", alias="ENVIRONMENT")

    # Controller server
    host: str = Field(default="0.0.0.0", alias="HOST")
    port: int = Field(default=8000, alias="PORT")

    # Logging
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")
    log_format: str = Field(default="json", alias="LOG_FORMAT")

    # Engine runtime
    context_capacity: int = Field(default=16384, alias="CONTEXT_CAPACITY", ge=1)
    table_default: str = Field(default="drop", alias="TABLE_DEFAULT")
    workers: int = Field(default=1, alias="WORKERS", ge=1)
    batch_size: int = Field(default=32, alias="BATCH_SIZE", ge=1)
    hash_seed: int = Field(default=0x0E5F5EED, alias="HASH_SEED", ge=0)
    trace: bool = Field(default=False, alias="TRACE")

    # iptables frontend
    conntrack_idle_timeout: float = Field(default=20.0, alias="CONNTRACK_IDLE_TIMEOUT", gt=0)
    nat_port_range: str = Field(default="1024-65535", alias="NAT_PORT_RANGE")

    # Program loaded by the controller at startup
    pipeline_path: Optional[str] = Field(default=None, alias="PIPELINE_PATH")

    @property
    def nat_port_range_tuple(self) -> tuple[int, int]:
        """Parse the "low-high" NAT port range."""
        low, _, high = self.nat_port_range.partition("-")
        return int(low), int(high or low)


# Global settings instance
settings = Settings()
