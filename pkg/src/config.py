"""
Configuration management using Pydantic Settings.
Loads SUPERFLOW_* environment variables with validation and type safety.
"""
import os
from typing import Optional

from pydantic_settings import BaseSettings
from pydantic import Field


class Settings(BaseSettings):
    """Toolkit settings loaded from environment variables."""

    # Runtime
    threads: int = Field(
        default_factory=lambda: os.cpu_count() or 1,
        ge=1,
        description="Upper bound on worker threads for replicate batches and independent solves"
    )
    log_level: str = Field(default="INFO", description="Root logging level")

    # Numerics
    grid_size: int = Field(default=401, ge=3, description="Nodes on the largest truncation")
    fd_step: float = Field(default=1e-4, gt=0, description="Finite-difference step without a grid")
    eigen_tol: float = Field(default=1e-12, gt=0, description="Backward-error tolerance of the eigensolver")
    eigen_max_iter: int = Field(default=50000, ge=1, description="Inverse power iteration cap")
    criticality_threshold: float = Field(
        default=1e-3, gt=0, description="Relative change of the product integral treated as stable"
    )
    truncation_tol: float = Field(default=1e-4, gt=0, description="Relative truncation adequacy tolerance")

    # Particles
    population_cap: float = Field(default=1e7, gt=0, description="Particle-steps allowed per replicate")
    batch_size: int = Field(default=250, ge=1, description="Replicates simulated in one vectorized batch")

    # Redis spectral cache
    cache_enabled: bool = Field(default=False, description="Use Redis to cache spectral triples")
    redis_host: str = Field(default="redis", description="Redis server hostname")
    redis_port: int = Field(default=6379, description="Redis server port")
    cache_ttl_seconds: int = Field(default=86400, description="Cache TTL in seconds")

    # Run ledger
    ledger_url: Optional[str] = Field(
        default=None,
        description="SQLAlchemy URL of the run ledger; disabled when unset"
    )

    class Config:
        env_prefix = "SUPERFLOW_"
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = False


# Global settings instance
settings = Settings()
