"""
CeBath runtime configuration.
Process-level knobs (workers, logging, output root) come from the environment;
physics parameters live in the experiment YAML (see app.schemas.experiment).
"""
import os
from functools import lru_cache
from pathlib import Path

from pydantic import model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

# Project root (parent of simulator/)
PROJECT_ROOT = Path(__file__).resolve().parents[2]


class Settings(BaseSettings):
    """Runtime settings loaded from CEBATH_* environment variables."""

    # Parallel cluster map; None means all available cores
    workers: int | None = None

    # Clusters per work item; fixed so results never depend on `workers`
    cluster_chunk_size: int = 512

    log_level: str = "INFO"
    output_root: Path = Path("runs")
    progress: bool = True

    model_config = SettingsConfigDict(
        env_prefix="CEBATH_",
        # Allow running from repo root (./.env) or from ./simulator (../.env)
        env_file=[".env", "../.env"],
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @model_validator(mode="after")
    def resolve_output_root(self) -> "Settings":
        """Resolve a relative output root against the project root so scripts and CLI agree."""
        if not self.output_root.is_absolute():
            self.output_root = (PROJECT_ROOT / self.output_root).resolve()
        return self

    def effective_workers(self) -> int:
        """Worker count to use. Unset or non-positive means every available core."""
        if self.workers and self.workers > 0:
            return self.workers
        return os.cpu_count() or 1


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
