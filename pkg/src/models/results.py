"""
Result data models.
Pydantic schemas for verdicts and manifests, a tabular ensemble summary, and the
SQLAlchemy row of the run ledger.
"""
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from sqlalchemy import Column, DateTime, Integer, String, Text
from sqlalchemy.orm import declarative_base

from src.utils.ensemble import mean_and_se, proportion_se, variance_se

Base = declarative_base()


class Verdict(BaseModel):
    """Outcome of one verification experiment."""
    experiment: str
    passed: bool = Field(..., alias="pass")
    metrics: Dict[str, object] = Field(default_factory=dict)

    model_config = ConfigDict(
        populate_by_name=True,
        json_schema_extra={
            "example": {"experiment": "martingale", "pass": True, "metrics": {"level": 1.0, "max_z": 1.7}}
        },
    )


class RunManifest(BaseModel):
    """Provenance of one CLI run; outputs maps artifact name to SHA-256."""
    config_hash: str
    master_seed: int
    version: str
    outputs: Dict[str, str] = Field(default_factory=dict)


@dataclass
class EnsembleSummary:
    """Replicate-level statistics of one observable over a time grid."""

    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    standard_error: np.ndarray
    variance_error: np.ndarray
    replicates: int
    config_hash: str = ""
    seed: int = 0
    tails: Dict[float, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_samples(cls, times: Sequence[float], samples: np.ndarray, epsilons: Sequence[float] = (),
                     center: Optional[np.ndarray] = None, config_hash: str = "", seed: int = 0) -> "EnsembleSummary":
        """samples[replicate, time]; tails are P(|sample - center| > eps) with center per replicate."""
        samples = np.asarray(samples, dtype=float)
        mean, variance, se = mean_and_se(samples, axis=0)
        tails = {}
        if center is not None:
            deviation = np.abs(samples - np.asarray(center, dtype=float).reshape(-1, 1))
            for eps in epsilons:
                tails[float(eps)] = np.mean(deviation > eps, axis=0)
        return cls(np.asarray(times, dtype=float), mean, variance, se, variance_se(samples, axis=0),
                   samples.shape[0], config_hash, seed, tails)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "t": self.times,
            "mean": self.mean,
            "variance": self.variance,
            "standard_error": self.standard_error,
        })
        for eps, frequency in sorted(self.tails.items()):
            frame[f"tail_{eps:g}"] = frequency
            frame[f"tail_{eps:g}_se"] = proportion_se(frequency, self.replicates)
        return frame


# SQLAlchemy ORM Model
class RunRecordDB(Base):
    """Ledger row for one CLI run."""
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    subcommand = Column(String(32), nullable=False)
    experiment = Column(String(32), nullable=True)
    config_hash = Column(String(64), nullable=False)
    master_seed = Column(String(20), nullable=False)
    version = Column(String(16), nullable=False)
    exit_code = Column(Integer, nullable=False)
    manifest = Column(Text, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow, nullable=False)

    def to_dict(self) -> dict:
        """Convert database model to dictionary."""
        return {
            "id": self.id,
            "subcommand": self.subcommand,
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "master_seed": int(self.master_seed),
            "version": self.version,
            "exit_code": self.exit_code,
        }
