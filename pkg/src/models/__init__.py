"""Models package."""
from .config import ExperimentConfig, InitialMeasureSpec, ModelConfig, RunConfig, SimConfig, TestFunctionSpec
from .results import Base, EnsembleSummary, RunManifest, RunRecordDB, Verdict

__all__ = [
    "ExperimentConfig",
    "InitialMeasureSpec",
    "ModelConfig",
    "RunConfig",
    "SimConfig",
    "TestFunctionSpec",
    "Base",
    "EnsembleSummary",
    "RunManifest",
    "RunRecordDB",
    "Verdict",
]
