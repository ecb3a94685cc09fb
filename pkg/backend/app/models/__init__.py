"""Pydantic models for copula-vi."""

from .experiments import (
    BaseFamily,
    EntropyGradient,
    Estimator,
    ExperimentSpec,
    FamilyLabel,
    FamilySpec,
    GridRequest,
    LABEL_CONFIGS,
    OptimizerConfig,
    TargetKind,
    TargetSpec,
    VerifyRequest,
)
from .results import (
    CheckResult,
    ComparisonRow,
    ComparisonTable,
    FitResponse,
    MomentRow,
    RunSummary,
    VerificationReport,
)

__all__ = [
    # Experiments
    "BaseFamily",
    "EntropyGradient",
    "Estimator",
    "ExperimentSpec",
    "FamilyLabel",
    "FamilySpec",
    "GridRequest",
    "LABEL_CONFIGS",
    "OptimizerConfig",
    "TargetKind",
    "TargetSpec",
    "VerifyRequest",
    # Results
    "CheckResult",
    "ComparisonRow",
    "ComparisonTable",
    "FitResponse",
    "MomentRow",
    "RunSummary",
    "VerificationReport",
]
