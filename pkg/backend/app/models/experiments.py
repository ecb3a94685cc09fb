"""Experiment configuration models: optimizer, family, target and the full run spec."""

from __future__ import annotations

import hashlib
import json
from enum import Enum
from typing import Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from app.services.transforms import TransformKind


class Estimator(str, Enum):
    """ELBO gradient estimator."""

    REPARAM = "reparam"
    SCORE = "score"  # score function with a running-mean baseline


class EntropyGradient(str, Enum):
    """How the reparameterization gradient treats the entropy term.

    ``pathwise`` drops the zero-mean score term (w = grad log g - grad log q only);
    ``total`` also subtracts grad_lambda log q at fixed theta.
    """

    PATHWISE = "pathwise"
    TOTAL = "total"


class OptimizerConfig(BaseModel):
    """Stochastic gradient ascent settings."""

    n_steps: int = Field(default=5000, ge=1)
    samples_per_step: int = Field(default=1, ge=1)
    seed: int = Field(default=20190501, ge=0)
    adadelta_rho: float = Field(default=0.95, gt=0.0, lt=1.0)
    adadelta_eps: float = Field(default=1e-6, gt=0.0)
    estimator: Estimator = Estimator.REPARAM
    entropy_gradient: EntropyGradient = EntropyGradient.PATHWISE
    elbo_window: int = Field(default=1000, ge=1)
    checkpoint_every: int = Field(default=1000, ge=0)  # 0 disables checkpoints
    sample_workers: int = Field(default=1, ge=1)
    flagged_step_threshold: float = Field(default=0.01, ge=0.0, le=1.0)
    init_map: bool = False


class BaseFamily(str, Enum):
    GAUSSIAN = "gaussian"
    SKEWNORMAL = "skewnormal"


class FamilyLabel(str, Enum):
    """Named configurations of the comparison grid."""

    A1 = "A1"  # mean-field Gaussian
    A2 = "A2"  # mean-field Gaussian copula, YJ margins
    A3 = "A3"  # Gaussian, factor covariance
    A4 = "A4"  # skew-normal, factor covariance
    A5 = "A5"  # Gaussian copula, YJ
    A6 = "A6"  # skew-normal copula, YJ
    A7 = "A7"  # Gaussian copula, inverse G&H
    A8 = "A8"  # skew-normal copula, inverse G&H


# label -> (base, transform, mean_field)
LABEL_CONFIGS: dict[FamilyLabel, tuple[BaseFamily, TransformKind, bool]] = {
    FamilyLabel.A1: (BaseFamily.GAUSSIAN, TransformKind.IDENTITY, True),
    FamilyLabel.A2: (BaseFamily.GAUSSIAN, TransformKind.YEO_JOHNSON, True),
    FamilyLabel.A3: (BaseFamily.GAUSSIAN, TransformKind.IDENTITY, False),
    FamilyLabel.A4: (BaseFamily.SKEWNORMAL, TransformKind.IDENTITY, False),
    FamilyLabel.A5: (BaseFamily.GAUSSIAN, TransformKind.YEO_JOHNSON, False),
    FamilyLabel.A6: (BaseFamily.SKEWNORMAL, TransformKind.YEO_JOHNSON, False),
    FamilyLabel.A7: (BaseFamily.GAUSSIAN, TransformKind.INVERSE_GH, False),
    FamilyLabel.A8: (BaseFamily.SKEWNORMAL, TransformKind.INVERSE_GH, False),
}


class FamilySpec(BaseModel):
    """Variational family: base distribution, margin transform and factor count."""

    base: BaseFamily = BaseFamily.GAUSSIAN
    transform: TransformKind = TransformKind.IDENTITY
    k: int = Field(default=3, ge=0)
    mean_field: bool = False

    @property
    def effective_k(self) -> int:
        return 0 if self.mean_field else self.k

    @property
    def label(self) -> Optional[FamilyLabel]:
        """A1-A8 label, or None for configurations outside the grid (mean-field skew-normal)."""
        for label, (base, transform, mean_field) in LABEL_CONFIGS.items():
            if (base, transform, mean_field) == (self.base, self.transform, self.mean_field):
                return label
        return None

    @classmethod
    def from_label(cls, label: FamilyLabel | str, k: int = 3) -> FamilySpec:
        base, transform, mean_field = LABEL_CONFIGS[FamilyLabel(label)]
        return cls(base=base, transform=transform, k=0 if mean_field else k, mean_field=mean_field)


class TargetKind(str, Enum):
    LOGISTIC = "logistic"
    MIXED_LOGISTIC = "mixed_logistic"
    GAUSSIAN_TOY = "gaussian_toy"
    SYNTHETIC_LOGISTIC = "synthetic_logistic"
    SYNTHETIC_MIXED = "synthetic_mixed"


class TargetSpec(BaseModel):
    """Posterior target: a dataset on disk, a synthetic design, or the Gaussian toy."""

    kind: TargetKind = TargetKind.GAUSSIAN_TOY

    # CSV-backed targets
    dataset_path: Optional[str] = None
    add_intercept: bool = False
    standardize: bool = False
    subject_column: Optional[str] = None

    # priors
    prior_var: float = Field(default=10.0, gt=0.0)
    zeta_prior_var: float = Field(default=10.0, gt=0.0)

    # Gaussian toy
    toy_mean: Optional[list[float]] = None
    toy_cov: Optional[list[list[float]]] = None
    toy_log_evidence: float = 0.0

    # synthetic designs
    n: int = Field(default=200, ge=1)
    p: int = Field(default=2, ge=1)
    n_subjects: int = Field(default=10, ge=1)
    obs_per_subject: int = Field(default=10, ge=1)
    data_seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_sources(self) -> TargetSpec:
        if self.kind in (TargetKind.LOGISTIC, TargetKind.MIXED_LOGISTIC) and not self.dataset_path:
            raise ValueError(f"target '{self.kind.value}' needs dataset_path")
        if self.kind is TargetKind.MIXED_LOGISTIC and not self.subject_column:
            raise ValueError("mixed_logistic needs subject_column")
        if self.kind is TargetKind.GAUSSIAN_TOY:
            if self.toy_mean is None:
                self.toy_mean = [0.0, 0.0]
            if self.toy_cov is None:
                m = len(self.toy_mean)
                self.toy_cov = [[1.0 if i == j else 0.0 for j in range(m)] for i in range(m)]
            if len(self.toy_cov) != len(self.toy_mean) or any(
                len(row) != len(self.toy_mean) for row in self.toy_cov
            ):
                raise ValueError("toy_cov must be m x m with m = len(toy_mean)")
        return self


class ExperimentSpec(BaseModel):
    """One fit: target x family x optimizer settings, echoed into every output."""

    name: str = "experiment"
    target: TargetSpec = Field(default_factory=TargetSpec)
    family: FamilySpec = Field(default_factory=FamilySpec)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    output_dir: Optional[str] = None
    marginal_coords: list[int] = Field(default_factory=lambda: [0])
    moment_draws: int = Field(default=100_000, ge=1)
    marginal_grid_points: int = Field(default=512, ge=2)
    oracle: bool = True  # quadrature / analytic reference moments when available

    @field_validator("marginal_coords")
    @classmethod
    def _non_negative(cls, v: list[int]) -> list[int]:
        if any(c < 0 for c in v):
            raise ValueError("marginal_coords must be non-negative")
        return v

    def spec_hash(self) -> str:
        """SHA-256 of the canonical (sorted-key) JSON form, output_dir excluded."""
        payload = self.model_dump(mode="json", exclude={"output_dir"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def target_key(self) -> str:
        """Hash of the target alone; grid entries must agree on it."""
        canonical = json.dumps(self.target.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class GridRequest(BaseModel):
    """Fit several labelled families to the base spec's target."""

    base: ExperimentSpec = Field(default_factory=ExperimentSpec)
    labels: list[FamilyLabel] = Field(
        default_factory=lambda: [FamilyLabel(f"A{i}") for i in range(3, 9)], min_length=1
    )
    k: Optional[int] = Field(default=None, ge=0)
    workers: int = Field(default=2, ge=1)


class VerifyRequest(BaseModel):
    instances: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)
    checks: Optional[list[str]] = None
