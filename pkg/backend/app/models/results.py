"""Result models for fits, grids and verification reports."""

from __future__ import annotations

import math
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, computed_field


class MomentRow(BaseModel):
    """First three posterior moments of one coordinate, from family draws."""

    coord: int
    mean: float
    sd: float
    skew: float
    oracle_mean: Optional[float] = None
    oracle_sd: Optional[float] = None
    oracle_skew: Optional[float] = None


class RunSummary(BaseModel):
    """JSON summary of one fit; the spec echo makes it reproducible on its own."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    spec_hash: str
    name: str
    label: Optional[str] = None
    n_params: int
    n_steps: int
    seed: int
    window_average_elbo: float
    flagged_steps: int
    healthy: bool
    minutes_per_1000_steps: float
    lambda_checksum: str
    log_evidence: Optional[float] = None
    ceiling_gap: Optional[float] = None
    spec: dict[str, Any] = Field(default_factory=dict)
    target: dict[str, Any] = Field(default_factory=dict)
    artifacts: dict[str, str] = Field(default_factory=dict)


class ComparisonRow(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    label: Optional[str] = None
    name: str
    n_params: int
    window_average_elbo: float
    minutes_per_1000_steps: float
    healthy: bool
    spec_hash: str


class ComparisonTable(BaseModel):
    """One row per family fitted to a shared target."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    target_key: str
    rows: list[ComparisonRow] = Field(default_factory=list)

    def ranked(self) -> list[ComparisonRow]:
        """Rows by decreasing window-average ELBO; ties keep grid order, non-finite rows last."""
        return sorted(
            self.rows,
            key=lambda r: (not math.isfinite(r.window_average_elbo),
                           -r.window_average_elbo if math.isfinite(r.window_average_elbo) else 0.0),
        )


class CheckResult(BaseModel):
    """Outcome of one registered derivative or moment check."""

    name: str
    max_rel_err: float
    tolerance: float
    passed: bool
    instances: int = 1
    details: str = ""


class VerificationReport(BaseModel):
    checks: list[CheckResult] = Field(default_factory=list)

    @computed_field  # type: ignore[misc]
    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @computed_field  # type: ignore[misc]
    @property
    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]


class FitResponse(BaseModel):
    """API response for a single fit."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    summary: RunSummary
    moments: list[MomentRow] = Field(default_factory=list)
    elbo_tail: list[float] = Field(default_factory=list)
