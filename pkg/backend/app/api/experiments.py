"""Fit and grid endpoints."""

import asyncio
import logging
from pathlib import Path

from fastapi import APIRouter, HTTPException, Query

from app.config import get_settings
from app.models import (
    LABEL_CONFIGS,
    ComparisonTable,
    ExperimentSpec,
    FitResponse,
    GridRequest,
)
from app.services.errors import CopulaVIError, SpecError
from app.services.experiments import label_param_counts, label_specs, run_experiment, run_grid_async

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api", tags=["experiments"])


def confine_output_dir(spec: ExperimentSpec) -> ExperimentSpec:
    """Resolve spec.output_dir under the configured results root.

    Relative paths are joined to the root; anything resolving outside it is a SpecError.
    """
    if not spec.output_dir:
        return spec
    root = Path(get_settings().output_dir).resolve()
    resolved = (root / spec.output_dir).resolve()
    if not resolved.is_relative_to(root):
        raise SpecError(f"output_dir '{spec.output_dir}' is outside the results root")
    return spec.model_copy(update={"output_dir": str(resolved)})


@router.get("/families")
async def list_families(
    m: int = Query(default=509, ge=1, description="Parameter dimension"),
    k: int = Query(default=5, ge=0, description="Number of factors"),
):
    """Labelled family configurations with their variational parameter counts."""
    counts = label_param_counts(m, min(k, m))
    return {
        "m": m,
        "k": k,
        "families": [
            {
                "label": label.value,
                "base": base.value,
                "transform": transform.value,
                "mean_field": mean_field,
                "n_params": counts[label.value],
            }
            for label, (base, transform, mean_field) in LABEL_CONFIGS.items()
        ],
    }


@router.post("/fit", response_model=FitResponse)
async def fit(spec: ExperimentSpec, tail: int = Query(default=100, ge=0)):
    """Run one fit and return its summary, moment table and the ELBO tail."""
    try:
        spec = confine_output_dir(spec)
        bundle = await asyncio.to_thread(run_experiment, spec)
    except CopulaVIError as e:
        logger.warning(f"Fit '{spec.name}' rejected: {e}")
        raise HTTPException(status_code=422, detail=str(e))
    return bundle.fit_response(tail)


@router.post("/grid", response_model=ComparisonTable)
async def grid(request: GridRequest):
    """Fit each requested label to the base spec's target and return the comparison table."""
    try:
        base = confine_output_dir(request.base)
        specs = label_specs(base, [label.value for label in request.labels], request.k)
        result = await run_grid_async(specs, request.workers)
    except CopulaVIError as e:
        logger.warning(f"Grid rejected: {e}")
        raise HTTPException(status_code=422, detail=str(e))
    return result.table
