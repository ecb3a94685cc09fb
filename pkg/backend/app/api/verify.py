"""Derivative check endpoints."""

import asyncio

from fastapi import APIRouter, HTTPException

from app.models import VerificationReport, VerifyRequest
from app.services.errors import CopulaVIError
from app.services.verification import CHECKS, run_all_checks

router = APIRouter(prefix="/api/verify", tags=["verify"])


@router.get("/checks")
async def list_checks():
    """Registered checks."""
    return {
        "checks": [{"name": c.name, "description": c.description} for c in CHECKS.values()]
    }


@router.post("", response_model=VerificationReport)
async def verify(request: VerifyRequest):
    """Run the selected checks (all when none are named) on random instances."""
    try:
        return await asyncio.to_thread(
            run_all_checks, request.instances, request.seed, request.checks
        )
    except CopulaVIError as e:
        raise HTTPException(status_code=422, detail=str(e))
