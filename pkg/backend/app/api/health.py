"""Health check endpoints."""

import platform
from datetime import datetime, timezone

import psutil
from fastapi import APIRouter, Response

from app.services.healthcheck import HealthStatus, get_health_checker

router = APIRouter()


@router.get("/health")
async def health_check():
    """Basic health check."""
    return {
        "status": "healthy",
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }


@router.get("/health/detailed")
async def detailed_health():
    """Detailed health check with system info and engine checks."""
    memory = psutil.virtual_memory()
    report = await get_health_checker().run_all_checks()

    return {
        "status": report.status.value,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "system": {
            "platform": platform.system(),
            "machine": platform.machine(),
            "python": platform.python_version(),
        },
        "cpu": {
            "percent": psutil.cpu_percent(interval=0.1),
            "cores": psutil.cpu_count(),
        },
        "memory": {
            "used_gb": round(memory.used / (1024**3), 2),
            "total_gb": round(memory.total / (1024**3), 2),
            "percent": memory.percent,
        },
        "checks": report.to_dict()["checks"],
    }


@router.get("/health/ready")
async def readiness_check():
    """
    Readiness check.

    Returns 503 when the numerical stack or the derivative checks fail.
    """
    report = await get_health_checker().run_all_checks()
    critical = ["numerics", "derivatives"]
    if all(c.status == HealthStatus.HEALTHY for c in report.checks if c.name in critical):
        return {"ready": True, "status": report.status.value}
    return Response(content='{"ready": false}', status_code=503, media_type="application/json")
