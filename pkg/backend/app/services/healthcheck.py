"""
Health check system.

Checks:
- API responsiveness
- Numerical stack (numpy / scipy linear algebra against a dense reference)
- Output directory (writable, free disk)
- Memory headroom
- A quick pass of the derivative checks
"""

import asyncio
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import psutil
import scipy

from app.config import get_settings

logger = logging.getLogger(__name__)

VERSION = "0.3.0"
# Derivative checks cheap enough to run on every health probe.
QUICK_CHECKS = ["transforms.yeo_johnson", "transforms.inverse_gh", "gaussian.grad_theta"]


class HealthStatus(str, Enum):
    """Health check status levels."""
    HEALTHY = "healthy"
    DEGRADED = "degraded"
    UNHEALTHY = "unhealthy"
    UNKNOWN = "unknown"


@dataclass
class CheckResult:
    """Result of a single health check."""
    name: str
    status: HealthStatus
    message: str = ""
    latency_ms: float = 0
    details: dict = field(default_factory=dict)
    timestamp: datetime = field(default_factory=lambda: datetime.now(timezone.utc))


@dataclass
class HealthReport:
    """Complete health report for the system."""
    status: HealthStatus
    checks: list[CheckResult]
    timestamp: datetime = field(default_factory=lambda: datetime.now(timezone.utc))
    version: str = VERSION

    @property
    def healthy_count(self) -> int:
        return sum(1 for c in self.checks if c.status == HealthStatus.HEALTHY)

    @property
    def total_count(self) -> int:
        return len(self.checks)

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "version": self.version,
            "timestamp": self.timestamp.isoformat(),
            "summary": f"{self.healthy_count}/{self.total_count} checks passing",
            "checks": [
                {
                    "name": c.name,
                    "status": c.status.value,
                    "message": c.message,
                    "latency_ms": round(c.latency_ms, 2),
                    "details": c.details,
                }
                for c in self.checks
            ]
        }


class HealthChecker:
    """Runs health checks against the engine and its environment."""

    async def run_all_checks(self) -> HealthReport:
        """Run all health checks and return report."""
        checks = await asyncio.gather(
            self.check_api(),
            self.check_numerics(),
            self.check_output_dir(),
            self.check_memory(),
            self.check_derivatives(),
            return_exceptions=True,
        )

        results = []
        for check in checks:
            if isinstance(check, Exception):
                results.append(CheckResult(
                    name="unknown",
                    status=HealthStatus.UNHEALTHY,
                    message=str(check),
                ))
            else:
                results.append(check)

        if all(c.status == HealthStatus.HEALTHY for c in results):
            overall = HealthStatus.HEALTHY
        elif any(c.name in ("numerics", "derivatives") and c.status == HealthStatus.UNHEALTHY
                 for c in results):
            overall = HealthStatus.UNHEALTHY
        else:
            overall = HealthStatus.DEGRADED

        return HealthReport(status=overall, checks=results)

    async def check_api(self) -> CheckResult:
        """Check API is responsive."""
        start = time.time()
        return CheckResult(
            name="api",
            status=HealthStatus.HEALTHY,
            message="API is responsive",
            latency_ms=(time.time() - start) * 1000,
        )

    async def check_numerics(self) -> CheckResult:
        """Woodbury solve and log-determinant against dense numpy on a random factor scale."""
        from app.services.factor_scale import FactorScale, fs_dense, fs_logdet, fs_solve

        start = time.time()
        try:
            rng = np.random.default_rng(0)
            fs = FactorScale(np.tril(rng.normal(size=(20, 3))), rng.uniform(0.5, 1.5, size=20))
            v = rng.normal(size=20)
            dense = fs_dense(fs)
            solve_err = float(np.max(np.abs(dense @ fs_solve(fs, v) - v)))
            logdet_err = abs(fs_logdet(fs) - float(np.linalg.slogdet(dense)[1]))
            ok = solve_err < 1e-9 and logdet_err < 1e-9
            return CheckResult(
                name="numerics",
                status=HealthStatus.HEALTHY if ok else HealthStatus.UNHEALTHY,
                message="Linear algebra consistent" if ok else "Woodbury results disagree with dense",
                latency_ms=(time.time() - start) * 1000,
                details={
                    "numpy": np.__version__,
                    "scipy": scipy.__version__,
                    "solve_err": solve_err,
                    "logdet_err": logdet_err,
                },
            )
        except Exception as e:
            return CheckResult(name="numerics", status=HealthStatus.UNHEALTHY, message=str(e))

    async def check_output_dir(self) -> CheckResult:
        """Check the results directory is writable and has free space."""
        start = time.time()
        try:
            out = Path(get_settings().output_dir)
            out.mkdir(parents=True, exist_ok=True)
            probe = out / ".health_probe"
            probe.write_text("ok")
            probe.unlink()
            disk = psutil.disk_usage(str(out))
            free_gb = disk.free / (1024**3)
            status = HealthStatus.HEALTHY if free_gb > 1.0 else HealthStatus.DEGRADED
            return CheckResult(
                name="output_dir",
                status=status,
                message=f"Writable ({free_gb:.1f} GB free)",
                latency_ms=(time.time() - start) * 1000,
                details={"path": str(out.resolve()), "free_gb": round(free_gb, 2)},
            )
        except Exception as e:
            return CheckResult(
                name="output_dir",
                status=HealthStatus.UNHEALTHY,
                message=f"Output directory error: {str(e)}",
                latency_ms=(time.time() - start) * 1000,
            )

    async def check_memory(self) -> CheckResult:
        """Moment tables hold 10^5 draws per chunked pass; warn when memory is tight."""
        memory = psutil.virtual_memory()
        status = HealthStatus.HEALTHY if memory.percent < 90 else HealthStatus.DEGRADED
        return CheckResult(
            name="memory",
            status=status,
            message=f"{memory.percent:.0f}% used",
            details={"available_gb": round(memory.available / (1024**3), 2)},
        )

    async def check_derivatives(self) -> CheckResult:
        """A few instances of the cheapest registered derivative checks."""
        from app.services.verification import run_all_checks

        start = time.time()
        try:
            report = await asyncio.to_thread(run_all_checks, 3, 0, QUICK_CHECKS)
            return CheckResult(
                name="derivatives",
                status=HealthStatus.HEALTHY if report.passed else HealthStatus.UNHEALTHY,
                message="Derivative checks pass" if report.passed else f"Failed: {report.failed}",
                latency_ms=(time.time() - start) * 1000,
                details={c.name: c.max_rel_err for c in report.checks},
            )
        except Exception as e:
            return CheckResult(name="derivatives", status=HealthStatus.UNHEALTHY, message=str(e))


# Singleton
_health_checker: Optional[HealthChecker] = None


def get_health_checker() -> HealthChecker:
    """Get health checker singleton."""
    global _health_checker
    if _health_checker is None:
        _health_checker = HealthChecker()
    return _health_checker
