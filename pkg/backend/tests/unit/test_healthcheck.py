"""
Unit tests for health check service.
"""

from datetime import datetime, timedelta
from unittest.mock import AsyncMock, patch

import pytest

from app.models import VerificationReport
from app.models.results import CheckResult as DerivativeCheck
from app.services.healthcheck import (
    CheckResult,
    HealthChecker,
    HealthReport,
    HealthStatus,
    get_health_checker,
)


class TestCheckResult:
    """Tests for CheckResult dataclass."""

    @pytest.mark.unit
    def test_check_result_defaults(self):
        """Should have sensible defaults."""
        result = CheckResult(name="test", status=HealthStatus.HEALTHY)
        assert result.message == ""
        assert result.latency_ms == 0
        assert result.details == {}
        assert isinstance(result.timestamp, datetime)

    @pytest.mark.unit
    def test_timestamps_are_utc_aware(self):
        """Check and report timestamps carry the UTC offset."""
        result = CheckResult(name="test", status=HealthStatus.HEALTHY)
        report = HealthReport(status=HealthStatus.HEALTHY, checks=[result])
        assert result.timestamp.utcoffset() == timedelta(0)
        assert report.timestamp.utcoffset() == timedelta(0)
        assert report.to_dict()["timestamp"].endswith("+00:00")


class TestHealthReport:
    """Tests for HealthReport dataclass."""

    @pytest.mark.unit
    def test_healthy_count(self):
        """Should count healthy checks."""
        report = HealthReport(
            status=HealthStatus.DEGRADED,
            checks=[
                CheckResult(name="a", status=HealthStatus.HEALTHY),
                CheckResult(name="b", status=HealthStatus.HEALTHY),
                CheckResult(name="c", status=HealthStatus.DEGRADED),
            ]
        )
        assert report.healthy_count == 2
        assert report.total_count == 3

    @pytest.mark.unit
    def test_to_dict(self):
        """Should convert to dictionary with a summary line."""
        report = HealthReport(
            status=HealthStatus.HEALTHY,
            checks=[CheckResult(name="numerics", status=HealthStatus.HEALTHY, message="OK")],
        )
        data = report.to_dict()

        assert data["status"] == "healthy"
        assert data["summary"] == "1/1 checks passing"
        assert data["checks"][0]["name"] == "numerics"


class TestHealthChecker:
    """Tests for HealthChecker service."""

    @pytest.fixture
    def checker(self):
        return HealthChecker()

    @pytest.mark.unit
    async def test_check_api(self, checker):
        """API check should always pass (we're running)."""
        result = await checker.check_api()
        assert result.status == HealthStatus.HEALTHY
        assert result.name == "api"

    @pytest.mark.unit
    async def test_check_numerics(self, checker):
        """Woodbury and dense linear algebra should agree."""
        result = await checker.check_numerics()
        assert result.status == HealthStatus.HEALTHY
        assert result.details["solve_err"] < 1e-9
        assert "numpy" in result.details

    @pytest.mark.unit
    async def test_check_numerics_failure(self, checker):
        """A broken solve should report unhealthy."""
        with patch("app.services.factor_scale.fs_solve", side_effect=RuntimeError("LAPACK missing")):
            result = await checker.check_numerics()

        assert result.status == HealthStatus.UNHEALTHY
        assert "LAPACK missing" in result.message

    @pytest.mark.unit
    async def test_check_output_dir(self, checker, tmp_path):
        """Should report a writable output directory."""
        with patch("app.services.healthcheck.get_settings") as mock:
            mock.return_value.output_dir = str(tmp_path / "runs")

            result = await checker.check_output_dir()

        assert result.status in (HealthStatus.HEALTHY, HealthStatus.DEGRADED)
        assert (tmp_path / "runs").is_dir()
        assert not (tmp_path / "runs" / ".health_probe").exists()
        assert "free_gb" in result.details

    @pytest.mark.unit
    async def test_check_output_dir_not_writable(self, checker, tmp_path):
        """A file where the directory should be is unhealthy."""
        blocker = tmp_path / "runs"
        blocker.write_text("not a directory")
        with patch("app.services.healthcheck.get_settings") as mock:
            mock.return_value.output_dir = str(blocker)

            result = await checker.check_output_dir()

        assert result.status == HealthStatus.UNHEALTHY

    @pytest.mark.unit
    async def test_check_derivatives_pass(self, checker):
        """Passing quick checks report healthy with per-check errors."""
        report = VerificationReport(checks=[
            DerivativeCheck(name="transforms.yeo_johnson", max_rel_err=1e-8, tolerance=1e-5, passed=True),
        ])
        with patch("app.services.verification.run_all_checks", return_value=report):
            result = await checker.check_derivatives()

        assert result.status == HealthStatus.HEALTHY
        assert result.details == {"transforms.yeo_johnson": 1e-8}

    @pytest.mark.unit
    async def test_check_derivatives_fail(self, checker):
        """A failing quick check reports unhealthy and names it."""
        report = VerificationReport(checks=[
            DerivativeCheck(name="gaussian.grad_theta", max_rel_err=0.3, tolerance=1e-5, passed=False),
        ])
        with patch("app.services.verification.run_all_checks", return_value=report):
            result = await checker.check_derivatives()

        assert result.status == HealthStatus.UNHEALTHY
        assert "gaussian.grad_theta" in result.message

    @pytest.mark.unit
    async def test_run_all_checks(self, checker):
        """Should run all checks and return report."""
        with patch.object(checker, 'check_api', new_callable=AsyncMock) as mock_api, \
             patch.object(checker, 'check_numerics', new_callable=AsyncMock) as mock_num, \
             patch.object(checker, 'check_output_dir', new_callable=AsyncMock) as mock_out, \
             patch.object(checker, 'check_memory', new_callable=AsyncMock) as mock_mem, \
             patch.object(checker, 'check_derivatives', new_callable=AsyncMock) as mock_fd:

            mock_api.return_value = CheckResult(name="api", status=HealthStatus.HEALTHY)
            mock_num.return_value = CheckResult(name="numerics", status=HealthStatus.HEALTHY)
            mock_out.return_value = CheckResult(name="output_dir", status=HealthStatus.DEGRADED)
            mock_mem.return_value = CheckResult(name="memory", status=HealthStatus.HEALTHY)
            mock_fd.return_value = CheckResult(name="derivatives", status=HealthStatus.HEALTHY)

            report = await checker.run_all_checks()

            assert report.total_count == 5
            assert report.healthy_count == 4
            # Low disk only degrades
            assert report.status == HealthStatus.DEGRADED

    @pytest.mark.unit
    async def test_run_all_checks_derivatives_unhealthy(self, checker):
        """A failing derivative check makes the whole report unhealthy."""
        with patch.object(checker, 'check_api', new_callable=AsyncMock) as mock_api, \
             patch.object(checker, 'check_numerics', new_callable=AsyncMock) as mock_num, \
             patch.object(checker, 'check_output_dir', new_callable=AsyncMock) as mock_out, \
             patch.object(checker, 'check_memory', new_callable=AsyncMock) as mock_mem, \
             patch.object(checker, 'check_derivatives', new_callable=AsyncMock) as mock_fd:

            for mock, name in [(mock_api, "api"), (mock_num, "numerics"), (mock_out, "output_dir"),
                               (mock_mem, "memory")]:
                mock.return_value = CheckResult(name=name, status=HealthStatus.HEALTHY)
            mock_fd.return_value = CheckResult(name="derivatives", status=HealthStatus.UNHEALTHY)

            report = await checker.run_all_checks()

            assert report.status == HealthStatus.UNHEALTHY

    @pytest.mark.unit
    async def test_run_all_checks_all_healthy(self, checker):
        """Should report healthy when all checks pass."""
        with patch.object(checker, 'check_api', new_callable=AsyncMock) as mock_api, \
             patch.object(checker, 'check_numerics', new_callable=AsyncMock) as mock_num, \
             patch.object(checker, 'check_output_dir', new_callable=AsyncMock) as mock_out, \
             patch.object(checker, 'check_memory', new_callable=AsyncMock) as mock_mem, \
             patch.object(checker, 'check_derivatives', new_callable=AsyncMock) as mock_fd:

            for mock in [mock_api, mock_num, mock_out, mock_mem, mock_fd]:
                mock.return_value = CheckResult(name="test", status=HealthStatus.HEALTHY)

            report = await checker.run_all_checks()

            assert report.status == HealthStatus.HEALTHY

    @pytest.mark.unit
    async def test_raising_check_counts_unhealthy(self, checker):
        """An exception inside a check becomes an unhealthy result."""
        with patch.object(checker, 'check_memory', new_callable=AsyncMock) as mock_mem, \
             patch.object(checker, 'check_derivatives', new_callable=AsyncMock) as mock_fd:
            mock_mem.side_effect = RuntimeError("psutil unavailable")
            mock_fd.return_value = CheckResult(name="derivatives", status=HealthStatus.HEALTHY)

            report = await checker.run_all_checks()

            failed = [c for c in report.checks if c.status == HealthStatus.UNHEALTHY]
            assert any("psutil unavailable" in c.message for c in failed)
            assert report.status != HealthStatus.HEALTHY

    @pytest.mark.unit
    def test_singleton(self):
        """get_health_checker returns one instance."""
        assert get_health_checker() is get_health_checker()
