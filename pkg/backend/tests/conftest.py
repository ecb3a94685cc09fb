"""
Pytest configuration and shared fixtures.

Fixtures defined here are available to all tests.
"""

import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Add backend to path
backend_dir = Path(__file__).parent.parent
sys.path.insert(0, str(backend_dir))

# Set test environment
os.environ["TESTING"] = "true"
os.environ.setdefault("CVI_OUTPUT_DIR", tempfile.mkdtemp(prefix="cvi-test-runs-"))


# =============================================================================
# App Fixtures
# =============================================================================


@pytest.fixture
def app():
    """FastAPI test application."""
    from app.main import app
    return app


@pytest.fixture
def client(app):
    """Sync test client for API tests."""
    from fastapi.testclient import TestClient
    return TestClient(app)


@pytest.fixture
async def async_client(app):
    """Async test client for API tests."""
    from httpx import AsyncClient, ASGITransport
    async with AsyncClient(
        transport=ASGITransport(app=app),
        base_url="http://test"
    ) as client:
        yield client


# =============================================================================
# Numerical Fixtures
# =============================================================================


@pytest.fixture
def rng():
    """Seeded generator; every test gets the same stream."""
    return np.random.default_rng(12345)


@pytest.fixture
def toy_target():
    """Bivariate Gaussian target with correlation 0.8 and known evidence."""
    from app.services.targets import gaussian_toy_target
    return gaussian_toy_target([1.0, -0.5], [[1.0, 0.8], [0.8, 1.0]], log_evidence=-3.0)


@pytest.fixture
def logistic_data():
    """Small simulated logistic-regression design with an intercept."""
    from app.services.targets import synthetic_logistic
    return synthetic_logistic(60, 3, seed=7)


@pytest.fixture
def mixed_data():
    """Small grouped design: 4 subjects, 6 observations each."""
    from app.services.targets import synthetic_mixed_logistic
    return synthetic_mixed_logistic(4, 6, 2, seed=11)


# =============================================================================
# Dataset Fixtures
# =============================================================================


@pytest.fixture
def logistic_csv(tmp_path):
    """Design-matrix CSV: two features and a 0/1 response in the last column."""
    path = tmp_path / "design.csv"
    path.write_text(
        "age,dose,y\n"
        "30,1.5,0\n"
        "45,2.0,1\n"
        "52,0.5,0\n"
        "61,3.0,1\n"
        "38,2.5,1\n"
        "47,1.0,0\n"
    )
    return path


@pytest.fixture
def mixed_csv(tmp_path):
    """Design-matrix CSV with a subject column for the random-intercept model."""
    path = tmp_path / "grouped.csv"
    rows = ["subject,x,y"]
    outcomes = [0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0]
    for i, y in enumerate(outcomes):
        rows.append(f"{10 + i % 3},{(i % 4) * 0.5 - 0.75},{y}")
    path.write_text("\n".join(rows) + "\n")
    return path


@pytest.fixture
def quick_spec():
    """A fast toy fit: identity Gaussian copula, a few hundred steps."""
    from app.models import ExperimentSpec
    return ExperimentSpec.model_validate({
        "name": "quick",
        "target": {"kind": "gaussian_toy", "toy_mean": [1.0, -0.5],
                   "toy_cov": [[1.0, 0.8], [0.8, 1.0]], "toy_log_evidence": -3.0},
        "family": {"base": "gaussian", "transform": "identity", "k": 1},
        "optimizer": {"n_steps": 300, "samples_per_step": 2, "seed": 5,
                      "elbo_window": 100, "checkpoint_every": 100},
        "marginal_coords": [0, 1],
        "moment_draws": 2000,
        "marginal_grid_points": 64,
    })
