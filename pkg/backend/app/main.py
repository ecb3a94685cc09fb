"""
copula-vi: variational inference with factor copula families.

Run with: uvicorn app.main:app --reload

Architecture:
- Fits run in worker threads so the event loop stays responsive
- Grid entries share a target and run concurrently, bounded by a semaphore
- Results are written under CVI_OUTPUT_DIR only when a spec names an output_dir
"""

import logging
from contextlib import asynccontextmanager
from pathlib import Path

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.config import get_settings
from app.api import health
from app.api import experiments as experiments_api
from app.api import verify as verify_api
from app.services.verification import CHECKS

settings = get_settings()

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper()),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

VERSION = "0.3.0"


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Application lifespan - startup and shutdown."""
    logger.info("Starting copula-vi API...")
    Path(settings.output_dir).mkdir(parents=True, exist_ok=True)
    logger.info(f"Results directory: {settings.output_dir}")
    logger.info(f"{len(CHECKS)} derivative checks registered")

    yield

    logger.info("Shutting down copula-vi API...")


app = FastAPI(
    title="copula-vi",
    description="Variational inference with Gaussian and skew-normal factor copula families",
    version=VERSION,
    lifespan=lifespan,
)

# CORS - allow notebook / dashboard access
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# Include routers
app.include_router(health.router, tags=["health"])
app.include_router(experiments_api.router)  # /api/families, /api/fit, /api/grid
app.include_router(verify_api.router)  # /api/verify


@app.get("/")
async def root():
    """Root endpoint."""
    return {
        "name": "copula-vi",
        "version": VERSION,
        "description": "Copula variational inference engine",
        "docs": "/docs",
        "endpoints": {
            "health": "/health",
            "families": "/api/families",
            "fit": "/api/fit",
            "grid": "/api/grid",
            "verify": "/api/verify",
        },
    }


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(
        "app.main:app",
        host=settings.api_host,
        port=settings.api_port,
        reload=not settings.is_production,
    )
