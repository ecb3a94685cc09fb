"""Configuration management for copula-vi."""

from functools import lru_cache

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=("../.env", ".env"),
        env_file_encoding="utf-8",
        env_prefix="CVI_",
        extra="ignore",
    )

    # API
    api_host: str = "127.0.0.1"
    api_port: int = 8000
    environment: str = "development"
    log_level: str = "info"

    # Paths
    output_dir: str = "./runs"

    # Optimizer defaults (ADADELTA, Zeiler's settings)
    default_seed: int = 20190501
    n_steps: int = 5000
    samples_per_step: int = 1
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6
    elbo_window: int = 1000
    checkpoint_every: int = 1000
    flagged_step_threshold: float = 0.01

    # Concurrency
    sample_workers: int = 1
    grid_workers: int = 2

    # Result bundles
    moment_draws: int = 100_000
    marginal_grid_points: int = 512

    # Priors
    logistic_prior_var: float = 10.0
    mixed_prior_var: float = 10.0

    @property
    def is_production(self) -> bool:
        return self.environment == "production"

    def optimizer_defaults(self) -> dict:
        """Optimizer fields seeded from settings, ready for OptimizerConfig(**...)."""
        return {
            "n_steps": self.n_steps,
            "samples_per_step": self.samples_per_step,
            "seed": self.default_seed,
            "adadelta_rho": self.adadelta_rho,
            "adadelta_eps": self.adadelta_eps,
            "elbo_window": self.elbo_window,
            "checkpoint_every": self.checkpoint_every,
            "sample_workers": self.sample_workers,
            "flagged_step_threshold": self.flagged_step_threshold,
        }


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
