"""
Posterior targets: log g(theta) = log p(theta) + log p(y | theta) and its gradient.

These are the only model-specific inputs the optimizer needs.  Every
likelihood is written with logaddexp / expit so linear predictors in
[-700, 700] neither overflow nor lose the gradient.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sc_linalg
from scipy.special import expit

from app.services.errors import DatasetError, ParameterError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class DesignMatrix:
    """Binary-response design: X (n x p, intercept included if requested) and y."""
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    groups: np.ndarray | None = None
    standardization: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise DatasetError(f"X {self.X.shape} and y {self.y.shape} disagree")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise DatasetError("design matrix contains non-finite entries")
        if not np.all((self.y == 0.0) | (self.y == 1.0)):
            raise DatasetError("response must be binary (0/1)")
        if len(self.feature_names) != self.X.shape[1]:
            raise DatasetError("feature_names must name every column of X")
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=int)
            if self.groups.shape != self.y.shape:
                raise DatasetError("groups must have one entry per observation")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


class TargetModel(ABC):
    """Unnormalised log posterior log g(theta)."""

    name: str = "target"
    log_evidence: float | None = None

    @property
    @abstractmethod
    def dim(self) -> int:
        ...

    @abstractmethod
    def log_g(self, theta: np.ndarray) -> float:
        ...

    @abstractmethod
    def grad_log_g(self, theta: np.ndarray) -> np.ndarray:
        ...

    def log_g_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        return self.log_g(theta), self.grad_log_g(theta)

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim, "log_evidence": self.log_evidence}

    def _check(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ParameterError(f"{self.name} expects theta of shape ({self.dim},), got {theta.shape}")
        return theta


def _bernoulli_loglik(eta: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


class LogisticTarget(TargetModel):
    """Logistic regression with an N(0, prior_var I) prior on beta."""

    def __init__(self, data: DesignMatrix, prior_var: float = 10.0, name: str = "logistic"):
        if prior_var <= 0:
            raise ParameterError("prior_var must be positive")
        self.data = data
        self.prior_var = float(prior_var)
        self.name = name

    @property
    def dim(self) -> int:
        return self.data.p

    def log_g(self, theta: np.ndarray) -> float:
        beta = self._check(theta)
        eta = self.data.X @ beta
        log_prior = -0.5 * beta @ beta / self.prior_var - 0.5 * self.dim * (
            LOG_2PI + np.log(self.prior_var)
        )
        return _bernoulli_loglik(eta, self.data.y) + float(log_prior)

    def grad_log_g(self, theta: np.ndarray) -> np.ndarray:
        beta = self._check(theta)
        resid = self.data.y - expit(self.data.X @ beta)
        return self.data.X.T @ resid - beta / self.prior_var

    def describe(self) -> dict:
        return {**super().describe(), "n": self.data.n, "prior_var": self.prior_var}


def logistic_target(data: DesignMatrix, prior_var: float = 10.0) -> LogisticTarget:
    if data.X.shape[0] != data.y.shape[0]:
        raise DatasetError("dimension mismatch between X and y")
    return LogisticTarget(data, prior_var)


class MixedLogisticTarget(TargetModel):
    """Logistic regression with subject random intercepts b_j ~ N(0, exp(2 zeta)).

    theta = (beta [p], zeta, b_1 ... b_J).
    """

    def __init__(
        self,
        data: DesignMatrix,
        n_subjects: int,
        beta_prior_var: float = 10.0,
        zeta_prior_var: float = 10.0,
    ):
        if data.groups is None:
            raise DatasetError("mixed model needs a subject index per observation")
        if np.any(data.groups < 0) or np.any(data.groups >= n_subjects):
            raise DatasetError(f"subject index outside [0, {n_subjects})")
        if beta_prior_var <= 0 or zeta_prior_var <= 0:
            raise ParameterError("prior variances must be positive")
        self.data = data
        self.n_subjects = int(n_subjects)
        self.beta_prior_var = float(beta_prior_var)
        self.zeta_prior_var = float(zeta_prior_var)
        self.name = "mixed_logistic"

    @property
    def dim(self) -> int:
        return self.data.p + 1 + self.n_subjects

    def _split(self, theta):
        theta = self._check(theta)
        p = self.data.p
        return theta[:p], float(theta[p]), theta[p + 1:]

    def random_effects_log_density(self, zeta: float, b: np.ndarray) -> float:
        """sum_j log N(b_j; 0, exp(2 zeta))."""
        J = b.size
        return float(-J * zeta - 0.5 * J * LOG_2PI - 0.5 * np.exp(-2.0 * zeta) * (b @ b))

    def log_g(self, theta: np.ndarray) -> float:
        beta, zeta, b = self._split(theta)
        eta = self.data.X @ beta + b[self.data.groups]
        log_prior = (
            -0.5 * beta @ beta / self.beta_prior_var
            - 0.5 * beta.size * (LOG_2PI + np.log(self.beta_prior_var))
            - 0.5 * zeta * zeta / self.zeta_prior_var
            - 0.5 * (LOG_2PI + np.log(self.zeta_prior_var))
        )
        return (
            _bernoulli_loglik(eta, self.data.y)
            + self.random_effects_log_density(zeta, b)
            + float(log_prior)
        )

    def grad_log_g(self, theta: np.ndarray) -> np.ndarray:
        beta, zeta, b = self._split(theta)
        groups = self.data.groups
        resid = self.data.y - expit(self.data.X @ beta + b[groups])
        inv_var = np.exp(-2.0 * zeta)
        grad_beta = self.data.X.T @ resid - beta / self.beta_prior_var
        grad_zeta = float(np.sum(b * b * inv_var - 1.0)) - zeta / self.zeta_prior_var
        grad_b = np.bincount(groups, weights=resid, minlength=self.n_subjects) - b * inv_var
        return np.concatenate([grad_beta, [grad_zeta], grad_b])

    def describe(self) -> dict:
        return {
            **super().describe(),
            "n": self.data.n,
            "n_subjects": self.n_subjects,
            "beta_prior_var": self.beta_prior_var,
            "zeta_prior_var": self.zeta_prior_var,
        }


def mixed_logistic_target(
    data: DesignMatrix,
    n_subjects: int,
    beta_prior_var: float = 10.0,
    zeta_prior_var: float = 10.0,
) -> MixedLogisticTarget:
    return MixedLogisticTarget(data, n_subjects, beta_prior_var, zeta_prior_var)


class GaussianToyTarget(TargetModel):
    """log g = log N(theta; mu0, Sigma0) + C, so the evidence is exactly C."""

    def __init__(self, mu0, Sigma0, log_evidence: float = 0.0):
        self.mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
        self.Sigma0 = np.atleast_2d(np.asarray(Sigma0, dtype=float))
        if self.Sigma0.shape != (self.mu0.size, self.mu0.size):
            raise ParameterError("Sigma0 must be m x m")
        if not np.allclose(self.Sigma0, self.Sigma0.T):
            raise ParameterError("Sigma0 must be symmetric")
        try:
            self._chol = sc_linalg.cho_factor(self.Sigma0, lower=True)
        except sc_linalg.LinAlgError as e:
            raise ParameterError(f"Sigma0 is not positive definite: {e}") from e
        self._logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol[0]))))
        self.log_evidence = float(log_evidence)
        self.name = "gaussian_toy"

    @property
    def dim(self) -> int:
        return self.mu0.size

    def log_g(self, theta: np.ndarray) -> float:
        r = self._check(theta) - self.mu0
        quad = float(r @ sc_linalg.cho_solve(self._chol, r))
        return -0.5 * (self.dim * LOG_2PI + self._logdet + quad) + self.log_evidence

    def grad_log_g(self, theta: np.ndarray) -> np.ndarray:
        r = self._check(theta) - self.mu0
        return -sc_linalg.cho_solve(self._chol, r)

    def kl_best_diagonal(self) -> float:
        """KL(q* || p) for the best mean-field Gaussian q*: 0.5 (sum log Lambda_ii + log|Sigma0|)."""
        precision_diag = np.diag(sc_linalg.cho_solve(self._chol, np.eye(self.dim)))
        return 0.5 * float(np.sum(np.log(precision_diag)) + self._logdet)


def gaussian_toy_target(mu0, Sigma0, log_evidence: float = 0.0) -> GaussianToyTarget:
    return GaussianToyTarget(mu0, Sigma0, log_evidence)


# Synthetic designs -------------------------------------------------------------


def synthetic_logistic(n: int, p: int, seed: int, intercept: bool = True) -> DesignMatrix:
    """Simulated logistic-regression design with standard-normal covariates."""
    rng = np.random.default_rng(seed)
    cols = p - 1 if intercept else p
    X = rng.normal(size=(n, cols))
    if intercept:
        X = np.column_stack([np.ones(n), X])
    beta = rng.normal(0.0, 1.0, size=p)
    y = (rng.uniform(size=n) < expit(X @ beta)).astype(float)
    names = (["intercept"] if intercept else []) + [f"x{j + 1}" for j in range(cols)]
    return DesignMatrix(X, y, names)


def synthetic_mixed_logistic(
    n_subjects: int, obs_per_subject: int, p: int, seed: int, re_sd: float = 1.0
) -> DesignMatrix:
    """Simulated grouped design; groups index the subject of each row."""
    rng = np.random.default_rng(seed)
    n = n_subjects * obs_per_subject
    groups = np.repeat(np.arange(n_subjects), obs_per_subject)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    beta = rng.normal(0.0, 0.5, size=p)
    b = rng.normal(0.0, re_sd, size=n_subjects)
    y = (rng.uniform(size=n) < expit(X @ beta + b[groups])).astype(float)
    names = ["intercept"] + [f"x{j + 1}" for j in range(p - 1)]
    return DesignMatrix(X, y, names, groups=groups)
