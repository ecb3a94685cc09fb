"""
Stochastic gradient ascent on the ELBO with ADADELTA step sizes.

Every step draws S standard-normal vectors eps_s, maps them through the
family to theta_s = h(eps_s, lambda) and uses the same draws for the ELBO
estimate and the gradient.  The reparameterization estimator averages

    (d theta / d lambda)^T w_s,    w_s = grad log g(theta_s) - grad log q(theta_s)

and the score estimator averages (log g - log q - b) grad_lambda log q with a
running-mean baseline b.  Steps whose estimate is non-finite are skipped and
counted; the ADADELTA accumulators are left untouched for them.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from app.models.experiments import EntropyGradient, Estimator, OptimizerConfig
from app.services.errors import (
    CopulaVIError,
    FlaggedStepError,
    NumericalError,
    ParameterError,
    SpecError,
)
from app.services.targets import TargetModel

logger = logging.getLogger(__name__)


@dataclass
class OptState:
    """lambda plus the two ADADELTA running averages."""
    lam: np.ndarray
    eg2: np.ndarray
    edx2: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, lam: np.ndarray) -> OptState:
        lam = np.asarray(lam, dtype=float).copy()
        return cls(lam=lam, eg2=np.zeros_like(lam), edx2=np.zeros_like(lam))


def adadelta_step(state: OptState, grad: np.ndarray, rho: float = 0.95, eps: float = 1e-6) -> OptState:
    """One ADADELTA ascent update; returns a new state."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.lam.shape:
        raise ParameterError(f"gradient shape {grad.shape} != lambda shape {state.lam.shape}")
    eg2 = rho * state.eg2 + (1.0 - rho) * grad * grad
    delta = np.sqrt(state.edx2 + eps) / np.sqrt(eg2 + eps) * grad
    edx2 = rho * state.edx2 + (1.0 - rho) * delta * delta
    return OptState(lam=state.lam + delta, eg2=eg2, edx2=edx2, step=state.step + 1)


@dataclass
class RunTrace:
    """Per-step record of one optimization run."""
    elbo: np.ndarray  # NaN on flagged steps
    step_seconds: np.ndarray
    flagged: np.ndarray
    final_lambda: np.ndarray
    window: int
    flagged_threshold: float
    checkpoints: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.elbo.size

    @property
    def wallclock(self) -> np.ndarray:
        """Cumulative seconds at the end of each step."""
        return np.cumsum(self.step_seconds)

    @property
    def flagged_steps(self) -> int:
        return int(self.flagged.sum())

    @property
    def unhealthy(self) -> bool:
        return self.flagged_steps > self.flagged_threshold * self.n_steps

    @property
    def window_average_elbo(self) -> float:
        tail = self.elbo[-self.window:]
        tail = tail[np.isfinite(tail)]
        return float(tail.mean()) if tail.size else float("nan")

    @property
    def minutes_per_1000_steps(self) -> float:
        return float(self.step_seconds.sum()) / self.n_steps * 1000.0 / 60.0


@dataclass
class StepEstimate:
    elbo: float
    grad: np.ndarray
    values: np.ndarray  # log g - log q per sample


def _check_estimator(family, estimator: Estimator, entropy: EntropyGradient):
    needs_score = estimator is Estimator.SCORE or entropy is EntropyGradient.TOTAL
    if needs_score and not getattr(family, "supports_score", False):
        raise SpecError(f"{type(family).__name__} has no analytic score gradient")


def _evaluate_sample(family, target: TargetModel, params, eps_row, estimator, entropy, baseline):
    draw = family.sample(eps_row, params)
    log_g, grad_g = target.log_g_and_grad(draw.theta)
    value = float(log_g - family.log_density_draw(draw, params))
    if estimator is Estimator.SCORE:
        grad = (value - baseline) * family.score_draw(draw, params)
    else:
        w = grad_g - family.grad_theta_draw(draw, params)
        grad = family.vjp_draw(draw, params, w)
        if entropy is EntropyGradient.TOTAL:
            grad = grad - family.score_draw(draw, params)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise FlaggedStepError("non-finite ELBO or gradient sample")
    return value, grad


def evaluate_step(
    family,
    target: TargetModel,
    lam: np.ndarray,
    eps_draws: np.ndarray,
    estimator: Estimator = Estimator.REPARAM,
    entropy: EntropyGradient = EntropyGradient.PATHWISE,
    baseline: float = 0.0,
    pool: Optional[ThreadPoolExecutor] = None,
) -> StepEstimate:
    """ELBO and gradient estimates from one shared set of draws.

    Samples may be evaluated on ``pool``; results are reduced in sample order so
    the outcome does not depend on the number of workers.
    """
    eps_draws = np.atleast_2d(np.asarray(eps_draws, dtype=float))
    if eps_draws.shape[1] != family.eps_dim:
        raise ParameterError(f"eps rows must have length {family.eps_dim}, got {eps_draws.shape[1]}")
    _check_estimator(family, estimator, entropy)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        params = family.params(lam)

        def one(row):
            return _evaluate_sample(family, target, params, row, estimator, entropy, baseline)

        if pool is not None and eps_draws.shape[0] > 1:
            results = list(pool.map(one, eps_draws))
        else:
            results = [one(row) for row in eps_draws]

    values = np.array([v for v, _ in results])
    grad = np.zeros_like(np.asarray(lam, dtype=float))
    for _, g in results:
        grad += g
    grad /= len(results)
    return StepEstimate(elbo=float(values.mean()), grad=grad, values=values)


def estimate_elbo(family, target: TargetModel, lam: np.ndarray, eps_draws: np.ndarray) -> float:
    """(1/S) sum_s [log g(theta_s) - log q(theta_s)], theta_s = h(eps_s, lambda)."""
    eps_draws = np.atleast_2d(np.asarray(eps_draws, dtype=float))
    params = family.params(lam)
    total = 0.0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for row in eps_draws:
            draw = family.sample(row, params)
            value = target.log_g(draw.theta) - family.log_density_draw(draw, params)
            if not np.isfinite(value):
                raise FlaggedStepError("non-finite ELBO sample")
            total += float(value)
    return total / eps_draws.shape[0]


def estimate_grad(
    family,
    target: TargetModel,
    lam: np.ndarray,
    eps_draws: np.ndarray,
    estimator: Estimator = Estimator.REPARAM,
    baseline: float = 0.0,
    entropy: EntropyGradient = EntropyGradient.PATHWISE,
) -> np.ndarray:
    """Unbiased estimate of grad_lambda L from S draws."""
    return evaluate_step(family, target, lam, eps_draws, Estimator(estimator),
                         EntropyGradient(entropy), baseline).grad


def map_estimate(target: TargetModel, x0: Optional[np.ndarray] = None, maxiter: int = 500) -> np.ndarray:
    """Posterior mode by L-BFGS-B on -log g; used as a starting mu."""
    x0 = np.zeros(target.dim) if x0 is None else np.asarray(x0, dtype=float)

    def objective(theta):
        value, grad = target.log_g_and_grad(theta)
        return -value, -grad

    result = optimize.minimize(objective, x0, jac=True, method="L-BFGS-B",
                               options={"maxiter": maxiter})
    if not np.all(np.isfinite(result.x)):
        raise NumericalError("MAP search diverged")
    if not result.success:
        logger.warning(f"MAP search stopped early: {result.message}")
    logger.info(f"MAP estimate for {target.name}: log g = {-result.fun:.4f} after {result.nit} iterations")
    return result.x


class SGAOptimizer:
    """Runs the SGA recursion for one (family, target, config) triple."""

    def __init__(self, config: OptimizerConfig):
        self.config = config

    def run(
        self,
        family,
        target: TargetModel,
        initial_mu: Optional[np.ndarray] = None,
    ) -> RunTrace:
        cfg = self.config
        if family.dim != target.dim:
            raise SpecError(f"family dimension {family.dim} != target dimension {target.dim}")
        estimator = Estimator(cfg.estimator)
        entropy = EntropyGradient(cfg.entropy_gradient)
        _check_estimator(family, estimator, entropy)

        rng = np.random.default_rng(cfg.seed)
        state = OptState.fresh(family.initial_lambda(rng, initial_mu))
        n, S = cfg.n_steps, cfg.samples_per_step

        elbo = np.full(n, np.nan)
        step_seconds = np.zeros(n)
        flagged = np.zeros(n, dtype=bool)
        checkpoints: list[tuple[int, np.ndarray]] = []
        baseline_sum, baseline_count = 0.0, 0

        logger.info(
            f"SGA start: target={target.name}, |lambda|={state.lam.size}, steps={n}, "
            f"S={S}, estimator={estimator.value}, seed={cfg.seed}"
        )
        pool = ThreadPoolExecutor(max_workers=cfg.sample_workers) if cfg.sample_workers > 1 else None
        try:
            for i in range(n):
                t0 = time.perf_counter()
                eps = rng.standard_normal((S, family.eps_dim))
                baseline = baseline_sum / baseline_count if baseline_count else 0.0
                try:
                    est = evaluate_step(family, target, state.lam, eps, estimator, entropy,
                                        baseline, pool)
                except CopulaVIError as e:
                    # non-finite sample, singular scale or degenerate skew
                    flagged[i] = True
                    logger.debug(f"step {i + 1} flagged: {e}")
                else:
                    elbo[i] = est.elbo
                    baseline_sum += float(est.values.sum())
                    baseline_count += est.values.size
                    state = adadelta_step(state, est.grad, cfg.adadelta_rho, cfg.adadelta_eps)
                step_seconds[i] = time.perf_counter() - t0

                if cfg.checkpoint_every and (i + 1) % cfg.checkpoint_every == 0:
                    snapshot = state.lam.copy()
                    checkpoints.append((i + 1, snapshot))
                    recent = elbo[max(0, i + 1 - cfg.elbo_window): i + 1]
                    logger.debug(f"step {i + 1}: window ELBO {np.nanmean(recent):.4f}")
        finally:
            if pool is not None:
                pool.shutdown(wait=True)

        trace = RunTrace(
            elbo=elbo,
            step_seconds=step_seconds,
            flagged=flagged,
            final_lambda=state.lam,
            window=cfg.elbo_window,
            flagged_threshold=cfg.flagged_step_threshold,
            checkpoints=checkpoints,
        )
        if trace.flagged_steps:
            logger.warning(f"{trace.flagged_steps} of {n} steps flagged as non-finite")
        if trace.unhealthy:
            logger.warning(
                f"Run unhealthy: flagged fraction {trace.flagged_steps / n:.3%} "
                f"exceeds {cfg.flagged_step_threshold:.1%}"
            )
        logger.info(f"SGA done: window-average ELBO {trace.window_average_elbo:.4f}")
        return trace


def run(family, target: TargetModel, config: OptimizerConfig, initial_mu=None) -> RunTrace:
    """Functional entry point around SGAOptimizer."""
    return SGAOptimizer(config).run(family, target, initial_mu=initial_mu)

