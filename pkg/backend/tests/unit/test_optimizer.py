"""
Unit tests for the SGA optimizer and gradient estimators.
"""

import numpy as np
import pytest

from app.models import EntropyGradient, Estimator, OptimizerConfig
from app.services.errors import ParameterError, SpecError
from app.services.factor_scale import FactorScale
from app.services.family_gaussian import GaussCopulaParams, GaussianCopulaFamily
from app.services.family_skewnormal import SkewNormalCopulaFamily
from app.services.optimizer import (
    OptState,
    RunTrace,
    SGAOptimizer,
    adadelta_step,
    estimate_elbo,
    estimate_grad,
    evaluate_step,
    map_estimate,
    run,
)
from app.services.targets import TargetModel
from app.services.transforms import TransformParams
from app.services.verification import random_lambda


class NaNTarget(TargetModel):
    """Returns NaN whenever theta[0] > threshold."""

    name = "nan_target"

    def __init__(self, dim=2, threshold=-np.inf):
        self._dim = dim
        self.threshold = threshold

    @property
    def dim(self):
        return self._dim

    def log_g(self, theta):
        return float("nan") if theta[0] > self.threshold else -0.5 * float(theta @ theta)

    def grad_log_g(self, theta):
        return -theta


def _exact_lambda(family):
    """Gaussian copula lambda equal to the toy posterior N((1, -0.5), [[1, .8], [.8, 1]])."""
    B = np.array([[np.sqrt(0.8)], [np.sqrt(0.8)]])
    scale = FactorScale(B, np.full(2, np.sqrt(0.2)))
    return GaussCopulaParams(np.array([1.0, -0.5]), scale, TransformParams.identity(2),
                             family.layout).pack()


class TestAdadelta:
    """Tests for the ADADELTA update."""

    @pytest.mark.unit
    def test_first_step(self):
        """From zero accumulators: delta = sqrt(eps / ((1 - rho) g^2 + eps)) g."""
        g = np.array([0.5, -2.0, 0.0, 1e-4])
        state = adadelta_step(OptState.fresh(np.zeros(4)), g, rho=0.95, eps=1e-6)
        expected = np.sqrt(1e-6 / (0.05 * g * g + 1e-6)) * g
        np.testing.assert_allclose(state.lam, expected, rtol=1e-12)
        assert state.step == 1

    @pytest.mark.unit
    def test_accumulators(self):
        """E[g^2] and E[dx^2] should follow their running averages."""
        g = np.array([1.0, -3.0])
        s1 = adadelta_step(OptState.fresh(np.zeros(2)), g)
        np.testing.assert_allclose(s1.eg2, 0.05 * g * g)
        np.testing.assert_allclose(s1.edx2, 0.05 * s1.lam**2)
        s2 = adadelta_step(s1, g)
        np.testing.assert_allclose(s2.eg2, 0.95 * s1.eg2 + 0.05 * g * g)

    @pytest.mark.unit
    def test_ascent_direction(self):
        """Each coordinate moves with the sign of its gradient."""
        g = np.array([3.0, -1.0])
        state = adadelta_step(OptState.fresh(np.ones(2)), g)
        assert state.lam[0] > 1.0
        assert state.lam[1] < 1.0

    @pytest.mark.unit
    def test_shape_mismatch(self):
        """A gradient of the wrong shape should be rejected."""
        with pytest.raises(ParameterError):
            adadelta_step(OptState.fresh(np.zeros(3)), np.zeros(2))


class TestRunTrace:
    """Tests for trace summaries."""

    @pytest.mark.unit
    def test_summaries(self):
        """Window average skips NaN; timings are per thousand steps."""
        trace = RunTrace(
            elbo=np.array([np.nan, 1.0, 2.0, 3.0]),
            step_seconds=np.full(4, 0.03),
            flagged=np.array([True, False, False, False]),
            final_lambda=np.zeros(3),
            window=3,
            flagged_threshold=0.1,
        )
        assert trace.n_steps == 4
        assert trace.window_average_elbo == pytest.approx(2.0)
        assert trace.flagged_steps == 1
        assert trace.unhealthy
        assert trace.minutes_per_1000_steps == pytest.approx(0.5)
        np.testing.assert_allclose(trace.wallclock, [0.03, 0.06, 0.09, 0.12])


class TestEstimators:
    """Tests for ELBO and gradient estimates."""

    @pytest.mark.unit
    def test_elbo_exact_at_posterior(self, toy_target, rng):
        """When q equals the posterior every draw gives log Z."""
        family = GaussianCopulaFamily(2, 1)
        lam = _exact_lambda(family)
        eps = rng.standard_normal((10, family.eps_dim))
        assert estimate_elbo(family, toy_target, lam, eps) == pytest.approx(-3.0, abs=1e-10)
        est = evaluate_step(family, toy_target, lam, eps)
        np.testing.assert_allclose(est.values, -3.0, atol=1e-10)

    @pytest.mark.unit
    @pytest.mark.parametrize("entropy", ["pathwise", "total"])
    def test_reparam_grad_vanishes_at_posterior(self, toy_target, rng, entropy):
        """w = grad log g - grad log q is zero when q is the posterior."""
        family = GaussianCopulaFamily(2, 1)
        lam = _exact_lambda(family)
        eps = rng.standard_normal((4, family.eps_dim))
        grad = estimate_grad(family, toy_target, lam, eps, entropy=entropy)
        if entropy == "pathwise":
            np.testing.assert_allclose(grad, 0.0, atol=1e-9)
        else:
            # the remaining term is -mean(score), zero only in expectation
            assert np.all(np.isfinite(grad))

    @pytest.mark.unit
    def test_score_grad_with_exact_baseline(self, toy_target, rng):
        """With baseline log Z the score estimator is zero at the posterior."""
        family = GaussianCopulaFamily(2, 1)
        lam = _exact_lambda(family)
        eps = rng.standard_normal((5, family.eps_dim))
        grad = estimate_grad(family, toy_target, lam, eps, estimator="score", baseline=-3.0)
        np.testing.assert_allclose(grad, 0.0, atol=1e-9)

    @pytest.mark.unit
    def test_score_needs_gaussian_family(self, toy_target, rng):
        """The skew-normal family has no analytic score gradient."""
        family = SkewNormalCopulaFamily(2, 1)
        lam = family.initial_lambda(rng)
        eps = rng.standard_normal((1, family.eps_dim))
        with pytest.raises(SpecError):
            evaluate_step(family, toy_target, lam, eps, Estimator.SCORE)
        with pytest.raises(SpecError):
            evaluate_step(family, toy_target, lam, eps, Estimator.REPARAM, EntropyGradient.TOTAL)

    @pytest.mark.unit
    def test_eps_width_checked(self, toy_target, rng):
        """eps rows must match the family's noise dimension."""
        family = GaussianCopulaFamily(2, 1)
        with pytest.raises(ParameterError):
            evaluate_step(family, toy_target, family.initial_lambda(rng), np.zeros((1, 5)))

    @pytest.mark.unit
    def test_map_estimate(self, toy_target):
        """L-BFGS-B should find the Gaussian mean."""
        np.testing.assert_allclose(map_estimate(toy_target), [1.0, -0.5], atol=1e-4)

    @pytest.mark.slow
    def test_estimators_agree_in_expectation(self, toy_target, rng):
        """Reparameterization and score estimators should have the same mean."""
        family = GaussianCopulaFamily(2, 1, "yj")
        lam = family.initial_lambda(rng, mu0=np.array([0.5, 0.0]))
        p = family.params(lam)
        lam = GaussCopulaParams(p.mu, FactorScale(p.scale.B, np.full(2, 0.8)),
                                TransformParams.yeo_johnson([0.8, 1.2]), family.layout).pack()
        chunks, size = 60, 500
        rep, score = [], []
        for _ in range(chunks):
            eps = rng.standard_normal((size, family.eps_dim))
            rep.append(estimate_grad(family, toy_target, lam, eps))
            score.append(estimate_grad(family, toy_target, lam, eps, estimator="score"))
        rep, score = np.array(rep), np.array(score)
        se = np.sqrt(rep.var(axis=0, ddof=1) / chunks + score.var(axis=0, ddof=1) / chunks)
        assert np.all(np.abs(rep.mean(axis=0) - score.mean(axis=0)) < 5.0 * se + 1e-8)

    @pytest.mark.slow
    def test_score_has_zero_mean(self, rng):
        """E_q[grad_lambda log q] = 0: every coordinate within 4.5 standard errors over 10^5 draws."""
        family = GaussianCopulaFamily(2, 1, "yj")
        lam = random_lambda(family, rng)
        p = family.params(lam)
        n = 100_000
        eps = rng.standard_normal((n, family.eps_dim))
        scores = np.array([family.score_draw(family.sample(e, p), p) for e in eps])
        se = scores.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(scores.mean(axis=0)) < 4.5 * se)

    @pytest.mark.unit
    def test_reparam_variance_below_score(self, toy_target, rng):
        """Near the posterior the single-draw reparameterization gradient varies less per coordinate."""
        family = GaussianCopulaFamily(2, 1)
        B = np.array([[np.sqrt(0.8)], [np.sqrt(0.8)]])
        lam = GaussCopulaParams(np.array([1.2, -0.3]), FactorScale(B, np.full(2, 1.2 * np.sqrt(0.2))),
                                TransformParams.identity(2), family.layout).pack()
        eps = rng.standard_normal((2000, family.eps_dim))
        rep = np.array([estimate_grad(family, toy_target, lam, eps[i:i + 1]) for i in range(len(eps))])
        score = np.array([estimate_grad(family, toy_target, lam, eps[i:i + 1], estimator="score")
                          for i in range(len(eps))])
        assert np.all(rep.var(axis=0) <= score.var(axis=0))


class TestSGAOptimizer:
    """Tests for the optimization loop."""

    @pytest.mark.unit
    def test_elbo_improves(self, toy_target):
        """The window-average ELBO should rise above the first steps."""
        family = GaussianCopulaFamily(2, 1)
        trace = run(family, toy_target, OptimizerConfig(n_steps=300, seed=1, elbo_window=100))
        assert trace.n_steps == 300
        assert trace.window_average_elbo > np.nanmean(trace.elbo[:20])
        assert trace.flagged_steps == 0
        assert not trace.unhealthy

    @pytest.mark.unit
    def test_seed_determinism(self, toy_target):
        """Same seed, same trace and final lambda, bit for bit."""
        family = GaussianCopulaFamily(2, 1, "yj")
        cfg = OptimizerConfig(n_steps=80, samples_per_step=3, seed=42)
        a = run(family, toy_target, cfg)
        b = run(family, toy_target, cfg)
        np.testing.assert_array_equal(a.elbo, b.elbo)
        np.testing.assert_array_equal(a.final_lambda, b.final_lambda)

    @pytest.mark.unit
    def test_workers_do_not_change_result(self, toy_target):
        """Sample-level threads reduce in order, so results match the serial run."""
        family = GaussianCopulaFamily(2, 1, "igh")
        serial = run(family, toy_target, OptimizerConfig(n_steps=40, samples_per_step=4, seed=3))
        threaded = run(family, toy_target,
                       OptimizerConfig(n_steps=40, samples_per_step=4, seed=3, sample_workers=3))
        np.testing.assert_array_equal(serial.elbo, threaded.elbo)
        np.testing.assert_array_equal(serial.final_lambda, threaded.final_lambda)

    @pytest.mark.unit
    def test_checkpoints(self, toy_target):
        """Snapshots every checkpoint_every steps; the last one is the final lambda."""
        family = GaussianCopulaFamily(2, 1)
        trace = run(family, toy_target, OptimizerConfig(n_steps=300, checkpoint_every=100))
        assert [step for step, _ in trace.checkpoints] == [100, 200, 300]
        np.testing.assert_array_equal(trace.checkpoints[-1][1], trace.final_lambda)

    @pytest.mark.unit
    def test_all_steps_flagged(self, rng):
        """Non-finite targets flag every step and leave lambda at its start."""
        family = GaussianCopulaFamily(2, 1)
        cfg = OptimizerConfig(n_steps=25, seed=9)
        trace = SGAOptimizer(cfg).run(family, NaNTarget())
        assert trace.flagged_steps == 25
        assert trace.unhealthy
        assert np.isnan(trace.window_average_elbo)
        start = family.initial_lambda(np.random.default_rng(9))
        np.testing.assert_array_equal(trace.final_lambda, start)

    @pytest.mark.unit
    def test_some_steps_flagged(self):
        """Partially non-finite targets flag only the affected steps."""
        family = GaussianCopulaFamily(2, 0)
        trace = run(family, NaNTarget(threshold=0.15), OptimizerConfig(n_steps=200, seed=2))
        assert 0 < trace.flagged_steps < 200
        assert np.all(np.isnan(trace.elbo[trace.flagged]))
        assert np.all(np.isfinite(trace.elbo[~trace.flagged]))

    @pytest.mark.unit
    def test_dimension_mismatch(self, toy_target):
        """Family and target must agree on m."""
        with pytest.raises(SpecError):
            run(GaussianCopulaFamily(3, 1), toy_target, OptimizerConfig(n_steps=1))

    @pytest.mark.slow
    def test_gaussian_toy_ceiling(self, toy_target):
        """A factor Gaussian reaches log Z; mean field stops about 0.51 short."""
        cfg = OptimizerConfig(n_steps=20_000, seed=20190501)
        full = run(GaussianCopulaFamily(2, 1), toy_target, cfg)
        mean_field = run(GaussianCopulaFamily(2, 0), toy_target, cfg)
        assert abs(full.window_average_elbo - (-3.0)) < 0.05
        gap = -3.0 - mean_field.window_average_elbo
        assert gap == pytest.approx(toy_target.kl_best_diagonal(), abs=0.1)
