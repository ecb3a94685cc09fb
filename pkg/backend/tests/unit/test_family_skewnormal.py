"""
Unit tests for the skew-normal copula family.
"""

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import skewnorm

from app.services.errors import DegenerateSkewError
from app.services.factor_scale import FactorScale
from app.services.family_gaussian import GaussCopulaParams, GaussianCopulaFamily, gc_grad_theta
from app.services.family_skewnormal import (
    SkewNormalCopulaFamily,
    SkewNormCopulaParams,
    log_mills,
    sn_derived,
    sn_grad_theta,
    sn_vjp,
)
from app.services.transforms import TransformParams
from app.services.verification import (
    fd_gradient,
    moment_check,
    quad_normalization,
    random_lambda,
    rel_error,
)


def _params(family, alpha, tparams=None):
    m, k = family.layout.m, family.layout.k
    B = np.tril(np.full((m, k), 0.4))
    return SkewNormCopulaParams(
        np.linspace(-0.3, 0.3, m),
        FactorScale(B, np.full(m, 0.7)),
        np.asarray(alpha, dtype=float),
        tparams or TransformParams.identity(m),
        family.layout,
    )


class TestReduction:
    """alpha = 0 should give back the Gaussian copula."""

    @pytest.mark.unit
    def test_log_density_matches_gaussian(self, rng):
        """log q should coincide with the Gaussian copula when alpha = 0."""
        sn = SkewNormalCopulaFamily(3, 2, "yj")
        gc = GaussianCopulaFamily(3, 2, "yj")
        p = _params(sn, np.zeros(3), TransformParams.yeo_johnson([0.5, 1.0, 1.5]))
        gp = GaussCopulaParams(p.mu, p.scale, p.tparams, gc.layout)
        theta = rng.normal(size=(6, 3))
        np.testing.assert_allclose(sn.log_density(theta, p.pack()), gc.log_density(theta, gp.pack()),
                                   rtol=1e-12)

    @pytest.mark.unit
    def test_draw_matches_gaussian(self, rng):
        """With alpha = 0 the r and eps0 coordinates should drop out."""
        sn = SkewNormalCopulaFamily(3, 2)
        gc = GaussianCopulaFamily(3, 2)
        p = _params(sn, np.zeros(3))
        gp = GaussCopulaParams(p.mu, p.scale, p.tparams, gc.layout)
        eps = rng.standard_normal(sn.eps_dim)
        np.testing.assert_allclose(sn.draw(eps, p.pack()), gc.draw(eps[2:], gp.pack()), rtol=1e-12)

    @pytest.mark.unit
    @pytest.mark.parametrize("kind", ["identity", "yj", "igh"])
    def test_grad_theta_matches_gaussian(self, kind, rng):
        """With alpha = 0 the Mills-ratio term vanishes from grad_theta log q."""
        sn = SkewNormalCopulaFamily(4, 2, kind)
        gc = GaussianCopulaFamily(4, 2, kind)
        p = sn.params(random_lambda(sn, rng))
        p0 = SkewNormCopulaParams(p.mu, p.scale, np.zeros(4), p.tparams, sn.layout)
        gp = GaussCopulaParams(p.mu, p.scale, p.tparams, gc.layout)
        theta = gc.draw(rng.standard_normal((5, gc.eps_dim)), gp.pack())
        np.testing.assert_allclose(sn_grad_theta(theta, p0), gc_grad_theta(theta, gp), rtol=1e-12, atol=1e-12)


class TestDensity:
    """Tests for the skew-normal copula density."""

    @pytest.mark.unit
    def test_univariate_matches_scipy(self):
        """m = 1 with identity margin is scipy's skewnorm."""
        family = SkewNormalCopulaFamily(1, 1)
        p = _params(family, [2.5])
        omega = np.sqrt(0.4**2 + 0.7**2)
        grid = np.linspace(-3.0, 3.0, 13)
        expected = skewnorm(2.5, loc=p.mu[0], scale=omega).logpdf(grid)
        np.testing.assert_allclose(family.log_density(grid[:, None], p.pack()), expected, rtol=1e-10)

    @pytest.mark.unit
    def test_transformed_density_normalised(self):
        """exp(log q) should integrate to one with a G&H margin."""
        family = SkewNormalCopulaFamily(1, 1, "igh")
        lam = _params(family, [-3.0], TransformParams.inverse_gh([0.3], [0.1])).pack()
        total = quad_normalization(lambda t: family.log_density(t[:, None], lam), -40.0, 40.0, 40001)
        assert total == pytest.approx(1.0, abs=1e-5)

    @pytest.mark.unit
    def test_marginal_density_normalised(self):
        """Every univariate margin should integrate to one."""
        family = SkewNormalCopulaFamily(3, 2, "yj")
        p = _params(family, [1.5, -2.0, 0.5], TransformParams.yeo_johnson([0.6, 1.0, 1.4]))
        grid = np.linspace(-40.0, 40.0, 40001)
        for coord in range(3):
            mass = integrate.trapezoid(family.marginal_density(grid, coord, p), grid)
            assert mass == pytest.approx(1.0, abs=1e-5)

    @pytest.mark.unit
    @pytest.mark.parametrize("kind", ["identity", "yj", "igh"])
    def test_grad_theta(self, kind, rng):
        """sn_grad_theta should match central differences of log q."""
        family = SkewNormalCopulaFamily(4, 2, kind)
        lam = random_lambda(family, rng)
        theta = family.draw(rng.standard_normal(family.eps_dim), lam)
        numeric = fd_gradient(lambda t: family.log_density(t, lam), theta)
        assert rel_error(sn_grad_theta(theta, family.params(lam)), numeric) < 1e-5

    @pytest.mark.unit
    def test_log_mills_lower_tail(self):
        """log(phi/Phi) should stay finite far into the lower tail."""
        x = np.array([-40.0, -10.0, 0.0, 5.0])
        values = log_mills(x)
        assert np.all(np.isfinite(values))
        # phi(x)/Phi(x) ~ -x as x -> -inf
        assert values[0] == pytest.approx(np.log(40.0), abs=1e-3)


class TestVJP:
    """Tests for the reverse-mode draw gradient."""

    @pytest.mark.unit
    @pytest.mark.parametrize("kind", ["identity", "yj", "igh"])
    def test_vjp_matches_finite_difference(self, kind, rng):
        """Every block of the VJP should match differences of w . draw."""
        family = SkewNormalCopulaFamily(5, 2, kind)
        lam = random_lambda(family, rng)
        eps = rng.standard_normal(family.eps_dim)
        w = rng.normal(size=5)
        numeric = fd_gradient(lambda x: w @ family.draw(eps, x), lam)
        assert rel_error(sn_vjp(eps, family.params(lam), w), numeric) < 1e-5

    @pytest.mark.unit
    def test_vjp_mean_field(self, rng):
        """The k = 0 configuration should also differentiate cleanly."""
        family = SkewNormalCopulaFamily(3, 0, "yj")
        lam = random_lambda(family, rng)
        eps = rng.standard_normal(family.eps_dim)
        w = rng.normal(size=3)
        numeric = fd_gradient(lambda x: w @ family.draw(eps, x), lam)
        assert rel_error(sn_vjp(eps, family.params(lam), w), numeric) < 1e-5


class TestSampling:
    """Tests for draws and the skewness quantities."""

    @pytest.mark.unit
    def test_kappa_below_one(self, rng):
        """kappa = (rho - 1) / rho should lie in [0, 1)."""
        family = SkewNormalCopulaFamily(4, 2)
        der = sn_derived(family.params(random_lambda(family, rng)))
        assert 0.0 <= der.kappa < 1.0
        assert der.kappa == pytest.approx((der.rho - 1.0) / der.rho, rel=1e-10)

    @pytest.mark.unit
    def test_degenerate_alpha(self):
        """An enormous alpha pushes kappa to one and should be reported."""
        family = SkewNormalCopulaFamily(2, 1)
        p = _params(family, [1e9, 1e9])
        with pytest.raises(DegenerateSkewError):
            sn_derived(p)

    @pytest.mark.unit
    def test_moments_match_exact(self, rng):
        """Sample psi moments should agree with the exact skew-normal moments."""
        family = SkewNormalCopulaFamily(3, 2, "igh")
        lam = _params(family, [3.0, -1.0, 0.0], TransformParams.inverse_gh([0.2] * 3, [0.1] * 3)).pack()
        check = moment_check(family, lam, 50_000, rng)
        assert check.passed(5.0)
