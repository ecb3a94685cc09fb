"""
Skew-normal copula variational family.

psi has density 2 phi_m(psi; mu, Sigma) Phi(alpha^T S^{-1/2} (psi - mu)) with
S = diag(Sigma), Sigma = B B^T + D^2, and theta_i = t^{-1}_{gamma_i}(psi_i).

Draws use the latent-Gaussian representation

    psi = mu + delta~ |r| + (I - delta~ delta~^T Sigma^{-1}) xi + sqrt(1 - kappa) delta~ eps0,
    xi = B z + d * eps,

with delta~ = S^{1/2} delta and kappa = delta~^T Sigma^{-1} delta~.

Writing a = S^{-1/2} alpha and rho = 1 + a^T Sigma a, the same quantities
collapse to delta~ = Sigma a / sqrt(rho), Sigma^{-1} delta~ = a / sqrt(rho) and
1 - kappa = 1 / rho, so

    psi = mu + xi + (Sigma a) f,   f = |r| / sqrt(rho) + (eps0 - a^T xi) / rho.

``sn_vjp`` back-propagates w through this expression one scalar or rank-one
term at a time; no m x m or m x mk Jacobian is ever built.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr
from scipy.stats import norm

from app.services.errors import DegenerateSkewError
from app.services.factor_scale import (
    FactorScale,
    fs_diag,
    fs_matvec,
    fs_sample_xi,
    fs_solve,
    vech_lower,
)
from app.services.family_gaussian import (
    LOG_2PI,
    FamilyDraw,
    ParamLayout,
    _gamma_block,
    _pack_common,
    _unpack_common,
    initial_lambda,
    mvn_logpdf,
)
from app.services.transforms import (
    DerivativeBundle,
    TransformKind,
    TransformParams,
    tf_derivatives,
    tf_forward,
)

logger = logging.getLogger(__name__)

LOG_2 = float(np.log(2.0))
# kappa this close to one leaves no room for the eps0 term
KAPPA_CEILING = 1.0 - 1e-12


def log_mills(x):
    """log(phi(x) / Phi(x)), stable far into the lower tail."""
    return -0.5 * np.square(x) - 0.5 * LOG_2PI - log_ndtr(x)


@dataclass
class SkewNormCopulaParams:
    """Unpacked skew-normal copula parameters."""
    mu: np.ndarray
    scale: FactorScale
    alpha: np.ndarray
    tparams: TransformParams
    layout: ParamLayout = field(repr=False)

    @classmethod
    def unpack(cls, lam: np.ndarray, layout: ParamLayout) -> SkewNormCopulaParams:
        mu, scale, tparams = _unpack_common(lam, layout)
        alpha = np.asarray(lam, dtype=float)[layout.slices["alpha"]].copy()
        return cls(mu, scale, alpha, tparams, layout)

    def pack(self) -> np.ndarray:
        return _pack_common(self.layout, self.mu, self.scale, self.tparams, self.alpha)


@dataclass
class SkewDerived:
    """Skewness quantities recomputed from (B, d, alpha) on every evaluation."""
    s_diag: np.ndarray
    delta: np.ndarray
    delta_tilde: np.ndarray
    kappa: float
    sqrt_term: float
    a: np.ndarray  # S^{-1/2} alpha
    sigma_a: np.ndarray  # Sigma a
    rho: float  # 1 + alpha^T Omega alpha
    solved: np.ndarray  # Sigma^{-1} delta~


def sn_derived(p: SkewNormCopulaParams) -> SkewDerived:
    """delta, delta~, kappa and sqrt(1 - kappa) for the current parameters."""
    s_diag = fs_diag(p.scale)
    a = p.alpha / np.sqrt(s_diag)
    sigma_a = fs_matvec(p.scale, a)
    rho = 1.0 + float(a @ sigma_a)
    delta_tilde = sigma_a / np.sqrt(rho)
    solved = fs_solve(p.scale, delta_tilde)
    kappa = float(delta_tilde @ solved)
    if not kappa < KAPPA_CEILING:
        raise DegenerateSkewError(f"kappa = {kappa:.15f} leaves no residual variance")
    return SkewDerived(
        s_diag=s_diag,
        delta=delta_tilde / np.sqrt(s_diag),
        delta_tilde=delta_tilde,
        kappa=kappa,
        sqrt_term=1.0 / np.sqrt(rho),
        a=a,
        sigma_a=sigma_a,
        rho=rho,
        solved=solved,
    )


def _split(eps, k: int):
    eps = np.asarray(eps, dtype=float)
    return eps[..., 0], eps[..., 1], eps[..., 2:2 + k], eps[..., 2 + k:]


# Draws ----------------------------------------------------------------------


def sn_psi(eps, p: SkewNormCopulaParams, der: SkewDerived | None = None):
    """psi for eps = (r, eps0, z [k], epsilon [m]) (or rows thereof), plus xi."""
    der = der or sn_derived(p)
    r, e0, z, e = _split(eps, p.scale.k)
    xi = fs_sample_xi(p.scale, z, e)
    coef = np.abs(r) - xi @ der.solved + der.sqrt_term * e0
    psi = p.mu + xi + np.multiply.outer(coef, der.delta_tilde)
    return psi, xi


def sn_sample(eps, p: SkewNormCopulaParams, der: SkewDerived | None = None) -> FamilyDraw:
    psi, xi = sn_psi(eps, p, der)
    bundle = tf_derivatives(psi, p.tparams)
    return FamilyDraw(eps=np.asarray(eps, dtype=float), psi=psi, theta=bundle.theta,
                      bundle=bundle, xi=xi)


def sn_draw(eps, p: SkewNormCopulaParams) -> np.ndarray:
    """theta = h(eps, lambda) for the skew-normal copula."""
    return sn_sample(eps, p).theta


# Densities ------------------------------------------------------------------


def sn_log_density_psi(psi, bundle: DerivativeBundle, p: SkewNormCopulaParams,
                       der: SkewDerived | None = None):
    der = der or sn_derived(p)
    r = psi - p.mu
    logpdf, _ = mvn_logpdf(r, p.scale)
    return LOG_2 + logpdf + log_ndtr(r @ der.a) + np.sum(bundle.log_tprime, axis=-1)


def sn_log_density(theta, p: SkewNormCopulaParams):
    """log q(theta) = log 2 + log phi_m + log Phi(alpha^T S^{-1/2}(psi - mu)) + sum log t'."""
    psi = tf_forward(theta, p.tparams)
    return sn_log_density_psi(psi, tf_derivatives(psi, p.tparams), p)


def sn_grad_theta_psi(psi, bundle: DerivativeBundle, p: SkewNormCopulaParams,
                      der: SkewDerived | None = None) -> np.ndarray:
    der = der or sn_derived(p)
    r = psi - p.mu
    _, x = mvn_logpdf(r, p.scale)
    mills = np.exp(log_mills(r @ der.a))
    skew_term = bundle.tprime * np.multiply.outer(mills, der.a)
    return bundle.dlog_tprime_dtheta - bundle.tprime * x + skew_term


def sn_grad_theta(theta, p: SkewNormCopulaParams) -> np.ndarray:
    """grad_theta log q: Jacobian term, Gaussian term and the Mills-ratio skew term."""
    psi = tf_forward(theta, p.tparams)
    return sn_grad_theta_psi(psi, tf_derivatives(psi, p.tparams), p)


# Vector-Jacobian product ------------------------------------------------------


def sn_vjp_draw(draw: FamilyDraw, p: SkewNormCopulaParams, w: np.ndarray,
                der: SkewDerived | None = None) -> np.ndarray:
    der = der or sn_derived(p)
    layout = p.layout
    scale = p.scale
    B, d = scale.B, scale.d
    r, e0, z, e = _split(draw.eps, scale.k)
    xi = draw.xi
    a, v, rho = der.a, der.sigma_a, der.rho

    g = draw.bundle.dtheta_dpsi * w  # adjoint of psi
    a_xi = float(a @ xi)
    f = abs(float(r)) / np.sqrt(rho) + (float(e0) - a_xi) / rho
    G = float(g @ v)

    xi_bar = g - (G / rho) * a
    rho_bar = G * (-0.5 * abs(float(r)) * rho**-1.5 - (float(e0) - a_xi) / rho**2)
    a_bar = -(G / rho) * xi + 2.0 * rho_bar * v + f * fs_matvec(scale, g)

    # Sigma enters through (Sigma a) f and rho; contract (M + M^T) B with
    # M = f g a^T + rho_bar a a^T without forming M.
    aB = a @ B
    gB = g @ B
    B_bar = f * (np.outer(g, aB) + np.outer(a, gB)) + 2.0 * rho_bar * np.outer(a, aB)
    d_bar = 2.0 * d * (f * g * a + rho_bar * a * a)

    # a = alpha / sqrt(s), s = rowsum(B^2) + d^2
    alpha_bar = a_bar / np.sqrt(der.s_diag)
    s_bar = -0.5 * a_bar * a / der.s_diag
    B_bar += 2.0 * s_bar[:, None] * B
    d_bar += 2.0 * s_bar * d

    # xi = B z + d * eps
    B_bar += np.outer(xi_bar, z)
    d_bar += xi_bar * e

    out = np.zeros(layout.size)
    s = layout.slices
    out[s["mu"]] = g
    out[s["b"]] = vech_lower(B_bar)
    out[s["d"]] = d_bar
    out[s["alpha"]] = alpha_bar
    out[s["gamma"]] = _gamma_block(draw.bundle.dtheta_dparam * w, p.tparams)
    return out


def sn_vjp(eps, p: SkewNormCopulaParams, w: np.ndarray) -> np.ndarray:
    """(d theta(eps, lambda) / d lambda)^T w for one draw; upper-triangle B entries dropped."""
    der = sn_derived(p)
    return sn_vjp_draw(sn_sample(eps, p, der), p, np.asarray(w, dtype=float), der)


# Margins --------------------------------------------------------------------


def sn_marginal_density(theta_grid, coord: int, p: SkewNormCopulaParams) -> np.ndarray:
    """Univariate skew-normal margin of psi_i times t'(theta)."""
    der = sn_derived(p)
    tp = p.tparams.subset(coord)
    psi = tf_forward(np.asarray(theta_grid, dtype=float), tp)
    bundle = tf_derivatives(psi, tp)
    omega = np.sqrt(der.s_diag[coord])
    delta = der.delta[coord]
    shape = delta / np.sqrt(1.0 - delta * delta)
    zs = (psi - p.mu[coord]) / omega
    dens = 2.0 / omega * norm.pdf(zs) * norm.cdf(shape * zs)
    return dens * bundle.tprime


class SkewNormalCopulaFamily:
    """Skew-normal copula family bound to a fixed (m, k, transform) configuration."""

    skew = True
    supports_score = False

    def __init__(self, m: int, k: int, kind: TransformKind | str = TransformKind.IDENTITY):
        self.layout = ParamLayout(m, k, TransformKind(kind), skew=True)

    @property
    def dim(self) -> int:
        return self.layout.m

    @property
    def eps_dim(self) -> int:
        return 2 + self.layout.k + self.layout.m

    @property
    def n_params(self) -> int:
        return self.layout.size

    def params(self, lam: np.ndarray) -> SkewNormCopulaParams:
        return SkewNormCopulaParams.unpack(lam, self.layout)

    def initial_lambda(self, rng: np.random.Generator, mu0=None) -> np.ndarray:
        return initial_lambda(self.layout, rng, mu0)

    def sample(self, eps, p: SkewNormCopulaParams) -> FamilyDraw:
        return sn_sample(eps, p)

    def draw(self, eps, lam) -> np.ndarray:
        return sn_draw(eps, self.params(lam))

    def log_density_draw(self, draw: FamilyDraw, p: SkewNormCopulaParams):
        return sn_log_density_psi(draw.psi, draw.bundle, p)

    def log_density(self, theta, lam):
        return sn_log_density(theta, self.params(lam))

    def grad_theta_draw(self, draw: FamilyDraw, p: SkewNormCopulaParams) -> np.ndarray:
        return sn_grad_theta_psi(draw.psi, draw.bundle, p)

    def vjp_draw(self, draw: FamilyDraw, p: SkewNormCopulaParams, w: np.ndarray) -> np.ndarray:
        return sn_vjp_draw(draw, p, w)

    def psi_moments(self, p: SkewNormCopulaParams) -> tuple[np.ndarray, np.ndarray]:
        """Exact mean and covariance of psi: mu + sqrt(2/pi) delta~, Sigma - (2/pi) delta~ delta~^T."""
        der = sn_derived(p)
        sigma = p.scale.B @ p.scale.B.T + np.diag(p.scale.d**2)
        c = 2.0 / np.pi
        return p.mu + np.sqrt(c) * der.delta_tilde, sigma - c * np.outer(der.delta_tilde,
                                                                         der.delta_tilde)

    def marginal_density(self, theta_grid, coord: int, p: SkewNormCopulaParams) -> np.ndarray:
        return sn_marginal_density(theta_grid, coord, p)
