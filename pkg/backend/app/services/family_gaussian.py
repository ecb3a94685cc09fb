"""
Gaussian copula variational family with a factor scale.

psi ~ N(mu, B B^T + D^2) and theta_i = t^{-1}_{gamma_i}(psi_i).  The density of
theta is the Gaussian density of psi = t(theta) times the Jacobian
prod_i t'(theta_i); the copula form of the same density is never evaluated
because it would need m numerical integrations.

The flat variational vector lambda is laid out as

    (mu [m], vech(B) [mk - k(k-1)/2], d [m], alpha [m, skew only], gamma [m * n_params])

where vech runs column by column over the lower trapezoid of B and the gamma
block holds the unconstrained transform coordinates one parameter row at a time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from app.services.errors import ParameterError
from app.services.factor_scale import (
    FactorScale,
    fs_diag,
    fs_inv_diag,
    fs_logdet,
    fs_sample_xi,
    fs_solve,
    vech_lower,
    vech_size,
)
from app.services.transforms import (
    DerivativeBundle,
    TransformKind,
    TransformParams,
    tf_derivatives,
    tf_forward,
)

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

# Starting point of every fit: close to the nested Gaussian family.
INIT_B_SD = 0.01
INIT_D = 0.1
INIT_GH_H = 0.05


@dataclass(frozen=True)
class ParamLayout:
    """Offsets of each block inside the flat lambda vector."""
    m: int
    k: int
    kind: TransformKind
    skew: bool = False

    def __post_init__(self):
        if self.m < 1:
            raise ParameterError("dimension m must be at least 1")
        if not 0 <= self.k <= self.m:
            raise ParameterError(f"factor count k={self.k} must lie in [0, m={self.m}]")

    @property
    def sizes(self) -> dict[str, int]:
        return {
            "mu": self.m,
            "b": vech_size(self.m, self.k),
            "d": self.m,
            "alpha": self.m if self.skew else 0,
            "gamma": self.m * self.kind.n_params,
        }

    @property
    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, size in self.sizes.items():
            out[name] = slice(start, start + size)
            start += size
        return out

    @property
    def size(self) -> int:
        return sum(self.sizes.values())


def gc_param_count(m: int, k: int, transform_kind: TransformKind | str, skew: bool = False) -> int:
    """Number of variational parameters |lambda| for a family configuration."""
    return ParamLayout(m, k, TransformKind(transform_kind), skew).size


def _unpack_common(lam: np.ndarray, layout: ParamLayout):
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (layout.size,):
        raise ParameterError(f"lambda must have length {layout.size}, got {lam.shape}")
    s = layout.slices
    scale = FactorScale.from_vech(lam[s["b"]], lam[s["d"]], layout.k)
    if layout.kind is TransformKind.IDENTITY:
        tparams = TransformParams.identity(layout.m)
    else:
        tparams = TransformParams(
            layout.kind, lam[s["gamma"]].reshape(layout.kind.n_params, layout.m)
        )
    return lam[s["mu"]].copy(), scale, tparams


def _pack_common(layout, mu, scale, tparams, alpha=None) -> np.ndarray:
    lam = np.zeros(layout.size)
    s = layout.slices
    lam[s["mu"]] = mu
    lam[s["b"]] = vech_lower(scale.B)
    lam[s["d"]] = scale.d
    if layout.skew:
        lam[s["alpha"]] = alpha
    lam[s["gamma"]] = tparams.unconstrained.ravel()
    return lam


def initial_lambda(
    layout: ParamLayout,
    rng: np.random.Generator,
    mu0: np.ndarray | None = None,
) -> np.ndarray:
    """Documented starting point: mu = 0 (or mu0), small B, d = 0.1, alpha = 0, identity-like gamma."""
    m, k = layout.m, layout.k
    mu = np.zeros(m) if mu0 is None else np.asarray(mu0, dtype=float)
    B = np.tril(rng.normal(0.0, INIT_B_SD, size=(m, k)))
    scale = FactorScale(B, np.full(m, INIT_D))
    if layout.kind is TransformKind.YEO_JOHNSON:
        tparams = TransformParams.yeo_johnson(np.ones(m))
    elif layout.kind is TransformKind.INVERSE_GH:
        tparams = TransformParams.inverse_gh(np.zeros(m), np.full(m, INIT_GH_H))
    else:
        tparams = TransformParams.identity(m)
    return _pack_common(layout, mu, scale, tparams, np.zeros(m))


@dataclass
class GaussCopulaParams:
    """Unpacked Gaussian copula parameters."""
    mu: np.ndarray
    scale: FactorScale
    tparams: TransformParams
    layout: ParamLayout = field(repr=False)

    @classmethod
    def unpack(cls, lam: np.ndarray, layout: ParamLayout) -> GaussCopulaParams:
        mu, scale, tparams = _unpack_common(lam, layout)
        return cls(mu, scale, tparams, layout)

    def pack(self) -> np.ndarray:
        return _pack_common(self.layout, self.mu, self.scale, self.tparams)


@dataclass
class FamilyDraw:
    """One or more draws from a family with the quantities gradients reuse."""
    eps: np.ndarray
    psi: np.ndarray
    theta: np.ndarray
    bundle: DerivativeBundle
    xi: np.ndarray


def mvn_logpdf(r: np.ndarray, scale: FactorScale) -> tuple[np.ndarray, np.ndarray]:
    """log N(r; 0, Sigma) and Sigma^{-1} r for r of shape (m,) or (n, m)."""
    r2 = np.atleast_2d(r)
    x = fs_solve(scale, r2.T).T
    quad = np.sum(r2 * x, axis=1)
    logpdf = -0.5 * (scale.m * LOG_2PI + fs_logdet(scale) + quad)
    if np.ndim(r) == 1:
        return logpdf[0], x[0]
    return logpdf, x


def split_eps(eps: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    eps = np.asarray(eps, dtype=float)
    return eps[..., :k], eps[..., k:]


# Draws ----------------------------------------------------------------------


def gc_sample(eps: np.ndarray, p: GaussCopulaParams) -> FamilyDraw:
    z, e = split_eps(eps, p.scale.k)
    xi = fs_sample_xi(p.scale, z, e)
    psi = p.mu + xi
    bundle = tf_derivatives(psi, p.tparams)
    return FamilyDraw(eps=np.asarray(eps, dtype=float), psi=psi, theta=bundle.theta,
                      bundle=bundle, xi=xi)


def gc_draw(eps: np.ndarray, p: GaussCopulaParams) -> np.ndarray:
    """theta = h(eps, lambda) for eps = (z [k], epsilon [m]), or rows thereof."""
    return gc_sample(eps, p).theta


# Densities ------------------------------------------------------------------


def gc_log_density_psi(psi, bundle: DerivativeBundle, p: GaussCopulaParams):
    """log q(theta) when psi = t(theta) and its bundle are already known."""
    logpdf, _ = mvn_logpdf(psi - p.mu, p.scale)
    return logpdf + np.sum(bundle.log_tprime, axis=-1)


def gc_log_density(theta: np.ndarray, p: GaussCopulaParams):
    """log q_lambda(theta) = log phi_m(psi; mu, Sigma) + sum log t'(theta_i)."""
    psi = tf_forward(theta, p.tparams)
    return gc_log_density_psi(psi, tf_derivatives(psi, p.tparams), p)


def gc_grad_theta_psi(psi, bundle: DerivativeBundle, p: GaussCopulaParams) -> np.ndarray:
    _, x = mvn_logpdf(psi - p.mu, p.scale)
    return bundle.dlog_tprime_dtheta - bundle.tprime * x


def gc_grad_theta(theta: np.ndarray, p: GaussCopulaParams) -> np.ndarray:
    """grad_theta log q = t''/t' - diag(t') Sigma^{-1} (psi - mu)."""
    psi = tf_forward(theta, p.tparams)
    return gc_grad_theta_psi(psi, tf_derivatives(psi, p.tparams), p)


# Gradients in lambda ----------------------------------------------------------


def _gamma_block(param_grad: np.ndarray, tparams: TransformParams) -> np.ndarray:
    """Chain a (n_params, m) constrained gradient into unconstrained coordinates."""
    return (param_grad * tparams.chain_factor()).ravel()


def gc_reparam_grad_draw(draw: FamilyDraw, p: GaussCopulaParams, w: np.ndarray) -> np.ndarray:
    layout = p.layout
    z, e = split_eps(draw.eps, p.scale.k)
    a = draw.bundle.dtheta_dpsi * w
    out = np.zeros(layout.size)
    s = layout.slices
    out[s["mu"]] = a
    out[s["b"]] = vech_lower(np.outer(a, z))
    out[s["d"]] = a * e
    out[s["gamma"]] = _gamma_block(draw.bundle.dtheta_dparam * w, p.tparams)
    return out


def gc_reparam_grad(eps: np.ndarray, p: GaussCopulaParams, w: np.ndarray) -> np.ndarray:
    """(d theta / d lambda)^T w at theta = gc_draw(eps, p), one draw."""
    return gc_reparam_grad_draw(gc_sample(eps, p), p, np.asarray(w, dtype=float))


def gc_score_grad_psi(psi, bundle: DerivativeBundle, p: GaussCopulaParams) -> np.ndarray:
    layout = p.layout
    scale = p.scale
    _, x = mvn_logpdf(psi - p.mu, scale)
    out = np.zeros(layout.size)
    s = layout.slices
    out[s["mu"]] = x
    if scale.k:
        grad_B = -fs_solve(scale, scale.B) + np.outer(x, x @ scale.B)
        out[s["b"]] = vech_lower(grad_B)
    out[s["d"]] = scale.d * (x * x - fs_inv_diag(scale))
    param_grad = -x * bundle.dpsi_dparam + bundle.dtprime_dparam / bundle.tprime
    out[s["gamma"]] = _gamma_block(param_grad, p.tparams)
    return out


def gc_score_grad(theta: np.ndarray, p: GaussCopulaParams) -> np.ndarray:
    """grad_lambda log q_lambda(theta) at fixed theta."""
    psi = tf_forward(theta, p.tparams)
    return gc_score_grad_psi(psi, tf_derivatives(psi, p.tparams), p)


# Margins --------------------------------------------------------------------


def gc_marginal_density(theta_grid: np.ndarray, coord: int, p: GaussCopulaParams) -> np.ndarray:
    """q_i(theta) = phi(psi; mu_i, sigma_i^2) t'(theta), psi = t(theta)."""
    tp = p.tparams.subset(coord)
    psi = tf_forward(np.asarray(theta_grid, dtype=float), tp)
    bundle = tf_derivatives(psi, tp)
    sd = np.sqrt(fs_diag(p.scale)[coord])
    return norm.pdf(psi, loc=p.mu[coord], scale=sd) * bundle.tprime


class GaussianCopulaFamily:
    """Gaussian copula family bound to a fixed (m, k, transform) configuration."""

    skew = False
    supports_score = True

    def __init__(self, m: int, k: int, kind: TransformKind | str = TransformKind.IDENTITY):
        self.layout = ParamLayout(m, k, TransformKind(kind), skew=False)

    @property
    def dim(self) -> int:
        return self.layout.m

    @property
    def eps_dim(self) -> int:
        return self.layout.k + self.layout.m

    @property
    def n_params(self) -> int:
        return self.layout.size

    def params(self, lam: np.ndarray) -> GaussCopulaParams:
        return GaussCopulaParams.unpack(lam, self.layout)

    def initial_lambda(self, rng: np.random.Generator, mu0=None) -> np.ndarray:
        return initial_lambda(self.layout, rng, mu0)

    def sample(self, eps, p: GaussCopulaParams) -> FamilyDraw:
        return gc_sample(eps, p)

    def draw(self, eps, lam) -> np.ndarray:
        return gc_draw(eps, self.params(lam))

    def log_density_draw(self, draw: FamilyDraw, p: GaussCopulaParams):
        return gc_log_density_psi(draw.psi, draw.bundle, p)

    def log_density(self, theta, lam):
        return gc_log_density(theta, self.params(lam))

    def grad_theta_draw(self, draw: FamilyDraw, p: GaussCopulaParams) -> np.ndarray:
        return gc_grad_theta_psi(draw.psi, draw.bundle, p)

    def vjp_draw(self, draw: FamilyDraw, p: GaussCopulaParams, w: np.ndarray) -> np.ndarray:
        return gc_reparam_grad_draw(draw, p, w)

    def score_draw(self, draw: FamilyDraw, p: GaussCopulaParams) -> np.ndarray:
        return gc_score_grad_psi(draw.psi, draw.bundle, p)

    def psi_moments(self, p: GaussCopulaParams) -> tuple[np.ndarray, np.ndarray]:
        """Exact mean and covariance of psi."""
        return p.mu.copy(), p.scale.B @ p.scale.B.T + np.diag(p.scale.d**2)

    def marginal_density(self, theta_grid, coord: int, p: GaussCopulaParams) -> np.ndarray:
        return gc_marginal_density(theta_grid, coord, p)
