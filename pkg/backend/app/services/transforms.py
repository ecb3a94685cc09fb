"""
Element-wise margin transformations for the implicit copula families.

Two one-to-one maps of the real line are supported, both evaluated through
their inverse t^{-1}: psi -> theta because that is the direction the sampler
uses:

- Yeo-Johnson, gamma in (0, 2); gamma = 1 is the identity.
- Inverse G&H (Tukey), gamma = (g, h) with h in (0, 1).

All functions broadcast: parameters have shape (m,) and psi/theta may have
shape (m,), (n, m) or, for a single margin, any shape.  The forward map of the
G&H transform has no closed form and is found by a vectorised safeguarded
Newton iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit, logit

from app.services.errors import NumericalError, ParameterError

logger = logging.getLogger(__name__)

# Below this |g| the g = 0 closed forms are used (the g != 0 form is 0/0).
GH_G_ZERO = 1e-8
# Absolute residual |t^{-1}(psi) - theta| accepted by the forward root finder.
FORWARD_TOL = 1e-11
FORWARD_STEP_FLOOR = 4.0 * np.finfo(float).eps
FORWARD_MAX_ITER = 200


class TransformKind(str, Enum):
    """Margin transformation families."""
    IDENTITY = "identity"
    YEO_JOHNSON = "yj"
    INVERSE_GH = "igh"

    @property
    def n_params(self) -> int:
        return {"identity": 0, "yj": 1, "igh": 2}[self.value]


@dataclass(frozen=True)
class TransformParams:
    """Per-margin transformation parameters for m margins of one kind.

    ``unconstrained`` has shape (n_params, m): row 0 is the YJ gamma image or
    the G&H g, row 1 the G&H h image.
    """
    kind: TransformKind
    unconstrained: np.ndarray

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.unconstrained, dtype=float))
        object.__setattr__(self, "unconstrained", u)
        if u.shape[0] != self.kind.n_params:
            raise ParameterError(
                f"{self.kind.value} expects {self.kind.n_params} parameter rows, got {u.shape[0]}"
            )
        if not np.all(np.isfinite(u)):
            raise ParameterError("transformation parameters must be finite")
        if self.kind is TransformKind.YEO_JOHNSON:
            gamma = self.yj_gamma
            if np.any(gamma <= 0.0) or np.any(gamma >= 2.0):
                raise ParameterError("Yeo-Johnson gamma must lie in (0, 2)")
        elif self.kind is TransformKind.INVERSE_GH:
            h = self.gh_h
            if np.any(h <= 0.0) or np.any(h >= 1.0):
                raise ParameterError("G&H h must lie in (0, 1)")

    # Constructors ---------------------------------------------------------

    @classmethod
    def identity(cls, m: int) -> TransformParams:
        return cls(TransformKind.IDENTITY, np.zeros((0, m)))

    @classmethod
    def yeo_johnson(cls, gamma) -> TransformParams:
        gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
        if np.any(gamma <= 0.0) or np.any(gamma >= 2.0):
            raise ParameterError("Yeo-Johnson gamma must lie in (0, 2)")
        return cls(TransformKind.YEO_JOHNSON, logit(gamma / 2.0)[None, :])

    @classmethod
    def inverse_gh(cls, g, h) -> TransformParams:
        g, h = np.broadcast_arrays(
            np.atleast_1d(np.asarray(g, dtype=float)), np.atleast_1d(np.asarray(h, dtype=float))
        )
        if np.any(h <= 0.0) or np.any(h >= 1.0):
            raise ParameterError("G&H h must lie in (0, 1)")
        return cls(TransformKind.INVERSE_GH, np.vstack([g, logit(h)]))

    # Constrained views ----------------------------------------------------

    @property
    def m(self) -> int:
        return self.unconstrained.shape[1]

    @property
    def yj_gamma(self) -> np.ndarray:
        return 2.0 * expit(self.unconstrained[0])

    @property
    def gh_g(self) -> np.ndarray:
        return self.unconstrained[0]

    @property
    def gh_h(self) -> np.ndarray:
        return expit(self.unconstrained[1])

    def constrained(self) -> np.ndarray:
        """Constrained values, shape (n_params, m)."""
        if self.kind is TransformKind.YEO_JOHNSON:
            return self.yj_gamma[None, :]
        if self.kind is TransformKind.INVERSE_GH:
            return np.vstack([self.gh_g, self.gh_h])
        return np.zeros((0, self.m))

    def chain_factor(self) -> np.ndarray:
        """d(constrained)/d(unconstrained), shape (n_params, m)."""
        if self.kind is TransformKind.YEO_JOHNSON:
            s = expit(self.unconstrained[0])
            return (2.0 * s * (1.0 - s))[None, :]
        if self.kind is TransformKind.INVERSE_GH:
            h = self.gh_h
            return np.vstack([np.ones(self.m), h * (1.0 - h)])
        return np.zeros((0, self.m))

    def subset(self, index) -> TransformParams:
        """Parameters of the selected margins only."""
        u = self.unconstrained[:, index]
        if u.ndim == 1:
            u = u[:, None]
        return TransformParams(self.kind, u)


@dataclass
class DerivativeBundle:
    """Derivatives of the transform at (psi, theta = t^{-1}(psi)).

    Parameter derivatives carry a leading axis of length n_params and are
    taken with respect to the constrained parameters.
    """
    theta: np.ndarray
    psi: np.ndarray
    dtheta_dpsi: np.ndarray
    tprime: np.ndarray
    d2theta_dpsi2: np.ndarray
    d2psi_dtheta2: np.ndarray
    dtheta_dparam: np.ndarray
    dtprime_dparam: np.ndarray
    dlog_tprime_dtheta: np.ndarray
    dpsi_dparam: np.ndarray
    log_tprime: np.ndarray


def tf_param_map(u, kind: TransformKind) -> tuple[TransformParams, np.ndarray]:
    """Map unconstrained optimizer coordinates to parameters plus chain factor."""
    params = TransformParams(kind, np.asarray(u, dtype=float))
    return params, params.chain_factor()


def tf_param_unmap(params: TransformParams) -> np.ndarray:
    """Inverse of tf_param_map: the unconstrained coordinates."""
    return params.unconstrained.copy()


# Yeo-Johnson ----------------------------------------------------------------


def _yj_parts(psi, gamma):
    """Branch-wise log terms; every input is clipped so both branches stay finite."""
    beta = 2.0 - gamma
    pos = np.maximum(psi, 0.0)
    neg = np.minimum(psi, 0.0)
    l_pos = np.log1p(gamma * pos)
    l_neg = np.log1p(-beta * neg)
    return beta, pos, neg, l_pos, l_neg


def _yj_inverse(psi, gamma):
    _, _, _, l_pos, l_neg = _yj_parts(psi, gamma)
    beta = 2.0 - gamma
    return np.where(psi >= 0.0, np.expm1(l_pos / gamma), -np.expm1(l_neg / beta))


def _yj_forward(theta, gamma):
    beta = 2.0 - gamma
    lt_pos = np.log1p(np.maximum(theta, 0.0))
    lt_neg = np.log1p(-np.minimum(theta, 0.0))
    return np.where(
        theta >= 0.0,
        np.expm1(gamma * lt_pos) / gamma,
        -np.expm1(beta * lt_neg) / beta,
    )


def _yj_bundle(psi, gamma) -> DerivativeBundle:
    beta, pos, neg, l_pos, l_neg = _yj_parts(psi, gamma)
    upper = psi >= 0.0
    theta = np.where(upper, np.expm1(l_pos / gamma), -np.expm1(l_neg / beta))
    # log(1 + |theta|) on each branch
    lt_pos = l_pos / gamma
    lt_neg = l_neg / beta

    log_dtheta = np.where(upper, (1.0 / gamma - 1.0) * l_pos, (1.0 / beta - 1.0) * l_neg)
    dtheta_dpsi = np.exp(log_dtheta)
    d2theta = (1.0 - gamma) * np.where(
        upper, np.exp((1.0 / gamma - 2.0) * l_pos), np.exp((1.0 / beta - 2.0) * l_neg)
    )
    tprime = np.exp(-log_dtheta)
    dlog_tprime = (gamma - 1.0) * np.where(upper, np.exp(-lt_pos), np.exp(-lt_neg))
    d2psi = dlog_tprime * tprime

    # d t_gamma(theta) / d gamma at fixed theta
    dpsi_dgamma = np.where(
        upper,
        ((1.0 + gamma * pos) * lt_pos - pos) / gamma,
        ((1.0 - beta * neg) * lt_neg + neg) / beta,
    )
    dtprime_dgamma = np.where(upper, tprime * lt_pos, -tprime * lt_neg)
    dtheta_dgamma = -dtheta_dpsi * dpsi_dgamma

    return DerivativeBundle(
        theta=theta,
        psi=np.asarray(psi, dtype=float) + np.zeros_like(theta),
        dtheta_dpsi=dtheta_dpsi,
        tprime=tprime,
        d2theta_dpsi2=d2theta,
        d2psi_dtheta2=d2psi,
        dtheta_dparam=dtheta_dgamma[None, ...],
        dtprime_dparam=dtprime_dgamma[None, ...],
        dlog_tprime_dtheta=dlog_tprime,
        dpsi_dparam=dpsi_dgamma[None, ...],
        log_tprime=-log_dtheta,
    )


# Inverse G&H ----------------------------------------------------------------


def _gh_a(psi, g):
    """(exp(g psi) - 1)/g with its g -> 0 limit psi, plus dA/dg."""
    small = np.abs(g) < GH_G_ZERO
    g_safe = np.where(small, 1.0, g)
    egp = np.exp(g * psi)
    a = np.where(small, psi, np.expm1(g * psi) / g_safe)
    da_dg = np.where(small, 0.5 * psi * psi, (psi * egp - a) / g_safe)
    return a, egp, da_dg


def _gh_inverse(psi, g, h):
    a, _, _ = _gh_a(psi, g)
    return a * np.exp(0.5 * h * psi * psi)


def _gh_dinverse(psi, g, h):
    a, egp, _ = _gh_a(psi, g)
    return np.exp(0.5 * h * psi * psi) * (egp + h * psi * a)


def _gh_forward(theta, g, h):
    theta, g, h = (np.array(x, dtype=float) for x in np.broadcast_arrays(theta, g, h))
    if theta.size == 0:
        return theta
    lo = -np.ones_like(theta)
    hi = np.ones_like(theta)
    # t^{-1} grows at least linearly, so doubling brackets every finite target
    for _ in range(FORWARD_MAX_ITER):
        low_bad = _gh_inverse(lo, g, h) > theta
        high_bad = _gh_inverse(hi, g, h) < theta
        if not (low_bad.any() or high_bad.any()):
            break
        lo = np.where(low_bad, 2.0 * lo, lo)
        hi = np.where(high_bad, 2.0 * hi, hi)
    else:
        raise NumericalError("could not bracket the G&H forward transform")

    psi = np.clip(theta, lo, hi)
    converged = np.zeros(theta.shape, dtype=bool)
    for _ in range(FORWARD_MAX_ITER):
        f = _gh_inverse(psi, g, h) - theta
        converged |= np.abs(f) <= FORWARD_TOL
        if converged.all():
            return psi
        lo = np.where(f < 0.0, psi, lo)
        hi = np.where(f > 0.0, psi, hi)
        newton = psi - f / _gh_dinverse(psi, g, h)
        outside = ~np.isfinite(newton) | (newton <= lo) | (newton >= hi)
        step = np.where(outside, 0.5 * (lo + hi), newton)
        # a step inside the float spacing of psi cannot shrink |f| further
        converged |= np.abs(step - psi) <= FORWARD_STEP_FLOOR * np.maximum(1.0, np.abs(psi))
        psi = np.where(converged, psi, step)
    raise NumericalError(
        f"G&H forward transform did not converge in {FORWARD_MAX_ITER} iterations"
    )


def _gh_bundle(psi, g, h) -> DerivativeBundle:
    psi = np.asarray(psi, dtype=float)
    a, egp, da_dg = _gh_a(psi, g)
    e = np.exp(0.5 * h * psi * psi)
    theta = a * e
    core = egp + h * psi * a
    dtheta_dpsi = e * core
    d2theta = e * (h * psi * core + g * egp + h * a + h * psi * egp)
    tprime = 1.0 / dtheta_dpsi
    d2psi = -d2theta * tprime**3
    dlog_tprime = -d2theta * tprime**2

    dtheta_dg = e * da_dg
    dtheta_dh = 0.5 * psi * psi * theta
    ddpsi_dg = e * (psi * egp + h * psi * da_dg)
    ddpsi_dh = e * (0.5 * psi * psi * core + psi * a)

    dtheta_dparam = np.stack([dtheta_dg, dtheta_dh])
    ddpsi_dparam = np.stack([ddpsi_dg, ddpsi_dh])
    dpsi_dparam = -dtheta_dparam * tprime
    # total derivative at fixed theta: psi shifts with the parameters too
    dtprime_dparam = -(ddpsi_dparam + d2theta * dpsi_dparam) * tprime**2

    return DerivativeBundle(
        theta=theta,
        psi=psi + np.zeros_like(theta),
        dtheta_dpsi=dtheta_dpsi,
        tprime=tprime,
        d2theta_dpsi2=d2theta,
        d2psi_dtheta2=d2psi,
        dtheta_dparam=dtheta_dparam,
        dtprime_dparam=dtprime_dparam,
        dlog_tprime_dtheta=dlog_tprime,
        dpsi_dparam=dpsi_dparam,
        log_tprime=-(0.5 * h * psi * psi + np.log(core)),
    )


def _identity_bundle(psi) -> DerivativeBundle:
    psi = np.asarray(psi, dtype=float)
    ones = np.ones_like(psi)
    zeros = np.zeros_like(psi)
    empty = np.zeros((0,) + psi.shape)
    return DerivativeBundle(
        theta=psi.copy(),
        psi=psi.copy(),
        dtheta_dpsi=ones,
        tprime=ones.copy(),
        d2theta_dpsi2=zeros,
        d2psi_dtheta2=zeros.copy(),
        dtheta_dparam=empty,
        dtprime_dparam=empty.copy(),
        dlog_tprime_dtheta=zeros.copy(),
        dpsi_dparam=empty.copy(),
        log_tprime=zeros.copy(),
    )


# Public operations ----------------------------------------------------------


def tf_inverse(psi, p: TransformParams) -> np.ndarray:
    """theta = t_gamma^{-1}(psi); strictly increasing in psi."""
    psi = np.asarray(psi, dtype=float)
    if p.kind is TransformKind.YEO_JOHNSON:
        return _yj_inverse(psi, p.yj_gamma)
    if p.kind is TransformKind.INVERSE_GH:
        return _gh_inverse(psi, p.gh_g, p.gh_h)
    return psi.copy()


def tf_forward(theta, p: TransformParams) -> np.ndarray:
    """psi = t_gamma(theta); closed form for YJ, root finding for G&H."""
    theta = np.asarray(theta, dtype=float)
    if p.kind is TransformKind.YEO_JOHNSON:
        return _yj_forward(theta, p.yj_gamma)
    if p.kind is TransformKind.INVERSE_GH:
        return _gh_forward(theta, p.gh_g, p.gh_h)
    return theta.copy()


def tf_derivatives(psi, p: TransformParams) -> DerivativeBundle:
    """Every derivative the samplers and densities need, evaluated at psi."""
    if p.kind is TransformKind.YEO_JOHNSON:
        return _yj_bundle(np.asarray(psi, dtype=float), p.yj_gamma)
    if p.kind is TransformKind.INVERSE_GH:
        return _gh_bundle(psi, p.gh_g, p.gh_h)
    return _identity_bundle(psi)


def tf_log_tprime(theta, p: TransformParams) -> np.ndarray:
    """log t'_gamma(theta), the log-Jacobian of theta -> psi."""
    return tf_derivatives(tf_forward(theta, p), p).log_tprime
