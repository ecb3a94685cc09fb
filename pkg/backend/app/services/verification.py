"""
Independent oracles for the numerical engine.

- central finite differences for every analytic derivative, collected in a
  named check registry run by ``run_all_checks``
- trapezoid-rule posteriors for targets of dimension one or two
- Monte Carlo checks of the skew-normal sampler against its exact moments
- self-normalised importance sampling as a rough reference above two dimensions
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy import linalg as sc_linalg

from app.models.results import CheckResult, VerificationReport
from app.services.errors import BoundsError, CopulaVIError, ParameterError
from app.services.factor_scale import FactorScale
from app.services.family_gaussian import (
    GaussCopulaParams,
    GaussianCopulaFamily,
    gc_grad_theta,
    gc_reparam_grad,
    gc_score_grad,
)
from app.services.family_skewnormal import (
    SkewNormalCopulaFamily,
    SkewNormCopulaParams,
    sn_grad_theta,
    sn_vjp,
)
from app.services.optimizer import map_estimate
from app.services.targets import (
    TargetModel,
    logistic_target,
    mixed_logistic_target,
    synthetic_logistic,
    synthetic_mixed_logistic,
)
from app.services.transforms import (
    TransformKind,
    TransformParams,
    tf_derivatives,
    tf_forward,
    tf_inverse,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FDConfig:
    h: float = 1e-5
    rel_tol: float = 1e-5

    def __post_init__(self):
        if not self.h > 0:
            raise ParameterError("finite-difference step h must be positive")


def _safe_eval(f, x) -> float:
    try:
        with np.errstate(all="ignore"):
            return float(f(x))
    except CopulaVIError:
        return float("nan")


def fd_gradient(f: Callable[[np.ndarray], float], x, cfg: Optional[FDConfig] = None) -> np.ndarray:
    """Central differences (f(x + h e_j) - f(x - h e_j)) / 2h.

    Coordinates where f is non-finite (or raises a domain error) come back as
    NaN and are reported in the log.
    """
    cfg = cfg or FDConfig()
    x = np.asarray(x, dtype=float)
    out = np.empty(x.size)
    bad = []
    for j in range(x.size):
        step = np.zeros_like(x)
        step.flat[j] = cfg.h
        fp, fm = _safe_eval(f, x + step), _safe_eval(f, x - step)
        if np.isfinite(fp) and np.isfinite(fm):
            out[j] = (fp - fm) / (2.0 * cfg.h)
        else:
            out[j] = np.nan
            bad.append(j)
    if bad:
        logger.warning(f"fd_gradient: non-finite function values around coordinates {bad}")
    return out.reshape(x.shape)


def fd_elementwise(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-5) -> np.ndarray:
    """Derivative of an element-wise map, all coordinates in one pair of calls."""
    x = np.asarray(x, dtype=float)
    with np.errstate(all="ignore"):
        return (f(x + h) - f(x - h)) / (2.0 * h)


def rel_error(analytic, numeric) -> float:
    """max |a - n| / max(|n|, 1); NaN entries count as a failure."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    if analytic.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1.0)
    if not np.all(np.isfinite(err)):
        return float("inf")
    return float(err.max())


# Quadrature posteriors ----------------------------------------------------------


@dataclass
class QuadPosterior:
    """Normalised grid posterior with its first three moments."""
    axes: list[np.ndarray]
    log_density: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    skew: np.ndarray
    leakage: float

    @property
    def bounds(self) -> list[tuple[float, float]]:
        return [(float(ax[0]), float(ax[-1])) for ax in self.axes]

    @property
    def points(self) -> int:
        return self.axes[0].size


def _integrate(values: np.ndarray, axes: list[np.ndarray]) -> float:
    out = values
    for ax in reversed(axes):
        out = integrate.trapezoid(out, ax, axis=-1)
    return float(out)


def _mesh(axes: list[np.ndarray]) -> list[np.ndarray]:
    return np.meshgrid(*axes, indexing="ij")


def _tabulate(f: Callable[[np.ndarray], float], axes: list[np.ndarray]) -> np.ndarray:
    grids = _mesh(axes)
    flat = np.column_stack([g.ravel() for g in grids])
    with np.errstate(all="ignore"):
        values = np.array([f(row) for row in flat])
    return values.reshape(grids[0].shape)


def _edge_mask(shape: tuple[int, ...]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for axis, n in enumerate(shape):
        band = max(2, n // 50)
        index = [slice(None)] * len(shape)
        index[axis] = slice(0, band)
        mask[tuple(index)] = True
        index[axis] = slice(n - band, n)
        mask[tuple(index)] = True
    return mask


def _curvature_scale(target: TargetModel, center: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Marginal sd of the Laplace approximation at center; ones if it is not concave."""
    dim = center.size
    H = np.empty((dim, dim))
    for j in range(dim):
        step = np.zeros(dim)
        step[j] = h
        H[:, j] = (target.grad_log_g(center + step) - target.grad_log_g(center - step)) / (2 * h)
    H = 0.5 * (H + H.T)
    if not np.all(np.isfinite(H)) or np.any(sc_linalg.eigvalsh(-H) <= 0.0):
        return np.ones(dim)
    return np.sqrt(np.diag(sc_linalg.inv(-H)))


def _grid_moments(logp: np.ndarray, axes: list[np.ndarray]):
    w = np.exp(logp - logp.max())
    Z = _integrate(w, axes)
    p = w / Z
    grids = _mesh(axes)
    dim = len(axes)
    mean = np.array([_integrate(g * p, axes) for g in grids])
    cov = np.empty((dim, dim))
    for i in range(dim):
        for j in range(dim):
            cov[i, j] = _integrate((grids[i] - mean[i]) * (grids[j] - mean[j]) * p, axes)
    skew = np.array([
        _integrate((grids[j] - mean[j]) ** 3 * p, axes) / cov[j, j] ** 1.5 for j in range(dim)
    ])
    leakage = _integrate(np.where(_edge_mask(p.shape), p, 0.0), axes)
    with np.errstate(divide="ignore"):
        log_p = np.log(p)
    return log_p, mean, cov, skew, leakage


def quad_posterior(
    target: TargetModel,
    points: Optional[int] = None,
    bounds: Optional[list[tuple[float, float]]] = None,
    width: float = 8.0,
    max_expansions: int = 8,
    tol: float = 1e-6,
) -> QuadPosterior:
    """Trapezoid-rule posterior of a target with dim <= 2.

    Without explicit bounds the grid is centred on the mode and spans ``width``
    Laplace standard deviations, widened by half until the mass in the edge band
    drops below ``tol``.
    """
    dim = target.dim
    if dim > 2:
        raise ParameterError(f"quadrature needs dim <= 2, target has {dim}")
    points = points or (2001 if dim == 1 else 201)

    if bounds is not None:
        if len(bounds) != dim:
            raise ParameterError(f"need {dim} (lo, hi) pairs, got {len(bounds)}")
        attempts = [bounds]
    else:
        center = map_estimate(target)
        half = width * _curvature_scale(target, center)
        attempts = (
            [(c - w, c + w) for c, w in zip(center, half * 1.5**i)]
            for i in range(max_expansions + 1)
        )

    leakage = float("nan")
    for box in attempts:
        axes = [np.linspace(lo, hi, points) for lo, hi in box]
        logp = _tabulate(target.log_g, axes)
        if not np.all(np.isfinite(logp)):
            raise BoundsError("log g is not finite on the quadrature grid")
        log_density, mean, cov, skew, leakage = _grid_moments(logp, axes)
        if leakage <= tol:
            logger.debug(f"quadrature box {box} leaks {leakage:.2e}")
            return QuadPosterior(axes, log_density, mean, cov, skew, leakage)
    raise BoundsError(f"grid edge holds {leakage:.2e} of the mass (> {tol:.0e}); widen the bounds")


def quad_normalization(log_pdf: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                       points: int = 4001) -> float:
    """Trapezoid integral of exp(log_pdf) over [lo, hi] for a vectorised 1-D log density."""
    grid = np.linspace(lo, hi, points)
    with np.errstate(all="ignore"):
        values = np.exp(np.asarray(log_pdf(grid), dtype=float))
    return float(integrate.trapezoid(np.nan_to_num(values), grid))


def quad_elbo(family, lam: np.ndarray, target: TargetModel,
              bounds: list[tuple[float, float]], points: int = 401) -> float:
    """L(lambda) = int q (log g - log q) on a grid, dim <= 2."""
    if target.dim > 2:
        raise ParameterError("quad_elbo needs dim <= 2")
    axes = [np.linspace(lo, hi, points) for lo, hi in bounds]
    grids = _mesh(axes)
    flat = np.column_stack([g.ravel() for g in grids])
    with np.errstate(all="ignore"):
        log_q = np.asarray(family.log_density(flat, lam), dtype=float)
        log_g = np.array([target.log_g(row) for row in flat])
        q = np.exp(log_q)
        integrand = np.where(q > 0.0, q * (log_g - log_q), 0.0)
    return _integrate(integrand.reshape(grids[0].shape), axes)


# Monte Carlo checks ---------------------------------------------------------------


@dataclass
class MomentCheck:
    """z-scores of sample psi moments against the exact ones."""
    n_draws: int
    mean_z: np.ndarray
    cov_z: np.ndarray
    sample_mean: np.ndarray
    sample_cov: np.ndarray

    @property
    def max_abs_z(self) -> float:
        return float(max(np.abs(self.mean_z).max(), np.abs(self.cov_z).max()))

    def passed(self, threshold: float = 4.0) -> bool:
        return self.max_abs_z < threshold


def moment_check(family, lam: np.ndarray, n_draws: int, rng: np.random.Generator,
                 chunk: int = 100_000) -> MomentCheck:
    """Sample mean and covariance of psi against family.psi_moments, as z-scores.

    Draws are centred at the exact mean so the covariance estimate and its
    standard error come from the same accumulated sums.
    """
    if n_draws < 10_000:
        raise ParameterError("moment_check needs at least 10^4 draws")
    params = family.params(lam)
    mean, cov = family.psi_moments(params)
    m = mean.size
    s1 = np.zeros(m)
    s2 = np.zeros(m)
    p1 = np.zeros((m, m))
    p2 = np.zeros((m, m))
    done = 0
    while done < n_draws:
        n = min(chunk, n_draws - done)
        eps = rng.standard_normal((n, family.eps_dim))
        y = family.sample(eps, params).psi - mean
        prod = y[:, :, None] * y[:, None, :]
        s1 += y.sum(axis=0)
        s2 += (y * y).sum(axis=0)
        p1 += prod.sum(axis=0)
        p2 += (prod * prod).sum(axis=0)
        done += n

    ybar = s1 / n_draws
    var_y = s2 / n_draws - ybar**2
    mean_z = ybar / np.sqrt(var_y / n_draws)
    cbar = p1 / n_draws
    var_prod = p2 / n_draws - cbar**2
    cov_z = (cbar - cov) / np.sqrt(var_prod / n_draws)
    logger.info(f"moment_check: {n_draws} draws, max |z| = {max(np.abs(mean_z).max(), np.abs(cov_z).max()):.2f}")
    return MomentCheck(n_draws, mean_z, cov_z, mean + ybar, cbar - np.outer(ybar, ybar))


@dataclass
class ImportanceMoments:
    mean: np.ndarray
    sd: np.ndarray
    skew: np.ndarray
    ess: float
    n_draws: int
    log_weights: np.ndarray = field(repr=False)


def importance_moments(family, lam: np.ndarray, target: TargetModel, n_draws: int,
                       rng: np.random.Generator) -> ImportanceMoments:
    """Self-normalised importance sampling from q_lambda, with effective sample size."""
    params = family.params(lam)
    eps = rng.standard_normal((n_draws, family.eps_dim))
    draw = family.sample(eps, params)
    with np.errstate(all="ignore"):
        log_q = np.asarray(family.log_density_draw(draw, params), dtype=float)
        log_g = np.array([target.log_g(row) for row in draw.theta])
    log_w = log_g - log_q
    log_w = np.where(np.isfinite(log_w), log_w, -np.inf)
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    theta = draw.theta
    mean = w @ theta
    centred = theta - mean
    var = w @ centred**2
    sd = np.sqrt(var)
    skew = (w @ centred**3) / sd**3
    ess = float(1.0 / np.sum(w * w))
    logger.info(f"importance_moments: ESS {ess:.0f} of {n_draws}")
    return ImportanceMoments(mean, sd, skew, ess, n_draws, log_w)


# Random instances -----------------------------------------------------------------


def random_transform(kind: TransformKind, m: int, rng: np.random.Generator) -> TransformParams:
    if kind is TransformKind.YEO_JOHNSON:
        return TransformParams.yeo_johnson(rng.uniform(0.3, 1.7, size=m))
    if kind is TransformKind.INVERSE_GH:
        return TransformParams.inverse_gh(rng.normal(0.0, 0.4, size=m), rng.uniform(0.02, 0.4, size=m))
    return TransformParams.identity(m)


def random_lambda(family, rng: np.random.Generator) -> np.ndarray:
    """A well-conditioned lambda for derivative checks."""
    layout = family.layout
    m, k = layout.m, layout.k
    mu = rng.normal(0.0, 0.5, size=m)
    scale = FactorScale(np.tril(rng.normal(0.0, 0.4, size=(m, k))), rng.uniform(0.5, 1.2, size=m))
    tparams = random_transform(layout.kind, m, rng)
    if layout.skew:
        alpha = rng.normal(0.0, 1.0, size=m)
        return SkewNormCopulaParams(mu, scale, alpha, tparams, layout).pack()
    return GaussCopulaParams(mu, scale, tparams, layout).pack()


def _random_config(rng: np.random.Generator, i: int):
    m = int(rng.integers(1, 7))
    k = int(rng.integers(0, min(3, m) + 1))
    kind = list(TransformKind)[i % 3]
    return m, k, kind


# Check registry -------------------------------------------------------------------

CheckFn = Callable[[np.random.Generator, int, FDConfig], float]


@dataclass
class RegisteredCheck:
    name: str
    fn: CheckFn
    description: str


CHECKS: dict[str, RegisteredCheck] = {}


def register_check(name: str, description: str = ""):
    """Register an FD check returning the worst relative error over its instances."""
    def decorator(fn: CheckFn) -> CheckFn:
        CHECKS[name] = RegisteredCheck(name, fn, description or (fn.__doc__ or "").strip())
        return fn
    return decorator


def _bundle_errors(kind: TransformKind, rng: np.random.Generator, cfg: FDConfig) -> float:
    m = int(rng.integers(1, 11))
    tp = random_transform(kind, m, rng)
    psi = rng.normal(0.0, 1.5, size=m)
    b = tf_derivatives(psi, tp)
    theta = b.theta
    h = cfg.h

    def bundle_at_theta(t):
        return tf_derivatives(tf_forward(t, tp), tp)

    errs = [
        rel_error(b.dtheta_dpsi, fd_elementwise(lambda x: tf_inverse(x, tp), psi, h)),
        rel_error(b.tprime, fd_elementwise(lambda x: tf_forward(x, tp), theta, h)),
        rel_error(b.d2theta_dpsi2, fd_elementwise(lambda x: tf_derivatives(x, tp).dtheta_dpsi, psi, h)),
        rel_error(b.d2psi_dtheta2, fd_elementwise(lambda x: bundle_at_theta(x).tprime, theta, h)),
        rel_error(b.dlog_tprime_dtheta, fd_elementwise(lambda x: bundle_at_theta(x).log_tprime, theta, h)),
    ]
    constrained = tp.constrained()
    for j in range(kind.n_params):
        def with_param(c, j=j):
            values = constrained.copy()
            values[j] = c
            if kind is TransformKind.YEO_JOHNSON:
                return TransformParams.yeo_johnson(values[0])
            return TransformParams.inverse_gh(values[0], values[1])

        errs.append(rel_error(b.dtheta_dparam[j],
                              fd_elementwise(lambda c: tf_inverse(psi, with_param(c)), constrained[j], h)))
        errs.append(rel_error(b.dpsi_dparam[j],
                              fd_elementwise(lambda c: tf_forward(theta, with_param(c)), constrained[j], h)))
        errs.append(rel_error(
            b.dtprime_dparam[j],
            fd_elementwise(lambda c: tf_derivatives(tf_forward(theta, with_param(c)), with_param(c)).tprime,
                           constrained[j], h),
        ))
    return max(errs)


@register_check("transforms.yeo_johnson", "Yeo-Johnson derivative bundle vs central differences")
def _check_yj(rng, instances, cfg):
    return max(_bundle_errors(TransformKind.YEO_JOHNSON, rng, cfg) for _ in range(instances))


@register_check("transforms.inverse_gh", "inverse G&H derivative bundle vs central differences")
def _check_gh(rng, instances, cfg):
    return max(_bundle_errors(TransformKind.INVERSE_GH, rng, cfg) for _ in range(instances))


def _family_instances(family_cls, rng, instances):
    for i in range(instances):
        m, k, kind = _random_config(rng, i)
        family = family_cls(m, k, kind)
        lam = random_lambda(family, rng)
        eps = rng.standard_normal(family.eps_dim)
        yield family, lam, eps


@register_check("gaussian.grad_theta", "gc_grad_theta vs differences of gc_log_density in theta")
def _check_gc_grad_theta(rng, instances, cfg):
    worst = 0.0
    for family, lam, eps in _family_instances(GaussianCopulaFamily, rng, instances):
        p = family.params(lam)
        theta = family.draw(eps, lam)
        numeric = fd_gradient(lambda t: family.log_density(t, lam), theta, cfg)
        worst = max(worst, rel_error(gc_grad_theta(theta, p), numeric))
    return worst


@register_check("gaussian.reparam_grad", "gc_reparam_grad vs differences of w . h(eps, lambda)")
def _check_gc_reparam(rng, instances, cfg):
    worst = 0.0
    for family, lam, eps in _family_instances(GaussianCopulaFamily, rng, instances):
        w = rng.normal(size=family.dim)
        numeric = fd_gradient(lambda x: w @ family.draw(eps, x), lam, cfg)
        worst = max(worst, rel_error(gc_reparam_grad(eps, family.params(lam), w), numeric))
    return worst


@register_check("gaussian.score_grad", "gc_score_grad vs differences of log q in lambda at fixed theta")
def _check_gc_score(rng, instances, cfg):
    worst = 0.0
    for family, lam, eps in _family_instances(GaussianCopulaFamily, rng, instances):
        theta = family.draw(eps, lam)
        numeric = fd_gradient(lambda x: family.log_density(theta, x), lam, cfg)
        worst = max(worst, rel_error(gc_score_grad(theta, family.params(lam)), numeric))
    return worst


@register_check("skewnormal.grad_theta", "sn_grad_theta vs differences of sn_log_density in theta")
def _check_sn_grad_theta(rng, instances, cfg):
    worst = 0.0
    for family, lam, eps in _family_instances(SkewNormalCopulaFamily, rng, instances):
        p = family.params(lam)
        theta = family.draw(eps, lam)
        numeric = fd_gradient(lambda t: family.log_density(t, lam), theta, cfg)
        worst = max(worst, rel_error(sn_grad_theta(theta, p), numeric))
    return worst


@register_check("skewnormal.vjp", "sn_vjp (mu, B, d, alpha, gamma blocks) vs differences of w . h(eps, lambda)")
def _check_sn_vjp(rng, instances, cfg):
    worst = 0.0
    for family, lam, eps in _family_instances(SkewNormalCopulaFamily, rng, instances):
        w = rng.normal(size=family.dim)
        numeric = fd_gradient(lambda x: w @ family.draw(eps, x), lam, cfg)
        worst = max(worst, rel_error(sn_vjp(eps, family.params(lam), w), numeric))
    return worst


@register_check("targets.logistic", "logistic grad_log_g vs differences of log_g")
def _check_logistic(rng, instances, cfg):
    worst = 0.0
    for i in range(instances):
        target = logistic_target(synthetic_logistic(20, 5, seed=int(rng.integers(2**31))))
        beta = rng.normal(0.0, 0.5, size=target.dim)
        worst = max(worst, rel_error(target.grad_log_g(beta), fd_gradient(target.log_g, beta, cfg)))
    return worst


@register_check("targets.mixed_logistic", "mixed-model grad_log_g vs differences of log_g")
def _check_mixed(rng, instances, cfg):
    worst = 0.0
    for i in range(instances):
        data = synthetic_mixed_logistic(3, 3, 2, seed=int(rng.integers(2**31)))
        target = mixed_logistic_target(data, n_subjects=3)
        theta = rng.normal(0.0, 0.5, size=target.dim)
        worst = max(worst, rel_error(target.grad_log_g(theta), fd_gradient(target.log_g, theta, cfg)))
    return worst


def run_all_checks(
    instances: int = 100,
    seed: int = 0,
    names: Optional[list[str]] = None,
    cfg: Optional[FDConfig] = None,
) -> VerificationReport:
    """Run the registered checks (all, or those named) on fresh random instances."""
    cfg = cfg or FDConfig()
    selected = names or list(CHECKS)
    unknown = [n for n in selected if n not in CHECKS]
    if unknown:
        raise ParameterError(f"unknown checks: {unknown}; known: {sorted(CHECKS)}")

    results = []
    for name in selected:
        check = CHECKS[name]
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        err = float(check.fn(rng, instances, cfg))
        passed = err < cfg.rel_tol
        results.append(CheckResult(name=name, max_rel_err=err, tolerance=cfg.rel_tol,
                                   passed=passed, instances=instances, details=check.description))
        if passed:
            logger.info(f"check {name}: max rel err {err:.2e}")
        else:
            logger.warning(f"check {name} FAILED: max rel err {err:.2e} >= {cfg.rel_tol:.0e}")
    return VerificationReport(checks=results)
