"""
Experiment harness: spec -> (target, family) -> SGA run -> result bundle -> files.

Grids fit several families to one target concurrently; each entry owns its
own optimizer and random stream, so results do not depend on scheduling.
"""

from __future__ import annotations

import asyncio
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from app.models.experiments import (
    BaseFamily,
    ExperimentSpec,
    FamilyLabel,
    FamilySpec,
    TargetKind,
    TargetSpec,
)
from app.models.results import ComparisonRow, ComparisonTable, FitResponse, MomentRow, RunSummary
from app.services.checkpoints import lambda_checksum, read_checkpoint, write_checkpoint
from app.services.datasets import load_dataset
from app.services.errors import CopulaVIError, SpecError
from app.services.family_gaussian import GaussianCopulaFamily, gc_param_count
from app.services.family_skewnormal import SkewNormalCopulaFamily
from app.services.optimizer import RunTrace, SGAOptimizer, map_estimate
from app.services.targets import (
    GaussianToyTarget,
    TargetModel,
    gaussian_toy_target,
    logistic_target,
    mixed_logistic_target,
    synthetic_logistic,
    synthetic_mixed_logistic,
)
from app.services.verification import quad_posterior

logger = logging.getLogger(__name__)

MOMENT_CHUNK = 20_000
# Oracle quadrature is only attempted when the target is this small.
ORACLE_MAX_DIM = 2


# Builders -------------------------------------------------------------------


def build_target(spec: TargetSpec) -> TargetModel:
    kind = spec.kind
    if kind is TargetKind.GAUSSIAN_TOY:
        return gaussian_toy_target(spec.toy_mean, spec.toy_cov, spec.toy_log_evidence)
    if kind is TargetKind.SYNTHETIC_LOGISTIC:
        return logistic_target(synthetic_logistic(spec.n, spec.p, spec.data_seed), spec.prior_var)
    if kind is TargetKind.SYNTHETIC_MIXED:
        data = synthetic_mixed_logistic(spec.n_subjects, spec.obs_per_subject, spec.p, spec.data_seed)
        return mixed_logistic_target(data, spec.n_subjects, spec.prior_var, spec.zeta_prior_var)

    data = load_dataset(
        spec.dataset_path,
        add_intercept=spec.add_intercept,
        standardize=spec.standardize,
        subject_column=spec.subject_column if kind is TargetKind.MIXED_LOGISTIC else None,
    )
    if kind is TargetKind.LOGISTIC:
        return logistic_target(data, spec.prior_var)
    n_subjects = int(data.groups.max()) + 1
    return mixed_logistic_target(data, n_subjects, spec.prior_var, spec.zeta_prior_var)


def build_family(spec: FamilySpec, m: int):
    k = spec.effective_k
    if k > m:
        logger.warning(f"k={k} exceeds dimension m={m}; using k={m}")
        k = m
    if spec.base is BaseFamily.SKEWNORMAL:
        return SkewNormalCopulaFamily(m, k, spec.transform)
    return GaussianCopulaFamily(m, k, spec.transform)


def label_param_counts(m: int, k: int) -> dict[str, int]:
    """|lambda| of every labelled configuration for dimension m and k factors."""
    counts = {}
    for label in FamilyLabel:
        fam = FamilySpec.from_label(label, k)
        counts[label.value] = gc_param_count(m, fam.effective_k, fam.transform,
                                             skew=fam.base is BaseFamily.SKEWNORMAL)
    return counts


def label_specs(base: ExperimentSpec, labels: list[str], k: Optional[int] = None) -> list[ExperimentSpec]:
    """One spec per label, sharing the base spec's target and optimizer settings."""
    k = base.family.k if k is None else k
    return [
        base.model_copy(update={"name": FamilyLabel(label).value, "family": FamilySpec.from_label(label, k)})
        for label in labels
    ]


# Result bundle ----------------------------------------------------------------


@dataclass
class MarginalCurve:
    coord: int
    grid: np.ndarray
    density: np.ndarray


@dataclass
class ResultBundle:
    """Everything one fit produces, before it is written to disk."""
    spec: ExperimentSpec
    spec_hash: str
    family: object
    trace: RunTrace
    moments: list[MomentRow]
    marginals: list[MarginalCurve]
    target_info: dict
    log_evidence: Optional[float] = None
    artifacts: dict[str, str] = field(default_factory=dict)

    @property
    def label(self) -> Optional[str]:
        label = self.spec.family.label
        return label.value if label else None

    @property
    def n_params(self) -> int:
        return self.family.n_params

    @property
    def ceiling_gap(self) -> Optional[float]:
        if self.log_evidence is None:
            return None
        return self.log_evidence - self.trace.window_average_elbo

    def summary(self) -> RunSummary:
        return RunSummary(
            spec_hash=self.spec_hash,
            name=self.spec.name,
            label=self.label,
            n_params=self.n_params,
            n_steps=self.trace.n_steps,
            seed=self.spec.optimizer.seed,
            window_average_elbo=self.trace.window_average_elbo,
            flagged_steps=self.trace.flagged_steps,
            healthy=not self.trace.unhealthy,
            minutes_per_1000_steps=self.trace.minutes_per_1000_steps,
            lambda_checksum=lambda_checksum(self.trace.final_lambda),
            log_evidence=self.log_evidence,
            ceiling_gap=self.ceiling_gap,
            spec=self.spec.model_dump(mode="json"),
            target=self.target_info,
            artifacts=dict(self.artifacts),
        )

    def fit_response(self, tail: int = 100) -> FitResponse:
        """Summary, moment table and the last ``tail`` per-step ELBO estimates."""
        elbo = self.trace.elbo[-tail:] if tail > 0 else self.trace.elbo[:0]
        return FitResponse(summary=self.summary(), moments=self.moments,
                           elbo_tail=[float(v) for v in elbo])

    def comparison_row(self) -> ComparisonRow:
        return ComparisonRow(
            label=self.label,
            name=self.spec.name,
            n_params=self.n_params,
            window_average_elbo=self.trace.window_average_elbo,
            minutes_per_1000_steps=self.trace.minutes_per_1000_steps,
            healthy=not self.trace.unhealthy,
            spec_hash=self.spec_hash,
        )


def _oracle_moments(target: TargetModel):
    """(mean, sd, skew) from the closed form or quadrature, or None."""
    if isinstance(target, GaussianToyTarget):
        return target.mu0, np.sqrt(np.diag(target.Sigma0)), np.zeros(target.dim)
    if target.dim <= ORACLE_MAX_DIM:
        try:
            quad = quad_posterior(target)
        except CopulaVIError as e:
            logger.warning(f"Quadrature reference moments unavailable: {e}")
            return None
        return quad.mean, np.sqrt(np.diag(quad.cov)), quad.skew
    return None


def draw_moments(family, lam: np.ndarray, n_draws: int, rng: np.random.Generator,
                 keep: list[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Mean, sd and Pearson skew of theta from n_draws family draws, chunked.

    Also returns the draws of the ``keep`` coordinates (used to size marginal grids).
    """
    params = family.params(lam)
    shift = None
    sums = np.zeros((3, family.dim))
    kept = []
    done = 0
    while done < n_draws:
        n = min(MOMENT_CHUNK, n_draws - done)
        theta = family.sample(rng.standard_normal((n, family.eps_dim)), params).theta
        if shift is None:
            shift = theta.mean(axis=0)
        x = theta - shift
        sums += np.stack([x.sum(axis=0), (x**2).sum(axis=0), (x**3).sum(axis=0)])
        kept.append(theta[:, keep])
        done += n
    r1, r2, r3 = sums / n_draws
    var = r2 - r1**2
    third = r3 - 3.0 * r1 * r2 + 2.0 * r1**3
    sd = np.sqrt(var)
    return shift + r1, sd, third / sd**3, np.concatenate(kept)


def _marginal_curve(family, params, coord: int, draws: np.ndarray, points: int) -> MarginalCurve:
    lo, hi = np.quantile(draws, [0.0005, 0.9995])
    pad = 0.25 * (hi - lo) if hi > lo else 1.0
    grid = np.linspace(lo - pad, hi + pad, points)
    return MarginalCurve(coord, grid, family.marginal_density(grid, coord, params))


def run_experiment(spec: ExperimentSpec) -> ResultBundle:
    """Fit one family to one target and summarise the fitted approximation."""
    spec_hash = spec.spec_hash()
    target = build_target(spec.target)
    family = build_family(spec.family, target.dim)
    bad = [c for c in spec.marginal_coords if c >= target.dim]
    if bad:
        raise SpecError(f"marginal_coords {bad} outside dimension {target.dim}")

    label = spec.family.label
    logger.info(
        f"Experiment {spec.name} [{spec_hash[:12]}]: {label.value if label else 'custom'} "
        f"on {target.name} (m={target.dim}, |lambda|={family.n_params})"
    )
    initial_mu = map_estimate(target) if spec.optimizer.init_map else None
    trace = SGAOptimizer(spec.optimizer).run(family, target, initial_mu=initial_mu)

    rng = np.random.default_rng([spec.optimizer.seed, 1])
    mean, sd, skew, kept = draw_moments(family, trace.final_lambda, spec.moment_draws, rng,
                                        spec.marginal_coords)
    oracle = _oracle_moments(target) if spec.oracle else None
    moments = []
    for j in range(target.dim):
        row = MomentRow(coord=j, mean=mean[j], sd=sd[j], skew=skew[j])
        if oracle is not None:
            row.oracle_mean, row.oracle_sd, row.oracle_skew = (float(o[j]) for o in oracle)
        moments.append(row)

    params = family.params(trace.final_lambda)
    marginals = [
        _marginal_curve(family, params, c, kept[:, i], spec.marginal_grid_points)
        for i, c in enumerate(spec.marginal_coords)
    ]
    bundle = ResultBundle(
        spec=spec,
        spec_hash=spec_hash,
        family=family,
        trace=trace,
        moments=moments,
        marginals=marginals,
        target_info=target.describe(),
        log_evidence=target.log_evidence,
    )
    if trace.unhealthy:
        logger.warning(f"Experiment {spec.name} finished unhealthy ({trace.flagged_steps} flagged steps)")
    if spec.output_dir:
        export_results(bundle, spec.output_dir)
    return bundle


# Grids ------------------------------------------------------------------------


@dataclass
class GridResult:
    table: ComparisonTable
    bundles: list[ResultBundle]


def _check_shared_target(specs: list[ExperimentSpec]) -> str:
    if not specs:
        raise SpecError("grid needs at least one spec")
    keys = {s.target_key() for s in specs}
    if len(keys) != 1:
        raise SpecError("grid specs must share one target")
    return keys.pop()


async def run_grid_async(specs: list[ExperimentSpec], workers: int = 2) -> GridResult:
    """Run grid entries concurrently, at most ``workers`` at a time, rows in spec order."""
    target_key = _check_shared_target(specs)
    semaphore = asyncio.Semaphore(max(1, workers))

    async def one(spec: ExperimentSpec) -> ResultBundle:
        async with semaphore:
            return await asyncio.to_thread(run_experiment, spec)

    logger.info(f"Grid of {len(specs)} fits, {workers} at a time")
    bundles = list(await asyncio.gather(*(one(s) for s in specs)))
    table = ComparisonTable(target_key=target_key, rows=[b.comparison_row() for b in bundles])
    for row in table.ranked():
        logger.info(f"  {row.label or row.name}: ELBO {row.window_average_elbo:.3f}, |lambda|={row.n_params}")
    return GridResult(table=table, bundles=bundles)


def run_grid(specs: list[ExperimentSpec], workers: int = 2) -> GridResult:
    return asyncio.run(run_grid_async(specs, workers))


# Export -----------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, spec_hash: str, header: list[str], rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# spec_hash={spec_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def run_directory(bundle: ResultBundle, root: str | Path) -> Path:
    return Path(root) / f"{bundle.spec.name}-{bundle.spec_hash[:12]}"


def export_results(bundle: ResultBundle, root: str | Path) -> dict[str, str]:
    """Write trace, timing, moments, marginals, checkpoints and the JSON summary."""
    out = run_directory(bundle, root)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise SpecError(f"cannot create output directory {out}: {e}") from e
    h = bundle.spec_hash
    trace = bundle.trace
    files: dict[str, Path] = {}

    files["trace"] = _write_csv(
        out / "trace.csv", h, ["step", "elbo", "flagged"],
        ((i + 1, _fmt(e), int(f)) for i, (e, f) in enumerate(zip(trace.elbo, trace.flagged))),
    )
    files["elbo_wallclock"] = _write_csv(
        out / "elbo_wallclock.csv", h, ["step", "wallclock_ms", "elbo"],
        ((i + 1, f"{t * 1000.0:.3f}", _fmt(e)) for i, (t, e) in enumerate(zip(trace.wallclock, trace.elbo))),
    )
    files["moments"] = _write_csv(
        out / "moments.csv", h,
        ["coord", "mean", "sd", "skew", "oracle_mean", "oracle_sd", "oracle_skew"],
        ([r.coord, _fmt(r.mean), _fmt(r.sd), _fmt(r.skew),
          *("" if v is None else _fmt(v) for v in (r.oracle_mean, r.oracle_sd, r.oracle_skew))]
         for r in bundle.moments),
    )
    for curve in bundle.marginals:
        files[f"marginal_{curve.coord}"] = _write_csv(
            out / f"marginal_{curve.coord}.csv", h, ["theta", "density"],
            ((_fmt(x), _fmt(y)) for x, y in zip(curve.grid, curve.density)),
        )

    layout = bundle.family.layout
    files["lambda"] = write_checkpoint(out / "lambda.bin", layout, trace.final_lambda)
    for step, lam in trace.checkpoints:
        write_checkpoint(out / "checkpoints" / f"lambda_{step:07d}.bin", layout, lam)

    bundle.artifacts = {name: str(path) for name, path in files.items()}
    summary_path = out / "summary.json"
    bundle.artifacts["summary"] = str(summary_path)
    summary_path.write_text(bundle.summary().model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Wrote results for {bundle.spec.name} to {out}")
    return dict(bundle.artifacts)


def export_grid(result: GridResult, root: str | Path) -> Path:
    """Per-entry bundles plus comparison.csv / comparison.json at the grid root."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for bundle in result.bundles:
        if not bundle.artifacts:
            export_results(bundle, root)
    rows = result.table.rows
    with (root / "comparison.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "name", "n_params", "window_average_elbo",
                         "minutes_per_1000_steps", "healthy", "spec_hash"])
        for r in rows:
            writer.writerow([r.label or "", r.name, r.n_params, _fmt(r.window_average_elbo),
                             f"{r.minutes_per_1000_steps:.4f}", int(r.healthy), r.spec_hash])
    (root / "comparison.json").write_text(result.table.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Wrote grid comparison to {root}")
    return root / "comparison.csv"


def export_from_checkpoint(spec: ExperimentSpec, checkpoint_path: str | Path, root: str | Path,
                           seed: Optional[int] = None) -> dict[str, str]:
    """Moment table and marginal curves from a saved lambda, without refitting."""
    checkpoint = read_checkpoint(checkpoint_path)
    target = build_target(spec.target)
    family = build_family(spec.family, target.dim)
    if checkpoint.layout != family.layout:
        raise SpecError(f"checkpoint layout {checkpoint.layout} does not match spec layout {family.layout}")
    lam = checkpoint.lam
    rng = np.random.default_rng([spec.optimizer.seed if seed is None else seed, 1])
    mean, sd, skew, kept = draw_moments(family, lam, spec.moment_draws, rng, spec.marginal_coords)
    params = family.params(lam)

    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    h = spec.spec_hash()
    files = {
        "moments": _write_csv(
            out / "moments.csv", h, ["coord", "mean", "sd", "skew"],
            ([j, _fmt(mean[j]), _fmt(sd[j]), _fmt(skew[j])] for j in range(target.dim)),
        )
    }
    for i, coord in enumerate(spec.marginal_coords):
        curve = _marginal_curve(family, params, coord, kept[:, i], spec.marginal_grid_points)
        files[f"marginal_{coord}"] = _write_csv(
            out / f"marginal_{coord}.csv", h, ["theta", "density"],
            ((_fmt(x), _fmt(y)) for x, y in zip(curve.grid, curve.density)),
        )
    logger.info(f"Exported {checkpoint_path} to {out}")
    return {name: str(path) for name, path in files.items()}
