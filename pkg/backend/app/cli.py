"""
copula-vi command line.

Usage:
    copula-vi fit --label A5 --target synthetic_logistic --n 200 --p 2 --steps 5000
    copula-vi fit --config runs/toy.env --seed 7
    copula-vi grid --labels A3,A4,A5,A6 --dataset ionosphere.csv --target logistic --k 3
    copula-vi verify --instances 100 --json report.json
    copula-vi export --summary runs/A5-.../summary.json --checkpoint runs/A5-.../lambda.bin
    copula-vi serve --port 8000

Config files are flat KEY=VALUE documents; each key names a flag of the verb
(``steps=20000``, ``label=A3``) and flags given on the command line win.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from dotenv import dotenv_values
from pydantic import ValidationError

from app.config import get_settings
from app.models.experiments import (
    ExperimentSpec,
    FamilySpec,
    OptimizerConfig,
    TargetSpec,
)
from app.models.results import RunSummary
from app.services.errors import CopulaVIError
from app.services.experiments import (
    export_from_checkpoint,
    export_grid,
    label_specs,
    run_experiment,
    run_grid,
)
from app.services.verification import CHECKS, run_all_checks

logger = logging.getLogger("app.cli")


def _bool(value: str) -> bool:
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got '{value}'")


def _floats(value: str) -> list[float]:
    return [float(x) for x in value.split(",") if x.strip()]


def _matrix(value: str) -> list[list[float]]:
    """'1,0.8;0.8,1' -> [[1, 0.8], [0.8, 1]]."""
    return [_floats(row) for row in value.split(";") if row.strip()]


def _ints(value: str) -> list[int]:
    return [int(x) for x in value.split(",") if x.strip()]


def _flag(parser: argparse.ArgumentParser, name: str, help: str):
    parser.add_argument(name, type=_bool, nargs="?", const=True, default=None, help=help)


def _add_spec_options(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="KEY=VALUE file with defaults for these flags")
    parser.add_argument("--name", help="Run name (prefix of the output directory)")
    parser.add_argument("--output", help="Output root directory")

    target = parser.add_argument_group("target")
    target.add_argument("--target", help="logistic | mixed_logistic | gaussian_toy | "
                                         "synthetic_logistic | synthetic_mixed")
    target.add_argument("--dataset", help="Design-matrix CSV (last column is the 0/1 response)")
    _flag(target, "--add-intercept", "Prepend a column of ones")
    _flag(target, "--standardize", "z-score each feature column")
    target.add_argument("--subject-column", help="Column holding the subject index (mixed model)")
    target.add_argument("--prior-var", type=float, help="Prior variance of the fixed effects")
    target.add_argument("--zeta-prior-var", type=float, help="Prior variance of zeta (mixed model)")
    target.add_argument("--toy-mean", type=_floats, help="Gaussian toy mean, e.g. 0,0")
    target.add_argument("--toy-cov", type=_matrix, help="Gaussian toy covariance, e.g. '1,0.8;0.8,1'")
    target.add_argument("--log-evidence", type=float, help="Gaussian toy log-evidence C")
    target.add_argument("--n", type=int, help="Synthetic logistic sample size")
    target.add_argument("--p", type=int, help="Synthetic number of covariates (intercept included)")
    target.add_argument("--n-subjects", type=int, help="Synthetic mixed model subjects")
    target.add_argument("--obs-per-subject", type=int, help="Synthetic mixed model observations per subject")
    target.add_argument("--data-seed", type=int, help="Seed of the synthetic design")

    family = parser.add_argument_group("family")
    family.add_argument("--label", help="A1..A8 shorthand for base/transform/mean-field")
    family.add_argument("--base", help="gaussian | skewnormal")
    family.add_argument("--transform", help="identity | yj | igh")
    family.add_argument("--k", type=int, help="Number of factors")
    _flag(family, "--mean-field", "Diagonal scale (k = 0)")

    opt = parser.add_argument_group("optimizer")
    opt.add_argument("--steps", type=int, help="SGA steps")
    opt.add_argument("--samples", type=int, help="Draws per step")
    opt.add_argument("--seed", type=int, help="Random seed")
    opt.add_argument("--rho", type=float, help="ADADELTA decay")
    opt.add_argument("--eps", type=float, help="ADADELTA epsilon")
    opt.add_argument("--estimator", help="reparam | score")
    opt.add_argument("--entropy", help="pathwise | total")
    opt.add_argument("--window", type=int, help="Steps in the window-average ELBO")
    opt.add_argument("--checkpoint-every", type=int, help="Steps between lambda checkpoints (0: none)")
    opt.add_argument("--sample-workers", type=int, help="Threads evaluating draws within a step")
    _flag(opt, "--init-map", "Start mu at the posterior mode")

    res = parser.add_argument_group("results")
    res.add_argument("--coords", type=_ints, help="Coordinates with marginal curves, e.g. 0,1")
    res.add_argument("--moment-draws", type=int, help="Family draws for the moment table")
    res.add_argument("--grid-points", type=int, help="Points per marginal curve")
    _flag(res, "--oracle", "Compute reference moments when the target allows it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="copula-vi", description="Copula variational inference")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="Fit one family to one target")
    _add_spec_options(fit)

    grid = sub.add_parser("grid", help="Fit several labelled families to one target")
    _add_spec_options(grid)
    grid.add_argument("--labels", help="Comma-separated labels, e.g. A3,A4,A5,A6,A7,A8")
    grid.add_argument("--workers", type=int, help="Concurrent fits")

    verify = sub.add_parser("verify", help="Run the registered derivative checks")
    verify.add_argument("--instances", type=int, default=100, help="Random instances per check")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--checks", help=f"Comma-separated subset of: {', '.join(sorted(CHECKS))}")
    verify.add_argument("--json", dest="json_path", help="Write the report here")

    export = sub.add_parser("export", help="Moments and marginal curves from a saved lambda")
    export.add_argument("--summary", required=True, help="summary.json of the fit")
    export.add_argument("--checkpoint", required=True, help="lambda checkpoint (.bin)")
    export.add_argument("--output", required=True, help="Directory for the CSV files")

    serve = sub.add_parser("serve", help="Start the HTTP API")
    serve.add_argument("--host")
    serve.add_argument("--port", type=int)
    return parser


def config_argv(path: str) -> list[str]:
    """KEY=VALUE file -> ['--key=value', ...], to be parsed before the real argv."""
    if not Path(path).exists():
        raise CopulaVIError(f"config file not found: {path}")
    argv = []
    for key, value in dotenv_values(path).items():
        flag = "--" + key.strip().lower().replace("_", "-")
        # --key=value keeps values such as "-1,0" from reading as options
        argv.append(flag if value is None or value == "" else f"{flag}={value}")
    return argv


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        # config values first so that explicit flags override them
        verb_index = argv.index(args.command)
        merged = argv[: verb_index + 1] + config_argv(args.config) + argv[verb_index + 1:]
        args = parser.parse_args(merged)
    return args


def _pick(values: dict, mapping: dict[str, str]) -> dict:
    return {field: values[flag] for flag, field in mapping.items() if values.get(flag) is not None}


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    """Settings defaults, overridden by the config file, overridden by flags."""
    settings = get_settings()
    v = vars(args)

    target_fields = {"prior_var": settings.logistic_prior_var, "zeta_prior_var": settings.mixed_prior_var}
    target_fields |= _pick(v, {
        "target": "kind", "dataset": "dataset_path", "add_intercept": "add_intercept",
        "standardize": "standardize", "subject_column": "subject_column",
        "prior_var": "prior_var", "zeta_prior_var": "zeta_prior_var",
        "toy_mean": "toy_mean", "toy_cov": "toy_cov", "log_evidence": "toy_log_evidence",
        "n": "n", "p": "p", "n_subjects": "n_subjects", "obs_per_subject": "obs_per_subject",
        "data_seed": "data_seed",
    })
    target = TargetSpec(**target_fields)

    if v.get("label"):
        family = FamilySpec.from_label(v["label"], v["k"] if v.get("k") is not None else 3)
    else:
        family = FamilySpec(**_pick(v, {"base": "base", "transform": "transform", "k": "k",
                                        "mean_field": "mean_field"}))

    optimizer = OptimizerConfig(**(settings.optimizer_defaults() | _pick(v, {
        "steps": "n_steps", "samples": "samples_per_step", "seed": "seed", "rho": "adadelta_rho",
        "eps": "adadelta_eps", "estimator": "estimator", "entropy": "entropy_gradient",
        "window": "elbo_window", "checkpoint_every": "checkpoint_every",
        "sample_workers": "sample_workers", "init_map": "init_map",
    })))

    extra = _pick(v, {"name": "name", "coords": "marginal_coords", "moment_draws": "moment_draws",
                      "grid_points": "marginal_grid_points", "oracle": "oracle"})
    extra.setdefault("moment_draws", settings.moment_draws)
    extra.setdefault("marginal_grid_points", settings.marginal_grid_points)
    return ExperimentSpec(target=target, family=family, optimizer=optimizer,
                          output_dir=v.get("output") or settings.output_dir, **extra)


def _print_summary(summary: RunSummary):
    gap = "" if summary.ceiling_gap is None else f"  gap to evidence {summary.ceiling_gap:.4f}"
    health = "" if summary.healthy else "  UNHEALTHY"
    print(f"{summary.label or summary.name:<6} |lambda|={summary.n_params:<6} "
          f"ELBO {summary.window_average_elbo:.4f}  {summary.minutes_per_1000_steps:.3f} min/1000 steps"
          f"{gap}{health}")


def cmd_fit(args) -> int:
    spec = spec_from_args(args)
    bundle = run_experiment(spec)
    _print_summary(bundle.summary())
    if bundle.artifacts:
        print(f"results: {Path(bundle.artifacts['summary']).parent}")
    return 0


def cmd_grid(args) -> int:
    settings = get_settings()
    base = spec_from_args(args)
    labels = [x.strip() for x in (args.labels or "A3,A4,A5,A6,A7,A8").split(",") if x.strip()]
    root = base.output_dir
    specs = [s.model_copy(update={"output_dir": root}) for s in label_specs(base, labels)]
    result = run_grid(specs, workers=args.workers or settings.grid_workers)
    for bundle in result.bundles:
        _print_summary(bundle.summary())
    print(f"comparison: {export_grid(result, root)}")
    return 0


def cmd_verify(args) -> int:
    names = [x.strip() for x in args.checks.split(",")] if args.checks else None
    report = run_all_checks(instances=args.instances, seed=args.seed, names=names)
    for check in report.checks:
        status = "ok  " if check.passed else "FAIL"
        print(f"{status} {check.name:<28} max rel err {check.max_rel_err:.2e} (tol {check.tolerance:.0e})")
    if args.json_path:
        Path(args.json_path).write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return 0 if report.passed else 1


def cmd_export(args) -> int:
    summary = RunSummary.model_validate_json(Path(args.summary).read_text(encoding="utf-8"))
    spec = ExperimentSpec.model_validate(summary.spec)
    files = export_from_checkpoint(spec, args.checkpoint, args.output)
    for name, path in files.items():
        print(f"{name}: {path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    settings = get_settings()
    uvicorn.run("app.main:app", host=args.host or settings.api_host, port=args.port or settings.api_port)
    return 0


COMMANDS = {"fit": cmd_fit, "grid": cmd_grid, "verify": cmd_verify, "export": cmd_export, "serve": cmd_serve}


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    settings = get_settings()
    try:
        args = parse_args(argv)
    except CopulaVIError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, settings.log_level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (CopulaVIError, ValidationError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
