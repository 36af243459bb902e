"""Command-line front end.

Usage::

    anosovfam certify --config run.toml --out results/
    anosovfam splitting --config run.toml
    anosovfam perturb --config run.toml --trials 100 --seed 7
    anosovfam adapted-metric --config run.toml

Exit codes: 0 success or certified, 1 analysis-negative (FAILED,
INCONCLUSIVE, certified fraction below 1), 2 usage or configuration error.

Primary outputs (JSON/CSV) are deterministic for a given config and seed;
wall-clock data goes to ``<name>.meta.json`` sidecars.
"""
import argparse
import datetime
import platform
import sys

import numpy as np

from . import __version__
from . import _kernels
from .adapted_metric import (
    AdaptedMetric,
    _check_epsilon,
    default_epsilon,
    sandwich_check,
    verify_strict,
)
from .certify import CERTIFIED, certify_family, openness_experiment
from .config import OUT_ENV, load_config
from .errors import AnosovError, ConfigError, ParameterError, PreconditionError
from .report import csv_text, fmt9, write_json, write_text
from .splitting import (
    angle_property,
    continuity_modulus,
    dg_invariance_check,
    estimate_splitting,
    fit_constants,
)

EXIT_OK, EXIT_NEGATIVE, EXIT_USAGE = 0, 1, 2


def _write_meta(out, stem, started, argv):
    meta = {
        "started_utc": started.isoformat(),
        "elapsed_s": (datetime.datetime.now(datetime.timezone.utc) - started).total_seconds(),
        "backend": _kernels.BACKEND,
        "argv": list(argv),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "version": __version__,
    }
    write_json(out / f"{stem}.meta.json", meta)


def _say(label, value):
    print(f"{label:<28} {fmt9(value)}")


def cmd_certify(cfg, args):
    kw = {k: cfg.constants[k] for k in ("safety", "epsilon", "tail_tol", "strict_tol")
          if k in cfg.constants}
    cert, bundle = certify_family(cfg.family, cfg.constants.get("alpha"), cfg.resolution, **kw)
    out = cert.to_dict()
    if bundle is not None and args.require_uniform:
        out["uniform_radius"] = float(np.min(bundle.radii))
    write_json(cfg.out_dir / "certificate.json", out)
    print(f"family: {cfg.family.name} (W={cfg.family.window}, {cfg.family.extension})")
    _say("verdict", cert.verdict)
    if cert.stage and not cert.certified:
        print(f"{'stage':<28} {cert.stage}")
        print(f"{'reason':<28} {cert.reason}")
    if bundle is not None:
        _say("lambda_hat", bundle.fit.lambda_hat)
        _say("c_hat", bundle.fit.c_hat)
        _say("alpha", bundle.alpha)
        _say("eta", bundle.eta)
        _say("lambda_prime", bundle.lambda_prime)
        _say("c_prime", bundle.c_prime)
        _say("min radius", float(np.min(bundle.radii)))
        if cert.margins:
            _say("min margin", cert.min_margin)
    elif cert.details.get("lambda_hat") is not None:
        _say("lambda_hat", cert.details["lambda_hat"])
    if args.require_uniform and bundle is not None:
        _say("uniform radius (min_i)", float(np.min(bundle.radii)))
    return EXIT_OK if cert.verdict == CERTIFIED else EXIT_NEGATIVE


def cmd_splitting(cfg, args):
    F, res = cfg.family, cfg.resolution
    split = estimate_splitting(F, res.grid, None, res.n_max, res.tol)
    fit = fit_constants(F, split, res.fit_horizon)
    angles = angle_property(F, split)
    data = {"splitting": split.to_dict(), "fit": fit.to_dict(), "angles": angles.to_dict()}
    if split.converged:
        data["invariance"] = dg_invariance_check(F, split).to_dict()
        try:
            data["continuity_modulus"] = continuity_modulus(split)
        except PreconditionError as e:
            data["continuity_modulus"] = str(e)
    write_json(cfg.out_dir / "splitting.json", data)
    write_text(cfg.out_dir / "splitting.csv", split.to_csv())
    print(f"family: {F.name} (W={F.window}, {F.extension}), grid {res.grid}")
    _say("converged", split.converged)
    if not split.converged:
        _say("non-converged points", split.diagnostics()["nonconverged_points"])
    _say("lambda_hat", fit.lambda_hat)
    _say("c_hat", fit.c_hat)
    _say("mu_hat", angles.mu_hat)
    if "invariance" in data:
        _say("invariance defect", data["invariance"]["max_defect"])
    return EXIT_OK


def cmd_perturb(cfg, args):
    trials = cfg.trials if args.trials is None else args.trials
    seed = cfg.seed if args.seed is None else args.seed
    if trials < 0:
        raise ConfigError("trials must be non-negative", "--trials")
    certs = []
    summary, bundle = openness_experiment(
        cfg.family, trials, seed, res=cfg.resolution, model=cfg.model,
        alpha=cfg.constants.get("alpha"), inflate=cfg.inflate, certificates=certs,
        workers=cfg.workers, uniform=args.require_uniform)
    write_text(cfg.out_dir / "experiment.csv", summary.csv())
    write_json(cfg.out_dir / "experiment_summary.json",
               dict(summary.to_dict(), family=cfg.family.name, seed=seed,
                    family_digest=cfg.family.digest(),
                    resolutions=cfg.resolution.to_dict()))
    print(f"family: {cfg.family.name} (W={cfg.family.window}), trials {trials}, seed {seed}")
    _say("regime", summary.regime)
    _say("certified", f"{summary.certified}/{summary.trials}")
    _say("certified fraction", summary.fraction)
    _say("min margin", summary.min_margin)
    _say("eta", summary.eta)
    _say("c_prime", summary.c_prime)
    _say("min radius", summary.radii_min)
    for err in summary.errors:
        print(f"error: trial {err['trial']}: {err['error']}")
    return EXIT_OK if summary.all_certified else EXIT_NEGATIVE


def cmd_adapted_metric(cfg, args):
    F, res = cfg.family, cfg.resolution
    split = estimate_splitting(F, res.grid, None, res.n_max, res.tol)
    fit = fit_constants(F, split, res.fit_horizon)
    if not fit.hyperbolic:
        print(f"family is not hyperbolic at resolution ({fit.verdict})")
        return EXIT_NEGATIVE
    eps = cfg.constants.get("epsilon", default_epsilon(fit.lambda_hat))
    _check_epsilon(fit.lambda_hat, eps)
    am = AdaptedMetric(F, split, fit.lambda_hat, eps, fit.c_hat,
                       cfg.constants.get("tail_tol", 1e-10))
    strict = verify_strict(F, am)
    sw = sandwich_check(F, am, cfg.constants.get("vectors_per_point", 100), seed=cfg.seed)
    data = {"fit": fit.to_dict(), "metric": am.to_dict(), "strict": strict.to_dict(),
            "sandwich": sw.to_dict()}
    write_json(cfg.out_dir / "adapted_metric.json", data)
    rows = [(i, sw.delta[i], sw.mu[i]) for i in split.components]
    write_text(cfg.out_dir / "delta.csv", csv_text(("component", "delta", "mu"), rows))
    print(f"family: {F.name} (W={F.window}), epsilon {fmt9(eps)}, truncation N={am.N}")
    _say("lambda_hat", fit.lambda_hat)
    _say("c_hat", fit.c_hat)
    _say("stable one-step ratio", strict.stable_ratio)
    _say("unstable one-step ratio", strict.unstable_ratio)
    _say("target rate", am.rate)
    _say("sandwich lower ratio", sw.lower_ratio)
    _say("max Delta_i", max(sw.delta.values()))
    ok = strict.passed and sw.passed
    _say("passed", ok)
    return EXIT_OK if ok else EXIT_NEGATIVE


COMMANDS = {
    "certify": cmd_certify,
    "splitting": cmd_splitting,
    "perturb": cmd_perturb,
    "adapted-metric": cmd_adapted_metric,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="anosovfam",
        description="Certify Anosov families of torus maps and their C1 perturbations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("certify", "build constants for a family and certify it"),
        ("splitting", "estimate the stable/unstable splitting on a grid"),
        ("perturb", "run a seeded openness experiment"),
        ("adapted-metric", "construct and check the adapted metric"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, metavar="PATH", help="TOML run file")
        p.add_argument("--out", metavar="DIR",
                       help=f"output directory (default: [output].dir, ${OUT_ENV}, or .)")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--trials", type=int, help="override the number of trials")
        p.add_argument("--require-uniform", action="store_true",
                       help="report min_i eps_i and use it as a uniform radius")
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    started = datetime.datetime.now(datetime.timezone.utc)
    try:
        cfg = load_config(args.config, args.out)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.model.seed = args.seed
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ParameterError as e:
        print(f"parameter error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except AnosovError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NEGATIVE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    _write_meta(cfg.out_dir, args.command.replace("-", "_"), started, argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
