"""Command-line entry point.

    paramsens <verb> [--spec FILE] [--out DIR] [--seed N] [--threads N] [--format csv|json]

Verbs ``verify-gaussian-1d``, ``verify-gaussian-2d``, ``validate-beta`` and
``validate-proxy`` run with their defaults when no spec is given;
``sensitivity``, ``fit`` and ``bootstrap`` need one.  Exit status is 0 on
success, 1 for configuration or input errors and 2 for numerical failures,
in which case ``diagnostics.json`` is written to the output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .density import get_density
from .energy import SampleSet, gauss_legendre
from .errors import ConfigError, NumericalError, ParamSensError
from .experiments import RUNNERS, ExperimentSpec, default_spec
from .inference import FitConfig, bootstrap_fit, fit
from .sampling import RngSeed, make_sampler
from .sensitivity import SensitivityConfig, compute_sensitivity

VERBS = tuple(RUNNERS) + ("sensitivity", "fit", "bootstrap")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


def build_parser():
    p = argparse.ArgumentParser(prog="paramsens", description=__doc__.split("\n\n")[0])
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--spec", help="experiment spec (JSON)")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--seed", type=int, help="override the spec's master seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--format", choices=("csv", "json"), help="output format (default: the spec's)")
    return p


def _load_spec(args):
    if args.spec:
        spec = ExperimentSpec.load(args.spec)
        if spec.experiment != args.verb:
            raise ConfigError(f"spec is for {spec.experiment!r}, not {args.verb!r}")
    elif args.verb in RUNNERS:
        spec = default_spec(args.verb)
    else:
        raise ConfigError(f"{args.verb} needs --spec")
    if args.seed is not None:
        spec.seeds = [args.seed] + list(spec.seeds[1:])
        spec.validate()
    return spec


def _sens_config(spec, threads):
    return SensitivityConfig(epsilon=spec.options.get("epsilon", 1e-5), threads=threads)


def _observations(spec, f, grid):
    o = spec.options
    if "observations" in o:
        return SampleSet.from_csv(o["observations"]).points
    if "truth" not in o:
        raise ConfigError("fit specs need options.observations (CSV path) or options.truth and options.M_o")
    sampler = make_sampler(f, grid, o.get("safety", 1.05))
    return sampler(o["truth"], int(o.get("M_o", 10000)), RngSeed(spec.seed, (0,)))


def _fit_config(spec, grid, threads):
    o = spec.options
    quad = None
    if spec.algorithms[0] == "continuous":
        quad = gauss_legendre([ax["bounds"] for ax in spec.grid], int(o.get("quad_points", 16)))
    if "param_box" not in o:
        raise ConfigError("fit specs need options.param_box")
    return FitConfig(spec.algorithms[0], grid, o["param_box"], optimizer=o.get("optimizer", "adam"),
                     learning_rate=o.get("learning_rate", 0.01), epochs=int(o.get("epochs", 3000)),
                     M_x=int(o.get("M_x", 10000)), restarts=int(o.get("restarts", 1)), seed=spec.seed,
                     init=tuple(spec.params) if o.get("init_from_params", True) else None,
                     safety=o.get("safety", 1.05), fd_delta=o.get("fd_delta", 1e-3), quad=quad,
                     sensitivity=_sens_config(spec, threads))


def run(args):
    spec = _load_spec(args)
    fmt = args.format or spec.output.get("format", "csv")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{args.verb}.{fmt}")
    if args.verb in RUNNERS:
        table = RUNNERS[args.verb](spec, threads=args.threads)
        table.to_csv(path) if fmt == "csv" else table.to_json(path)
        return path
    f = get_density(spec.density)
    grid = spec.build_grid()
    if args.verb == "sensitivity":
        batch = compute_sensitivity(spec.algorithms[0], f, grid, spec.params, spec.evaluation_points(grid),
                                    _sens_config(spec, args.threads))
        batch.to_csv(path) if fmt == "csv" else batch.to_json(path)
        return path
    O = _observations(spec, f, grid)
    cfg = _fit_config(spec, grid, args.threads)
    if args.verb == "fit":
        result = fit(f, O, cfg)
        result.to_json(os.path.join(args.out, "fit.json"))
        if fmt == "csv":
            np.savetxt(path, np.atleast_2d([result.final_loss, *result.theta_opt]), delimiter=",",
                       header="final_loss," + ",".join(f"theta{i + 1}" for i in range(len(result.theta_opt))),
                       fmt="%.17g")
        return path
    boot = bootstrap_fit(f, O, cfg, int(spec.options.get("n_bootstrap", 20)), spec.options.get("restarts"))
    with open(os.path.join(args.out, "bootstrap.json"), "w") as fh:
        json.dump(boot.to_dict(), fh, indent=1)
    if fmt == "csv":
        P = boot.theta_hats.shape[1]
        head = ["bootstrap", "final_loss", *[f"theta{i + 1}" for i in range(P)], "wall_time", "density_evals"]
        np.savetxt(path, np.array(boot.summary_rows(), dtype=float), delimiter=",", header=",".join(head),
                   fmt="%.17g")
    return path


def _diagnostics(out, exc):
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "diagnostics.json")
    info = {"error": type(exc).__name__, "message": str(exc),
            "failures": [[int(i) if isinstance(i, (int, np.integer)) else str(i), str(m)]
                         for i, m in getattr(exc, "failures", [])]}
    with open(path, "w") as fh:
        json.dump(info, fh, indent=1)
    return path


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        path = run(args)
    except NumericalError as exc:
        diag = _diagnostics(args.out, exc)
        print(f"numerical failure: {exc} (details in {diag})", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ParamSensError, OSError, KeyError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
