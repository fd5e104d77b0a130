"""Command-line front end.

Subcommands ``matrices``, ``run``, ``validate`` and ``oracle``.  Exit codes:
0 ok, 2 config, 3 sampling, 4 solver, 5 validation threshold exceeded.
The output directory may also be set through ``BESTFIT_OUT``; ``--out``
takes precedence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, pipeline, serialize
from .config import dump_config, load_config
from .errors import ClosureError, ConfigError, InvalidArgumentError, SamplingError
from .riccati import scalar_closed_forms

EXIT_OK, EXIT_CONFIG, EXIT_SAMPLING, EXIT_SOLVER, EXIT_VALIDATION = 0, 2, 3, 4, 5


def _exit_code(exc):
    if isinstance(exc, (ConfigError, InvalidArgumentError)):
        return EXIT_CONFIG
    if isinstance(exc, SamplingError):
        return EXIT_SAMPLING
    return EXIT_SOLVER


def _load(args):
    if not args.config:
        raise ConfigError("--config is required for this command")
    out = args.out or os.environ.get("BESTFIT_OUT")
    cfg = load_config(args.config).with_overrides(seed=args.seed, out=out, threads=args.threads)
    return cfg, Path(cfg.run.out)


def _verdict(report):
    word = "PASS" if report.passed else "FAIL"
    return (f"validation {word}: max z-score {report.max_z_score:.3f} vs threshold {report.threshold:g}; "
            f"plateau slope {report.plateau_slope:.4g}")


def cmd_matrices(args):
    cfg, out = _load(args)
    ctx = pipeline.build_context(cfg)
    eqc, mats, s0 = pipeline.compute_matrices(ctx)
    meta = {"N": cfg.sampling.N, "seed": cfg.sampling.seed, "seeds": ctx.seeds, "system": cfg.system.name,
            "observables": list(ctx.sys.names), "weights": cfg.weights}
    out.mkdir(parents=True, exist_ok=True)
    serialize.save_equilibrium_constants(out / "equilibrium_constants", eqc, meta)
    serialize.save_model_matrices(out / "model_matrices", mats, meta)
    dump_config(cfg, out / "config.yaml")
    print(pipeline.matrices_summary(eqc, mats))
    return EXIT_OK


def cmd_run(args):
    cfg, out = _load(args)
    ctx = pipeline.execute(cfg, out)
    dump_config(cfg, out / "config.yaml")
    report = ctx.outputs.get("report")
    if report is not None:
        print(_verdict(report))
        return EXIT_OK if report.passed else EXIT_VALIDATION
    return EXIT_OK


def cmd_validate(args):
    cfg, out = _load(args)
    closure = cfg.validate_.closure or next((r for r in pipeline.CLOSURE_REGIMES if r in cfg.run.regimes), None)
    have = (out / "ensemble.csv").exists() and closure is not None and (out / f"{closure}.csv").exists()
    if have:
        emp = serialize.load_series(out / "ensemble")
        traj = serialize.load_trajectory(out / closure)
        ctx = pipeline.build_context(cfg)
        meta = serialize.read_json(out / f"{closure}.json").get("meta", {})
        weight = meta.get("weights", cfg.weights)
        if weight == "fit":
            raise ConfigError("weights: stored run has no fitted weight")
        report = pipeline.make_report(ctx, traj, emp, weight)
        serialize.save_report(out / "validation.json", report)
    else:
        regimes = list(cfg.run.regimes)
        if "ensemble" not in regimes:
            regimes.append("ensemble")
        if closure is None:
            closure = "linear-stationary"
            regimes.insert(0, closure)
        cfg = cfg.model_copy(update={"run": cfg.run.model_copy(update={"regimes": regimes})})
        report = pipeline.execute(cfg, out).outputs["report"]
    print(_verdict(report))
    return EXIT_OK if report.passed else EXIT_VALIDATION


def cmd_oracle(args):
    if args.t is not None:
        t = np.asarray(args.t, dtype=float)
    else:
        t = np.linspace(0.0, args.T, args.n)
    M, env = scalar_closed_forms(args.C, args.D, t)
    lines = ["t,M,a"] + [f"{ti!r},{Mi!r},{args.a0 * ei!r}" for ti, Mi, ei in zip(t.tolist(), M.tolist(), env.tolist())]
    text = "\n".join(lines) + "\n"
    if args.out:
        path = Path(args.out)
        path = path / "oracle.csv" if path.suffix != ".csv" else path
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override sampling.seed")
    common.add_argument("--out", help="output directory (overrides run.out)")
    common.add_argument("--threads", type=int, help="worker threads for ensemble propagation")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bestfit", description="Best-fit closures for reduced Hamiltonian dynamics.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("matrices", parents=[common], help="estimate closure matrices").set_defaults(func=cmd_matrices)
    sub.add_parser("run", parents=[common], help="integrate the configured regimes").set_defaults(func=cmd_run)
    sub.add_parser("validate", parents=[common], help="compare a closure with the ensemble").set_defaults(
        func=cmd_validate)
    o = sub.add_parser("oracle", parents=[common], help="closed-form scalar solutions")
    o.add_argument("--C", type=float, default=1.0)
    o.add_argument("--D", type=float, default=1.0)
    o.add_argument("--a0", type=float, default=1.0)
    o.add_argument("--t", type=float, nargs="+")
    o.add_argument("--T", type=float, default=10.0)
    o.add_argument("--n", type=int, default=101)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ClosureError as exc:
        code = _exit_code(exc)
        kind = {EXIT_CONFIG: "config", EXIT_SAMPLING: "sampling", EXIT_SOLVER: "solver"}[code]
        where = f" ({args.config})" if args.config else ""
        print(f"{kind} error{where}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
