"""Command line: ``lsdk solve | validate | adjoint-check``.

Exit status is 0 on success, 1 for configuration errors and 2 for numerical
failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import doping, radon
from .core import validate_adjoint
from .harness import ConfigError, load_config, resolve_output_dir, run_experiment, with_output
from .solver import AssumptionViolation, DegenerateStep, DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

NUMERIC_ERRORS = (ArithmeticError, AssumptionViolation, DegenerateStep, DivergenceError,
                  doping.DomainError, np.linalg.LinAlgError)


def _run_one(cfg):
    return run_experiment(cfg)


def cmd_solve(args) -> int:
    try:
        configs = [load_config(p) for p in args.config]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    # several configs get one subdirectory each, named after the config file
    jobs = []
    for path, cfg in zip(args.config, configs):
        out = resolve_output_dir(cfg, args.output)
        if len(configs) > 1:
            out = out / Path(path).stem
        jobs.append(with_output(cfg, out))
    if len(set(c.output_dir for c in jobs)) != len(jobs):
        print("config error: two configs would share an output directory", file=sys.stderr)
        return EXIT_CONFIG

    status = EXIT_OK
    with ProcessPoolExecutor(max_workers=args.jobs) if args.jobs > 1 else _Serial() as pool:
        futures = [pool.submit(_run_one, cfg) for cfg in jobs]
        for cfg, fut in zip(jobs, futures):
            try:
                paths = fut.result()
            except NUMERIC_ERRORS as exc:
                print(f"numerical failure ({cfg.output_dir}): {type(exc).__name__}: {exc}",
                      file=sys.stderr)
                status = EXIT_NUMERIC
                continue
            except (ValueError, OSError) as exc:
                # bad phantom/grid files and inadmissible parameters found at build time
                print(f"config error ({cfg.output_dir}): {exc}", file=sys.stderr)
                status = max(status, EXIT_CONFIG)
                continue
            print(paths["summary.txt"].read_text(), end="")
            print(paths["runtime.txt"].read_text(), end="")
            print(f"artifacts in {cfg.output_dir}")
    return status


class _Serial:
    """Stand-in for an executor that runs jobs in the calling process."""

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def submit(self, fn, *args):
        return _Done(fn, args)


class _Done:
    def __init__(self, fn, args):
        try:
            self._value, self._exc = fn(*args), None
        except Exception as exc:  # re-raised by result()
            self._value, self._exc = None, exc

    def result(self):
        if self._exc is not None:
            raise self._exc
        return self._value


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(cfg.to_text(), end="")
    return EXIT_OK


def cmd_adjoint_check(args) -> int:
    rng = np.random.default_rng(0)
    if args.problem == "radon":
        g = args.grid or 60
        det = radon.default_detectors(g)
        T = radon.CircularMeanTransform(det, (g, g))
        probes, tol = 100, 1e-10
        worst = 0.0
        x = np.zeros(T.block(0).domain.size)
        for j in range(probes):
            i = int(rng.integers(det.N))
            rep = validate_adjoint(T.block(i), x, trials=1, seed=j, tol=tol)
            worst = max(worst, rep.max_relative_defect)
    else:
        g = args.grid or 17
        grid = doping.DeviceGrid(g)
        model = doping.DopingModel(grid, doping.make_voltage_profiles(grid))
        x = 1.0 + 0.5 * rng.random(g * g)
        probes, tol = 20, 1e-8
        worst = 0.0
        for j in range(probes):
            rep = validate_adjoint(model.block(j % len(model.profiles)), x, trials=1, seed=j, tol=tol)
            worst = max(worst, rep.max_relative_defect)
    ok = worst <= tol
    print(f"{args.problem} {g}x{g}: {probes} probes, max relative defect {worst:.3e} "
          f"(tolerance {tol:.0e}) {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lsdk", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="run experiments and write artifacts")
    s.add_argument("--config", nargs="+", required=True, metavar="PATH")
    s.add_argument("--jobs", type=int, default=1, help="configs to run concurrently")
    s.add_argument("--output", help="output directory (default: config, then $LSDK_OUTPUT_DIR)")
    s.set_defaults(func=cmd_solve)

    v = sub.add_parser("validate", help="parse a config and print it with defaults applied")
    v.add_argument("--config", required=True, metavar="PATH")
    v.set_defaults(func=cmd_validate)

    a = sub.add_parser("adjoint-check", help="check the discrete adjoint identities")
    a.add_argument("--problem", choices=("radon", "doping"), required=True)
    a.add_argument("--grid", type=int, help="grid size (radon 60, doping 17 by default)")
    a.set_defaults(func=cmd_adjoint_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
