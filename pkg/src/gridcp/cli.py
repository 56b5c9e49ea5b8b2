"""Command-line driver for a screening study.

Exit codes: 0 ok, 2 config or validation error, 3 provenance mismatch,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings as warnings_mod
from pathlib import Path

from . import __version__
from .errors import (CaseSyntaxError, CaseValidationError, ConfigError, Diverged, DimensionMismatch,
                     DuplicateRecord, EmptyStratum, ExhaustedSampling, FingerprintMismatch, IndexMismatch,
                     IntegrityError, MissingBias, SingularSystem)
from .grid_model import parse_case
from .powerflow import solve_ac
from .screening import format_table
from .study import (StudyConfig, calibration_summary, run_calibrate, run_generate, run_predict, run_screen,
                    run_sweep)

EXIT_OK, EXIT_CONFIG, EXIT_PROVENANCE, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("gridcp")

_EXIT_FOR = (
    ((FingerprintMismatch, IntegrityError), EXIT_PROVENANCE),
    ((Diverged, SingularSystem, ExhaustedSampling, ArithmeticError), EXIT_NUMERIC),
    ((ConfigError, CaseSyntaxError, CaseValidationError, EmptyStratum, MissingBias, DimensionMismatch,
      IndexMismatch, DuplicateRecord, ValueError, KeyError, OSError), EXIT_CONFIG),
)


def _study_args(p: argparse.ArgumentParser, alpha=False):
    p.add_argument("--config", required=True, help="study config (YAML or JSON)")
    p.add_argument("--out", help="study directory (overrides output_dir in the config)")
    p.add_argument("--seed", type=int, help="study seed (overrides the config)")
    if alpha:
        p.add_argument("--alpha", type=float, help="miscoverage level (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridcp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    case = sub.add_parser("case", help="case file utilities")
    case_sub = case.add_subparsers(dest="case_command", required=True)
    val = case_sub.add_parser("validate", help="parse and validate a case file")
    val.add_argument("path")
    val.add_argument("--format", choices=["native-json", "matpower"], help="default: from file extension")
    val.add_argument("--solve", action="store_true", help="also solve the base-case AC power flow")

    _study_args(sub.add_parser("generate", help="sample scenarios and label them with AC power flow"))
    _study_args(sub.add_parser("predict", help="point predictions for every labelled scenario"))
    _study_args(sub.add_parser("calibrate", help="build the calibration table"), alpha=True)
    _study_args(sub.add_parser("screen", help="screening report, coverage tables and sweeps"), alpha=True)
    _study_args(sub.add_parser("sweep", help="alpha and threshold sweeps only"), alpha=True)
    _study_args(sub.add_parser("run", help="generate, predict, calibrate and screen in one go"), alpha=True)
    return parser


def _config(args) -> tuple[StudyConfig, Path]:
    cfg = StudyConfig.load(args.config)
    cfg = cfg.with_overrides(seed=args.seed, alpha=getattr(args, "alpha", None))
    out = Path(args.out) if args.out else Path(cfg.base_dir) / cfg.output_dir
    return cfg, out


def _cmd_case_validate(args) -> int:
    fmt = {"native-json": "NativeJson", "matpower": "MatpowerSubset"}.get(args.format)
    if fmt is None:
        fmt = "MatpowerSubset" if args.path.endswith(".m") else "NativeJson"
    with warnings_mod.catch_warnings():
        warnings_mod.simplefilter("ignore")
        case, warnings = parse_case(Path(args.path).read_text(), fmt, return_warnings=True)
    for w in warnings:
        log.warning(w)
    print(f"{args.path}: {len(case.buses)} buses, {len(case.branches)} branches, "
          f"{len(case.generators)} generators, base {case.base_mva:g} MVA")
    print(f"fingerprint {case.fingerprint()}")
    if args.solve:
        sol = solve_ac(case)
        print(f"AC power flow converged in {sol.iterations} iterations, max mismatch {sol.max_mismatch:.3e} p.u.")
    return EXIT_OK


def _print_calibration(table):
    s = calibration_summary(table)
    print(f"calibration strata: {s['n_strata']} (sizes min {s['min_size']}, median {s['median_size']:g}, "
          f"max {s['max_size']})")
    for b, k in s["empty_strata"]:
        log.warning("empty stratum: branch %d, k=%d (bound is +inf)", b, k)
    q = s["mean_scp_q"]
    print(f"mean SCP q_hat at alpha={s['alpha']:g}: " + ("n/a" if q is None else f"{q:.6f}")
          + f" ({s['n_infinite_q']} strata with infinite q_hat)")


def _print_screen(res):
    print(format_table(res.reports), end="")
    print(json.dumps(res.summary["coverage"], sort_keys=True))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if args.command == "case":
            return _cmd_case_validate(args)
        cfg, out = _config(args)
        if args.command in ("generate", "run"):
            m = run_generate(cfg, out)
            print(f"wrote {m['rows']['scenarios.jsonl']} scenarios ({m['rows']['discards.csv']} discarded) to {out}")
        if args.command in ("predict", "run"):
            run_predict(cfg, out)
            print(f"wrote predictions to {out}")
        if args.command in ("calibrate", "run"):
            _, table = run_calibrate(cfg, out)
            _print_calibration(table)
        if args.command in ("screen", "run"):
            _, res = run_screen(cfg, out)
            _print_screen(res)
        if args.command == "sweep":
            run_sweep(cfg, out)
            print(f"wrote sweeps to {out}")
        return EXIT_OK
    except Exception as exc:  # map to exit codes; anything unexpected propagates
        for types, code in _EXIT_FOR:
            if isinstance(exc, types):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
