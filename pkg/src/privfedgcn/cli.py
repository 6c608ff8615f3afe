"""Command-line entry point.

Commands:
    run <config>        train every grid cell and write artifacts
    gen-data <config>   write synthetic raw recordings in the MEx layout
    calibrate           print the noise multiplier for a privacy target
    testbed <config>    run the quadratic convergence testbed

Exit status is 0 on success, 1 for configuration errors, 2 for runtime errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import metrics
from .config import parse_config, sweep_label, parse_lines
from .errors import ConfigError, PrivFedError
from .privacy import calibrate_sigma
from .runner import SUMMARY_HEADER, _write_rows, generate_dataset, run_experiment, run_testbed

log = logging.getLogger("privfedgcn")


def _cells(path: str):
    """Grid cells with their output directories."""
    configs = parse_config(path)
    _, sweeps = parse_lines(Path(path).read_text(encoding="utf-8").splitlines())
    keys = list(sweeps)
    base = Path(configs[0]["output"])
    return base, [(c, base / sweep_label(c, keys) if keys else base) for c in configs]


def cmd_run(args) -> int:
    base, cells = _cells(args.config)
    rows, cache = [], {}
    for cfg, out in cells:
        log.info("running %s", out)
        rows.append(run_experiment(cfg, out, cache))
    if len(cells) > 1:
        _write_rows(base / "summary.csv", SUMMARY_HEADER, rows)
    for r in rows:
        print(",".join(r))
    return 0


def cmd_gen_data(args) -> int:
    _, cells = _cells(args.config)
    for cfg, out in cells:
        files = generate_dataset(cfg, out)
        print(f"{out}: {len(files)} recordings")
    return 0


def cmd_calibrate(args) -> int:
    sigma = calibrate_sigma(args.epsilon, args.delta, args.q, args.steps)
    print(metrics.fmt(sigma))
    return 0


def cmd_testbed(args) -> int:
    base, cells = _cells(args.config)
    rows = []
    for cfg, out in cells:
        traj = run_testbed(cfg, out)
        rows.append([
            metrics.fmt(cfg["testbed.sigma"]), cfg["testbed.m"], metrics.fmt(traj.plateau()), metrics.fmt(traj.floor)
        ])
    _write_rows(base / "testbed_summary.csv", ["sigma", "m", "plateau", "floor_theoretical"], rows)
    for r in rows:
        print(",".join(map(str, r)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privfedgcn", description="Private federated multimodal GCN experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_text in (
        ("run", cmd_run, "run an experiment config"),
        ("gen-data", cmd_gen_data, "write a synthetic dataset in the MEx layout"),
        ("testbed", cmd_testbed, "run the quadratic convergence testbed"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config")
        p.set_defaults(func=fn)
    p = sub.add_parser("calibrate", help="noise multiplier for a privacy target")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--q", type=float, default=0.01)
    p.add_argument("--steps", type=int, required=True)
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (PrivFedError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
