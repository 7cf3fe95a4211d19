"""Command line entry point: ``kramerslab run <experiment> [config.toml]``.

Exit status: 0 on success, 1 on a numerical failure (solver, quadrature),
2 on a configuration or validation error, 3 when trajectories diverge and 4
when ``--check`` is given and an acceptance check fails.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DivergedError, KramersError, ValidationError
from .experiments import EXPERIMENTS, ExperimentConfig, ExperimentResult, run
from .integrate import fmt
from .model import tomllib

OUTPUT_ENV = "KRAMERSLAB_OUTPUT"
DEFAULT_OUTPUT = "kramerslab-output"

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"kramerslab: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="kramerslab", description="Run a canned overdamped-limit experiment.")
    ap.add_argument("--version", action="version", version=f"kramerslab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", help="run one experiment and write results.csv and manifest.json")
    r.add_argument("experiment", choices=EXPERIMENTS)
    r.add_argument("config", nargs="?", type=Path, help="TOML file overriding the experiment defaults")
    r.add_argument("--lambda", dest="lambdas", type=float, action="append", metavar="LAM",
                   help="scale separation; repeat for a sweep")
    r.add_argument("--n", type=int, help="ensemble size")
    r.add_argument("--t", type=float, help="time horizon")
    r.add_argument("--seed", type=int, help="master seed")
    r.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    r.add_argument("--check", action="store_true", help="exit 4 unless every acceptance check passes")
    r.add_argument("--out", type=Path, help=f"output root (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    return ap


def load_config(args) -> ExperimentConfig:
    over = {}
    if args.config is not None:
        try:
            over = tomllib.loads(args.config.read_text())
        except OSError as exc:
            raise ValidationError(f"cannot read {args.config}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{args.config}: {exc}") from exc
    for key, val in (("lambdas", args.lambdas), ("n", args.n), ("t", args.t), ("seed", args.seed)):
        if val is not None:
            over[key] = val
    return ExperimentConfig.build(args.experiment, over)


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, str):
        return x
    return fmt(x)


def render_csv(header, rows, digest: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config {digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(x) for x in row])
    return buf.getvalue()


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


def write_outputs(cfg: ExperimentConfig, res: ExperimentResult, root: Path, wall: float) -> Path:
    """Write ``results.csv``, ``rate_fit.csv`` (rate experiments) and ``manifest.json``."""
    digest = cfg.digest
    out = root / f"{cfg.experiment}-{digest[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    files = {"results.csv": render_csv(res.header, res.rows, digest)}
    if res.rate_rows is not None:
        files["rate_fit.csv"] = render_csv(res.rate_header, res.rate_rows, digest)
    for name, text in files.items():
        (out / name).write_text(text)
    manifest = {
        "experiment": cfg.experiment,
        "config_hash": digest,
        "config": cfg.values,
        "seed": cfg["seed"],
        "version": __version__,
        "git_revision": git_revision(),
        "wall_time_s": round(wall, 3),
        "files": sorted(files),
        "checks": [{"name": c.name, "value": c.value, "target": c.target, "passed": c.passed}
                   for c in res.checks],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.threads < 1:
            raise ValidationError("--threads must be positive")
        root = args.out or Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT))
        t0 = time.perf_counter()
        res = run(cfg, threads=args.threads)
        out = write_outputs(cfg, res, root, time.perf_counter() - t0)
    except ValueError as exc:
        print(f"kramerslab: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedError as exc:
        print(f"kramerslab: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except KramersError as exc:
        print(f"kramerslab: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for c in res.checks:
        print(c.line())
    print(f"wrote {out}")
    if args.check and not res.passed:
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
