"""Command-line front door: ``run``, ``suite`` and ``inspect-partition``.

Exit codes: 0 success, 2 configuration problem, 3 data problem,
4 numeric failure, 5 file-system (io) failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import ExperimentConfig, desk_config, parse_config, preset_path
from .data import partition_stats
from .engine import WORKERS_ENV, build_dataset, build_federation, build_plan, run_experiment
from .errors import FedDecompError
from .metrics import emit_csv, emit_json
from .suites import SUITE_WORKERS_ENV, SUITES, run_suite, suite_csv

EXIT_CODES = {"config": 2, "data": 3, "numeric": 4, "io": 5}


def _load(path: str) -> ExperimentConfig:
    """A file path, or ``preset:<name>`` for a shipped preset."""
    if path.startswith("preset:"):
        return parse_config(preset_path(path[len("preset:"):]))
    return parse_config(path)


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    return out


def cmd_run(args) -> int:
    config = _load(args.config)
    if args.out:
        config = config.with_(output_dir=args.out)
    dataset = build_dataset(config)
    plan = build_plan(config, dataset)
    out = _outdir(config.output_dir)
    _write(out / "partition.json", plan.to_json() + "\n")
    fed = build_federation(config, dataset, plan)
    report = run_experiment(config, workers=args.workers, fed=fed)
    emit_csv(report, out / "report.csv")
    emit_json(report, out / "report.json")
    best = report.best_mean_accuracy
    if best is not None:
        print(f"best round {report.best_round} of {len(report.rounds)}; reports in {out}")
    print(repr(best) if best is not None else "nan")
    return 0


def cmd_suite(args) -> int:
    base = _load(args.config) if args.config else desk_config()
    rows = run_suite(args.name, base, args.seed, workers=args.workers)
    out = _outdir(args.out)
    path = out / f"{args.name}.csv"
    _write(path, suite_csv(rows))
    print(f"{len(rows)} rows written to {path}")
    return 0


def cmd_inspect(args) -> int:
    config = _load(args.config)
    dataset = build_dataset(config)
    plan = build_plan(config, dataset)
    stats = partition_stats(plan, dataset.labels, dataset.num_classes)
    print(f"clients {plan.num_clients}  classes {dataset.num_classes}  alpha {config.alpha:g}")
    for i, row in enumerate(stats.train_hist):
        shares = " ".join(f"{v:.3f}" for v in row)
        print(f"client {i:3d}  train {len(plan.train[i]):5d}  test {len(plan.test[i]):5d}  [{shares}]")
    print(f"heterogeneity summary (mean largest class share): {stats.summary:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="feddecomp",
        description="Federated learning simulator with shared full-rank plus personal low-rank weights.",
        epilog=(f"Environment: {WORKERS_ENV}=n trains clients of one round on n threads; "
                f"{SUITE_WORKERS_ENV}=n runs suite cells on n processes. "
                "Config arguments accept a path or preset:<name> (e.g. preset:paper_default, preset:desk)."),
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment and write report.csv, report.json, partition.json")
    r.add_argument("config", help="config file or preset:<name>")
    r.add_argument("--out", help="output directory (overrides output_dir in the config)")
    r.add_argument("--workers", type=int, default=None, help=f"client threads per round (default: ${WORKERS_ENV} or 1)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("suite", help="run a canned ablation grid over three seeds and write <name>.csv")
    s.add_argument("name", choices=sorted(SUITES))
    s.add_argument("--out", required=True, help="directory for the merged CSV")
    s.add_argument("--seed", type=int, default=0, help="root seed; cells use seed, seed+1, seed+2 (default 0)")
    s.add_argument("--config", help="base config (default: the desk-scale synthetic benchmark)")
    s.add_argument("--workers", type=int, default=None,
                   help=f"parallel cell processes (default: ${SUITE_WORKERS_ENV} or 1)")
    s.set_defaults(func=cmd_suite)

    i = sub.add_parser("inspect-partition", help="print per-client class shares and the heterogeneity summary")
    i.add_argument("config", help="config file or preset:<name>")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FedDecompError, OSError) as exc:
        category = exc.category if isinstance(exc, FedDecompError) else "io"
        print(f"error [{category}]: {exc}", file=sys.stderr)
        return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
