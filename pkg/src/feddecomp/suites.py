"""Canned ablation grids, each repeated over three consecutive seeds.

A suite is a list of cells (label + config overrides) applied to a base
configuration. Every (cell, seed) pair is an isolated experiment; cells may run
in worker processes (``FEDDECOMP_SUITE_WORKERS``), but the merged CSV is
always written in grid order, so the bytes depend only on the inputs.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig
from .engine import run_experiment
from .errors import ConfigError

SUITE_WORKERS_ENV = "FEDDECOMP_SUITE_WORKERS"
SEEDS_PER_CELL = 3
RANK_LEVELS = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class Cell:
    label: str
    overrides: Tuple[Tuple[str, object], ...]


def _cell(label: str, **overrides) -> Cell:
    return Cell(label, tuple(sorted(overrides.items())))


def _elora(base: ExperimentConfig) -> List[Cell]:
    return [_cell(f"E_lora={e}", mode="feddecomp", lora_epochs=e) for e in range(base.epochs + 1)]


def _rank_grid(base: ExperimentConfig) -> List[Cell]:
    return [_cell(f"R_l={rl:g},R_c={rc:g}", mode="feddecomp", rank_fc=rl, rank_conv=rc)
            for rl in RANK_LEVELS for rc in RANK_LEVELS]


def _alternating(base: ExperimentConfig) -> List[Cell]:
    return [_cell("alternating", mode="feddecomp"), _cell("simultaneous", mode="simultaneous")]


def _reverse(base: ExperimentConfig) -> List[Cell]:
    return [_cell("feddecomp", mode="feddecomp"), _cell("feddecomp-reverse", mode="feddecomp-reverse")]


def _participation(base: ExperimentConfig) -> List[Cell]:
    return [_cell(f"participation={f:g}", mode="feddecomp", participation=f) for f in (1.0, 0.9, 0.7, 0.5)]


def _capacity(base: ExperimentConfig) -> List[Cell]:
    modes = ("local", "local-lowrank", "fedavg", "fedavg-lowrank", "feddecomp")
    return [_cell(m, mode=m) for m in modes]


def _compare(base: ExperimentConfig) -> List[Cell]:
    return [_cell(m, mode=m) for m in ("local", "fedavg", "fedper", "feddecomp")]


SUITES: Dict[str, Callable[[ExperimentConfig], List[Cell]]] = {
    "elora-sweep": _elora,
    "rank-grid": _rank_grid,
    "alternating": _alternating,
    "reverse": _reverse,
    "participation": _participation,
    "capacity": _capacity,
    "compare": _compare,
}

# suites whose rows record the per-seed winner between cells
_WINNER_SUITES = {"alternating", "reverse"}


def suite_cells(name: str, base: ExperimentConfig) -> List[Cell]:
    if name not in SUITES:
        raise ConfigError(f"suite: unknown suite {name!r}, expected one of {', '.join(SUITES)}")
    return SUITES[name](base)


@dataclass
class SuiteRow:
    cell: str
    seed: int
    best_acc: float
    mean: float
    std: float
    won: Optional[bool] = None


def _run_one(config: ExperimentConfig) -> float:
    report = run_experiment(config, workers=1)
    best = report.best_mean_accuracy
    return float("nan") if best is None else best


def _suite_workers(workers: Optional[int]) -> int:
    if workers is None:
        workers = int(os.environ.get(SUITE_WORKERS_ENV, "1") or 1)
    return max(1, workers)


def run_suite(name: str, base: ExperimentConfig, root_seed: int,
              workers: Optional[int] = None) -> List[SuiteRow]:
    cells = suite_cells(name, base)
    seeds = [(root_seed + k) % 2 ** 64 for k in range(SEEDS_PER_CELL)]
    jobs = [base.with_(**dict(c.overrides), seed=s) for c in cells for s in seeds]
    n = _suite_workers(workers)
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(n, len(jobs))) as pool:
            results = list(pool.map(_run_one, jobs))  # map preserves submission order
    else:
        results = [_run_one(j) for j in jobs]

    grid = np.array(results).reshape(len(cells), len(seeds))
    winners = None
    if name in _WINNER_SUITES:
        winners = np.argmax(grid, axis=0)  # ties go to the first cell
    rows = []
    for ci, cell in enumerate(cells):
        mean = float(np.mean(grid[ci]))
        std = float(np.std(grid[ci]))
        for si, seed in enumerate(seeds):
            won = None if winners is None else bool(winners[si] == ci)
            rows.append(SuiteRow(cell.label, seed, float(grid[ci, si]), mean, std, won))
    return rows


SUITE_HEADER = ("cell", "seed", "best_acc", "mean", "std", "won")


def suite_csv(rows: Sequence[SuiteRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUITE_HEADER)
    for r in rows:
        won = "" if r.won is None else int(r.won)
        w.writerow([r.cell, r.seed, f"{r.best_acc:.17g}", f"{r.mean:.17g}", f"{r.std:.17g}", won])
    return buf.getvalue()
