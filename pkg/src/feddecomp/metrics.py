"""Per-round measurements, experiment reports, and their CSV/JSON forms."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CapacityError, ContractError, DimensionError
from .models import ModelParams, ModelSpec, forward, set_phase


def accuracy_from_logits(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise CapacityError("accuracy on an empty shard")
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def accuracy(spec: ModelSpec, params: ModelParams, features, labels, chunk: int = 1024) -> float:
    if len(labels) == 0:
        raise CapacityError("accuracy on an empty shard")
    set_phase(params, "frozen")
    logits = np.concatenate([forward(spec, params, features[i:i + chunk]).data
                             for i in range(0, len(labels), chunk)])
    return accuracy_from_logits(logits, labels)


def model_difference(client_sigmas: Sequence[np.ndarray], sigma_bar: np.ndarray) -> float:
    """Mean L2 distance between each client's flattened shared weights and the aggregate."""
    if not client_sigmas:
        raise ContractError("model_difference needs at least one client")
    for s in client_sigmas:
        if s.shape != sigma_bar.shape:
            raise DimensionError(f"sigma shape {s.shape} does not match aggregate {sigma_bar.shape}")
    return float(np.mean([np.linalg.norm(s - sigma_bar) for s in client_sigmas]))


@dataclass
class Snapshot:
    sigma_bar: np.ndarray
    taus: List[np.ndarray]


def delta_norms(history: Sequence[Snapshot]) -> Tuple[float, float]:
    """(||sigma_bar_last - sigma_bar_first||, mean_i ||tau_i_last - tau_i_first||)."""
    if not history:
        raise ContractError("delta_norms needs at least one snapshot")
    first, last = history[0], history[-1]
    if len(first.taus) != len(last.taus):
        raise DimensionError(f"snapshots hold {len(first.taus)} and {len(last.taus)} clients")
    if not first.taus:
        return float(np.linalg.norm(last.sigma_bar - first.sigma_bar)), 0.0
    d_sigma = float(np.linalg.norm(last.sigma_bar - first.sigma_bar))
    d_tau = float(np.mean([np.linalg.norm(b - a) for a, b in zip(first.taus, last.taus)]))
    return d_sigma, d_tau


@dataclass
class RoundMetrics:
    round: int
    accuracies: List[float]
    mean_accuracy: float
    model_difference: float
    delta_sigma: float
    delta_tau: float
    uploaded_bytes: int
    trained_params: Dict[str, int] = field(default_factory=dict)
    participants: List[int] = field(default_factory=list)
    secs: Optional[float] = None


@dataclass
class ExperimentReport:
    config: Dict[str, object]
    digest: str
    num_clients: int
    rounds: List[RoundMetrics] = field(default_factory=list)

    @property
    def best_mean_accuracy(self) -> Optional[float]:
        if not self.rounds:
            return None
        return max(r.mean_accuracy for r in self.rounds)

    @property
    def best_round(self) -> Optional[int]:
        if not self.rounds:
            return None
        best = self.best_mean_accuracy
        return next(r.round for r in self.rounds if r.mean_accuracy == best)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "digest": self.digest,
            "num_clients": self.num_clients,
            "best_mean_accuracy": self.best_mean_accuracy,
            "best_round": self.best_round,
            "rounds": [asdict(r) for r in self.rounds],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentReport":
        rounds = [RoundMetrics(**r) for r in doc["rounds"]]
        return cls(doc["config"], doc["digest"], doc["num_clients"], rounds)


def csv_header(num_clients: int) -> List[str]:
    return (["round", "mean_acc"] + [f"acc_client_{i}" for i in range(num_clients)]
            + ["model_diff", "delta_sigma", "delta_tau", "uploaded_bytes", "secs"])


def _g(x: float) -> str:
    return format(x, ".17g")


def report_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(report.num_clients))
    for r in report.rounds:
        w.writerow([r.round, _g(r.mean_accuracy), *map(_g, r.accuracies), _g(r.model_difference),
                    _g(r.delta_sigma), _g(r.delta_tau), r.uploaded_bytes,
                    "" if r.secs is None else _g(r.secs)])
    return buf.getvalue()


def report_json(report: ExperimentReport) -> str:
    return json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n"


def _write(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def emit_csv(report: ExperimentReport, path) -> None:
    _write(path, report_csv(report))


def emit_json(report: ExperimentReport, path) -> None:
    _write(path, report_json(report))
