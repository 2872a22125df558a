"""Experiment configuration and its ``key = value`` file format.

One setting per line, ``#`` starts a comment, unknown keys are rejected.
Keys and defaults (defaults follow the full-scale experiment protocol, except the
dataset block, which defaults to the synthetic mixture)::

    mode                 feddecomp   feddecomp | fedavg | local | local-lowrank |
                                     fedavg-lowrank | simultaneous |
                                     feddecomp-reverse | fedper
    N                    40          number of clients
    T                    300         communication rounds
    E                    5           local epochs per round
    E_lora               4           epochs on the low-rank part (0 <= E_lora <= E)
    R_l                  0.4         fully-connected rank ratio, 0 < R_l <= 1
    R_c                  0.8         convolutional rank ratio, 0 < R_c <= 1
    alpha                0.1         Dirichlet concentration, > 0
    lr                   0.1         SGD learning rate, >= 0
    batch_size           100
    participation        1.0         fraction of clients per round, in (0, 1]
    train_per_client     500
    test_per_client      100
    dataset              synthetic   synthetic | idx
    synth_classes        8
    synth_dim            16
    synth_n_per_class    0           0 = N * (train_per_client + test_per_client)
    synth_separation     8.0
    synth_spread         0.3         in (0, 1]; class centres sit at separation * spread
    idx_images                       path, required when dataset = idx
    idx_labels                       path, required when dataset = idx
    arch                 mlp         mlp | cnn
    seed                 0           root seed, unsigned 64-bit
    output_dir           out
    evaluate             broadcast   broadcast | local: score clients after receiving
                                     the new aggregate, or right after local training
    timing               false       record wall-clock seconds per round
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Tuple

from .errors import ConfigError

MODES = ("feddecomp", "fedavg", "local", "local-lowrank", "fedavg-lowrank",
         "simultaneous", "feddecomp-reverse", "fedper")

# file key -> dataclass field
KEYS: Dict[str, str] = {
    "mode": "mode",
    "N": "num_clients",
    "T": "rounds",
    "E": "epochs",
    "E_lora": "lora_epochs",
    "R_l": "rank_fc",
    "R_c": "rank_conv",
    "alpha": "alpha",
    "lr": "lr",
    "batch_size": "batch_size",
    "participation": "participation",
    "train_per_client": "train_per_client",
    "test_per_client": "test_per_client",
    "dataset": "dataset",
    "synth_classes": "synth_classes",
    "synth_dim": "synth_dim",
    "synth_n_per_class": "synth_n_per_class",
    "synth_separation": "synth_separation",
    "synth_spread": "synth_spread",
    "idx_images": "idx_images",
    "idx_labels": "idx_labels",
    "arch": "arch",
    "seed": "seed",
    "output_dir": "output_dir",
    "evaluate": "evaluate",
    "timing": "timing",
}
FIELD_TO_KEY = {v: k for k, v in KEYS.items()}


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "feddecomp"
    num_clients: int = 40
    rounds: int = 300
    epochs: int = 5
    lora_epochs: int = 4
    rank_fc: float = 0.4
    rank_conv: float = 0.8
    alpha: float = 0.1
    lr: float = 0.1
    batch_size: int = 100
    participation: float = 1.0
    train_per_client: int = 500
    test_per_client: int = 100
    dataset: str = "synthetic"
    synth_classes: int = 8
    synth_dim: int = 16
    synth_n_per_class: int = 0
    synth_separation: float = 8.0
    synth_spread: float = 0.3
    idx_images: str = ""
    idx_labels: str = ""
    arch: str = "mlp"
    seed: int = 0
    output_dir: str = "out"
    evaluate: str = "broadcast"
    timing: bool = False

    def __post_init__(self):
        for problem in self._problems():
            raise ConfigError(problem)

    def _problems(self):
        k = FIELD_TO_KEY
        if self.mode not in MODES:
            yield f"{k['mode']}: unknown mode {self.mode!r}, expected one of {', '.join(MODES)}"
        if self.num_clients < 1:
            yield "N: must be >= 1"
        if self.rounds < 0:
            yield "T: must be >= 0"
        if self.epochs < 0:
            yield "E: must be >= 0"
        if not 0 <= self.lora_epochs <= self.epochs:
            yield f"E_lora: must satisfy 0 <= E_lora <= E (E_lora = {self.lora_epochs}, E = {self.epochs})"
        if not 0 < self.rank_fc <= 1:
            yield f"R_l: must lie in (0, 1], got {self.rank_fc}"
        if not 0 < self.rank_conv <= 1:
            yield f"R_c: must lie in (0, 1], got {self.rank_conv}"
        if not self.alpha > 0:
            yield f"alpha: must be > 0, got {self.alpha}"
        if not self.lr >= 0:
            yield f"lr: must be >= 0, got {self.lr}"
        if self.batch_size < 1:
            yield "batch_size: must be >= 1"
        if not 0 < self.participation <= 1:
            yield f"participation: must lie in (0, 1], got {self.participation}"
        if self.train_per_client < 1:
            yield "train_per_client: must be >= 1"
        if self.test_per_client < 1:
            yield "test_per_client: must be >= 1"
        if self.dataset not in ("synthetic", "idx"):
            yield f"dataset: expected synthetic or idx, got {self.dataset!r}"
        if self.synth_classes < 2:
            yield "synth_classes: must be >= 2"
        if self.synth_dim < 2:
            yield "synth_dim: must be >= 2"
        if self.synth_n_per_class < 0:
            yield "synth_n_per_class: must be >= 0"
        if not self.synth_separation >= 0:
            yield "synth_separation: must be >= 0"
        if not 0 < self.synth_spread <= 1:
            yield f"synth_spread: must lie in (0, 1], got {self.synth_spread}"
        if self.arch not in ("mlp", "cnn"):
            yield f"arch: expected mlp or cnn, got {self.arch!r}"
        if self.evaluate not in ("broadcast", "local"):
            yield f"evaluate: expected broadcast or local, got {self.evaluate!r}"
        if not 0 <= self.seed < 2 ** 64:
            yield "seed: must be an unsigned 64-bit integer"

    @property
    def global_epochs(self) -> int:
        return self.epochs - self.lora_epochs

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def as_dict(self) -> Dict[str, object]:
        """File keys -> values, in canonical (declaration) order."""
        return {FIELD_TO_KEY[f.name]: getattr(self, f.name) for f in fields(self)}

    def digest(self) -> str:
        """sha256 of the canonical form, excluding the output directory."""
        items = sorted((key, _fmt(v)) for key, v in self.as_dict().items() if key != "output_dir")
        text = "\n".join(f"{key}={v}" for key, v in items)
        return hashlib.sha256(text.encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: str, kind, lineno: int):
    where = f"{key} (line {lineno})"
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{where}: expected true/false, got {raw!r}")
    if kind is int:
        try:
            return int(raw, 10)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    return raw


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_KIND = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values: Dict[str, object] = {}
    lines: Dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source} line {lineno}: expected 'key = value', got {body!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source} line {lineno}: unknown key {key!r}")
        if key in lines:
            raise ConfigError(f"{key} (line {lineno}): duplicate key, first set on line {lines[key]}")
        name = KEYS[key]
        values[name] = _coerce(key, raw, _KIND[_TYPES[name]], lineno)
        lines[key] = lineno
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        msg = str(exc)
        key = msg.split(":", 1)[0]
        if key in lines:
            extra = ""
            if key == "E_lora" and "E" in lines:
                extra = f", E on line {lines['E']}"
            raise ConfigError(f"{source}: {msg} (line {lines[key]}{extra})") from None
        raise ConfigError(f"{source}: {msg}") from None


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config_text(text, str(p))


def emit_config(config: ExperimentConfig) -> str:
    return "".join(f"{key} = {_fmt(v)}\n" for key, v in config.as_dict().items())


def preset_path(name: str) -> Path:
    return Path(__file__).parent / "presets" / f"{name}.cfg"


# acceptance-scale synthetic benchmark shared by suites and tests
DESK: Tuple[Tuple[str, object], ...] = (
    ("num_clients", 20), ("rounds", 60), ("epochs", 5), ("lora_epochs", 4), ("lr", 0.1),
    ("train_per_client", 120), ("test_per_client", 40), ("synth_classes", 8),
    ("synth_dim", 16), ("synth_separation", 8.0), ("synth_spread", 0.3),
    ("arch", "mlp"), ("dataset", "synthetic"),
)


def desk_config(**overrides) -> ExperimentConfig:
    base = dict(DESK)
    base.update(overrides)
    return ExperimentConfig(**base)
