"""Round orchestration: broadcast, two-phase local training, aggregation.

Each round, every participating client overwrites its shared tensors with
the server aggregate, trains the low-rank part with the full-rank part
frozen, then the full-rank part with the low-rank part frozen, and uploads
only its shared tensors. The server averages the uploads. The comparison
modes differ only in their phase schedule and in which tensors are shared.
"""

from __future__ import annotations

import copy
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rng as rngmod
from .checkpoint import dumps_arrays, load_params, loads_arrays, save_params
from .config import MODES, ExperimentConfig
from .data import Dataset, PartitionPlan, dirichlet_partition, load_idx, synth_mixture
from .errors import CapacityError, ConfigError, ContractError, DimensionError, NumericError
from .metrics import (ExperimentReport, RoundMetrics, Snapshot, accuracy, delta_norms,
                      model_difference)
from .models import (ModelParams, ModelSpec, cnn_spec, count_params, flatten_sigma, flatten_tau,
                     forward, init_decomposed, loss, mlp_spec, set_phase, trainable)
from .tensor import backward, collect_grads, sgd_step

Key = Tuple[str, int]
Upload = Dict[Key, np.ndarray]

BYTES_PER_VALUE = 8
WORKERS_ENV = "FEDDECOMP_WORKERS"


@dataclass(frozen=True)
class ScheduleConfig:
    mode: str
    epochs: int
    lora_epochs: int

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown mode {self.mode!r}")
        if not 0 <= self.lora_epochs <= self.epochs:
            raise ConfigError(f"E_lora: must satisfy 0 <= E_lora <= E, got {self.lora_epochs} and {self.epochs}")

    @property
    def global_epochs(self) -> int:
        return self.epochs - self.lora_epochs

    def phases(self) -> List[Tuple[str, int]]:
        if self.mode in ("fedavg", "local", "fedper"):
            return [("sigma", self.epochs)]
        if self.mode == "simultaneous":
            return [("joint", self.epochs)]
        return [("tau", self.lora_epochs), ("sigma", self.global_epochs)]


def shared_keys(mode: str, num_layers: int) -> List[Key]:
    """Tensors a client uploads and receives under ``mode``."""
    sigma = [("sigma", k) for k in range(num_layers)] + [("bias", k) for k in range(num_layers)]
    factors = [("factor_b", k) for k in range(num_layers)] + [("factor_a", k) for k in range(num_layers)]
    if mode in ("feddecomp", "fedavg", "simultaneous"):
        return sigma
    if mode == "fedavg-lowrank":
        return sigma + factors
    if mode == "feddecomp-reverse":
        return factors
    if mode == "fedper":
        return [key for key in sigma if key[1] != num_layers - 1]
    return []


@dataclass
class ClientState:
    client_id: int
    model: ModelParams
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    rng: np.random.Generator

    def copy(self) -> "ClientState":
        # data arrays are never written, so sharing them is safe
        return ClientState(self.client_id, self.model.copy(), self.train_x, self.train_y,
                           self.test_x, self.test_y, copy.deepcopy(self.rng))


@dataclass
class GlobalModel:
    tensors: Dict[Key, np.ndarray]
    round: int = 0


@dataclass
class Federation:
    config: ExperimentConfig
    spec: ModelSpec
    schedule: ScheduleConfig
    clients: List[ClientState]
    global_model: GlobalModel
    initial: Snapshot
    round: int = 0


# ---------------------------------------------------------------------------
# client side
# ---------------------------------------------------------------------------

def _train(spec: ModelSpec, client: ClientState, phase: str, epochs: int, lr: float, batch_size: int) -> None:
    if epochs == 0:
        return
    n = len(client.train_y)
    if n == 0:
        raise CapacityError(f"client {client.client_id} has an empty training shard")
    params = client.model
    set_phase(params, phase)
    params_t = trainable(params)
    for _ in range(epochs):
        order = client.rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            value = loss(forward(spec, params, client.train_x[idx]), client.train_y[idx])
            if not np.isfinite(value.data):
                raise NumericError(f"client {client.client_id}: non-finite loss")
            ps, gs = collect_grads(params_t, backward(value))
            sgd_step(ps, gs, lr)
    set_phase(params, "frozen")


def local_update_tau(spec: ModelSpec, client: ClientState, schedule: ScheduleConfig,
                     lr: float, batch_size: int) -> ClientState:
    """Low-rank phase: B and A trained for E_lora epochs, everything else frozen."""
    _train(spec, client, "tau", schedule.lora_epochs, lr, batch_size)
    return client


def local_update_sigma(spec: ModelSpec, client: ClientState, schedule: ScheduleConfig,
                       lr: float, batch_size: int) -> ClientState:
    """Full-rank phase: sigma and biases trained for E - E_lora epochs."""
    _train(spec, client, "sigma", schedule.global_epochs, lr, batch_size)
    return client


def local_update(spec: ModelSpec, client: ClientState, schedule: ScheduleConfig,
                 lr: float, batch_size: int) -> ClientState:
    for phase, epochs in schedule.phases():
        _train(spec, client, phase, epochs, lr, batch_size)
    return client


def receive(client: ClientState, global_model: GlobalModel) -> None:
    for key, value in global_model.tensors.items():
        client.model.get(key).data = value.copy()


def upload(client: ClientState, keys: Sequence[Key]) -> Upload:
    return {key: client.model.get(key).data.copy() for key in keys}


# ---------------------------------------------------------------------------
# server side
# ---------------------------------------------------------------------------

def aggregate(uploads: Sequence[Upload], previous_round: int = 0) -> GlobalModel:
    """Unweighted elementwise mean of the participants' uploads.

    Computed as ``first + sum(u - first) / n`` so identical uploads average
    to exactly themselves.
    """
    if not uploads:
        raise ContractError("aggregate needs at least one upload")
    keys = list(uploads[0])
    for u in uploads[1:]:
        if list(u) != keys:
            raise DimensionError("uploads carry different tensor sets")
        for key in keys:
            if u[key].shape != uploads[0][key].shape:
                raise DimensionError(f"{key}: shape {u[key].shape} vs {uploads[0][key].shape}")
    n = len(uploads)
    out = {}
    for key in keys:
        ref = uploads[0][key]
        acc = np.zeros_like(ref)
        for u in uploads[1:]:
            acc += u[key] - ref
        out[key] = ref + acc / n
    return GlobalModel(out, previous_round + 1)


def mean_vector(vectors: Sequence[np.ndarray]) -> np.ndarray:
    return aggregate([{("v", 0): v} for v in vectors]).tensors[("v", 0)]


def select_participants(num_clients: int, fraction: float, round_seed: int) -> List[int]:
    if not 0 < fraction <= 1:
        raise ConfigError(f"participation: must lie in (0, 1], got {fraction}")
    m = math.ceil(fraction * num_clients - 1e-9)
    if m >= num_clients:
        return list(range(num_clients))
    chosen = rngmod.seeded_rng(round_seed).choice(num_clients, size=m, replace=False)
    return sorted(int(i) for i in chosen)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_dataset(config: ExperimentConfig) -> Dataset:
    if config.dataset == "idx":
        if not config.idx_images or not config.idx_labels:
            raise ConfigError("idx_images/idx_labels: both paths are required when dataset = idx")
        ds = load_idx(config.idx_images, config.idx_labels)
    else:
        n = config.synth_n_per_class or config.num_clients * (config.train_per_client + config.test_per_client)
        ds = synth_mixture(config.synth_classes, config.synth_dim, n, config.synth_separation,
                           rngmod.derive_seed(config.seed, rngmod.ROLE_DATA), spread=config.synth_spread)
    if config.arch == "mlp" and ds.features.ndim > 2:
        ds = Dataset(ds.features.reshape(len(ds), -1), ds.labels, ds.num_classes)
    elif config.arch == "cnn" and ds.features.ndim == 2:
        side = int(round(math.sqrt(ds.features.shape[1])))
        if side * side != ds.features.shape[1]:
            raise ConfigError(f"arch: cnn needs square images, synth_dim = {ds.features.shape[1]}")
        ds = Dataset(ds.features.reshape(len(ds), 1, side, side), ds.labels, ds.num_classes)
    return ds


def build_spec(config: ExperimentConfig, dataset: Dataset) -> ModelSpec:
    if config.arch == "cnn":
        return cnn_spec(tuple(dataset.features.shape[1:]), dataset.num_classes)
    return mlp_spec(dataset.features.shape[1], dataset.num_classes)


def build_plan(config: ExperimentConfig, dataset: Dataset) -> PartitionPlan:
    return dirichlet_partition(dataset.labels, config.num_clients, config.alpha, config.train_per_client,
                               config.test_per_client, rngmod.derive_seed(config.seed, rngmod.ROLE_PARTITION),
                               dataset.num_classes)


def build_federation(config: ExperimentConfig, dataset: Optional[Dataset] = None,
                     plan: Optional[PartitionPlan] = None) -> Federation:
    dataset = dataset if dataset is not None else build_dataset(config)
    plan = plan if plan is not None else build_plan(config, dataset)
    spec = build_spec(config, dataset)
    schedule = ScheduleConfig(config.mode, config.epochs, config.lora_epochs)
    root = config.seed
    base = init_decomposed(spec, config.rank_fc, config.rank_conv, rngmod.derived_rng(root, rngmod.ROLE_MODEL))
    keys = shared_keys(config.mode, len(spec.layers))
    common = [("sigma", k) for k in range(len(spec.layers))] + [("bias", k) for k in range(len(spec.layers))]
    clients = []
    for i in range(config.num_clients):
        params = init_decomposed(spec, config.rank_fc, config.rank_conv,
                                 rngmod.derived_rng(root, rngmod.ROLE_CLIENT_INIT, i))
        for key in common:
            params.get(key).data = base.get(key).data.copy()
        tr, te = plan.train[i], plan.test[i]
        clients.append(ClientState(i, params, dataset.features[tr], dataset.labels[tr],
                                   dataset.features[te], dataset.labels[te],
                                   rngmod.derived_rng(root, rngmod.ROLE_CLIENT_SHUFFLE, i)))
    global_model = GlobalModel({key: base.get(key).data.copy() for key in keys}, 0)
    fed = Federation(config, spec, schedule, clients, global_model, Snapshot(np.empty(0), []))
    fed.initial = snapshot(fed)
    return fed


# ---------------------------------------------------------------------------
# rounds
# ---------------------------------------------------------------------------

def sigma_bar(fed: Federation) -> np.ndarray:
    """Flattened server-side shared weights; the client mean when sigma is not shared."""
    layers = len(fed.spec.layers)
    sigma_keys = [("sigma", k) for k in range(layers)]
    if all(key in fed.global_model.tensors for key in sigma_keys):
        return np.concatenate([fed.global_model.tensors[key].ravel() for key in sigma_keys])
    return mean_vector([flatten_sigma(c.model) for c in fed.clients])


def snapshot(fed: Federation) -> Snapshot:
    return Snapshot(sigma_bar(fed), [flatten_tau(c.model) for c in fed.clients])


def _phase_counts(fed: Federation) -> Dict[str, int]:
    probe = fed.clients[0].model
    counts = {}
    for phase, epochs in fed.schedule.phases():
        if epochs:
            set_phase(probe, phase)
            counts[phase] = count_params(trainable(probe))
    set_phase(probe, "frozen")
    return counts


def _workers(workers: Optional[int]) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    return max(1, workers)


def run_round(fed: Federation, workers: Optional[int] = None) -> RoundMetrics:
    """Advance ``fed`` by one round; on any client failure ``fed`` is left untouched."""
    cfg = fed.config
    t = fed.round + 1
    started = time.perf_counter()
    keys = list(fed.global_model.tensors)
    participants = select_participants(
        cfg.num_clients, cfg.participation, rngmod.derive_seed(cfg.seed, rngmod.ROLE_PARTICIPATION, t))
    work = {i: fed.clients[i].copy() for i in participants}

    def job(client: ClientState) -> ClientState:
        receive(client, fed.global_model)
        return local_update(fed.spec, client, fed.schedule, cfg.lr, cfg.batch_size)

    n_workers = _workers(workers)
    if n_workers > 1 and len(participants) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(job, [work[i] for i in participants]))
    else:
        for i in participants:
            job(work[i])

    uploads = [upload(work[i], keys) for i in participants]
    new_global = aggregate(uploads, fed.global_model.round) if keys else GlobalModel({}, fed.global_model.round + 1)

    sigmas = [flatten_sigma(work[i].model) for i in participants]
    if cfg.evaluate == "local":
        accs = [accuracy(fed.spec, (work[i] if i in work else c).model, c.test_x, c.test_y)
                for i, c in enumerate(fed.clients)]

    # commit
    for i in participants:
        fed.clients[i] = work[i]
    fed.global_model = new_global
    fed.round = t
    if cfg.evaluate == "broadcast":
        for c in fed.clients:
            receive(c, new_global)
        accs = [accuracy(fed.spec, c.model, c.test_x, c.test_y) for c in fed.clients]
    d_sigma, d_tau = delta_norms([fed.initial, snapshot(fed)])
    per_client_bytes = sum(v.size for v in uploads[0].values()) * BYTES_PER_VALUE if keys else 0
    return RoundMetrics(
        round=t,
        accuracies=accs,
        mean_accuracy=float(np.mean(accs)),
        model_difference=model_difference(sigmas, mean_vector(sigmas)),
        delta_sigma=d_sigma,
        delta_tau=d_tau,
        uploaded_bytes=per_client_bytes * len(participants),
        trained_params=_phase_counts(fed),
        participants=participants,
        secs=time.perf_counter() - started if cfg.timing else None,
    )


def run_experiment(config: ExperimentConfig, dataset: Optional[Dataset] = None,
                   workers: Optional[int] = None, fed: Optional[Federation] = None) -> ExperimentReport:
    fed = fed if fed is not None else build_federation(config, dataset)
    # where the files land is not part of the experiment; keep it out of the report
    settings = {k: v for k, v in config.as_dict().items() if k != "output_dir"}
    report = ExperimentReport(settings, config.digest(), config.num_clients)
    while fed.round < config.rounds:
        report.rounds.append(run_round(fed, workers))
    return report


# ---------------------------------------------------------------------------
# federation checkpoints
# ---------------------------------------------------------------------------

def save_federation(fed: Federation, directory) -> None:
    """Write global.fdcp, client_<i>.fdcp and manifest.json into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    keys = list(fed.global_model.tensors)
    (d / "global.fdcp").write_bytes(dumps_arrays([fed.global_model.tensors[k] for k in keys]))
    for c in fed.clients:
        save_params(c.model, d / f"client_{c.client_id}.fdcp")
    manifest = {
        "round": fed.round,
        "global_round": fed.global_model.round,
        "seed": fed.config.seed,
        "config_digest": fed.config.digest(),
        "global_keys": [list(k) for k in keys],
        "client_rng": [c.rng.bit_generator.state for c in fed.clients],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def restore_federation(config: ExperimentConfig, directory, dataset: Optional[Dataset] = None) -> Federation:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest["config_digest"] != config.digest():
        raise ConfigError("checkpoint was written under a different config")
    fed = build_federation(config, dataset)
    arrays = loads_arrays((d / "global.fdcp").read_bytes())
    keys = [tuple(k) for k in manifest["global_keys"]]
    fed.global_model = GlobalModel(dict(zip(keys, arrays)), manifest["global_round"])
    for c, state in zip(fed.clients, manifest["client_rng"]):
        c.model = load_params(d / f"client_{c.client_id}.fdcp", c.model)
        c.rng.bit_generator.state = state
    fed.round = manifest["round"]
    return fed
