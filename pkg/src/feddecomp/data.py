"""Datasets and Dirichlet label-skew partitioning."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import CapacityError, FormatError, ValidationError
from .rng import dirichlet, seeded_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        if n < 1:
            raise ValidationError("dataset is empty")
        if self.features.shape[0] != n:
            raise ValidationError(f"{self.features.shape[0]} feature rows for {n} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("features contain non-finite values")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def synth_mixture(num_classes: int, dim: int, n_per_class: int, separation: float, seed: int,
                  spread: float = 1.0) -> Dataset:
    """Isotropic unit-variance Gaussian classes centred at ``separation * spread * u_c``.

    The unit directions u_c are orthonormal when ``num_classes <= dim`` and
    random unit vectors otherwise. ``spread`` in (0, 1] shrinks every centre
    toward the origin. This is equivalent to placing the centres on a narrow
    cone of half-angle asin(spread) around a shared axis and then subtracting
    that shared offset. It gives the classes real overlap while keeping the
    nominal separation. Rows are shuffled.
    """
    if num_classes < 2 or dim < 2 or n_per_class < 1:
        raise ValidationError(f"need C >= 2, d >= 2, n_per_class >= 1; got {num_classes}, {dim}, {n_per_class}")
    if not separation >= 0:
        raise ValidationError(f"separation must be >= 0, got {separation}")
    if not 0 < spread <= 1:
        raise ValidationError(f"spread must lie in (0, 1], got {spread}")
    rng = seeded_rng(seed)
    raw = rng.standard_normal((dim, num_classes))
    if num_classes <= dim:
        q, r = np.linalg.qr(raw)
        units = (q * np.sign(np.diag(r))).T
    else:
        units = (raw / np.linalg.norm(raw, axis=0)).T
    labels = np.repeat(np.arange(num_classes), n_per_class)
    feats = separation * spread * units[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(feats[order], labels[order], num_classes)


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _read_idx(path, magic: int, ndim: int):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read IDX file: {exc.strerror or exc}") from None
    if len(blob) < 4:
        raise FormatError(f"{path}: truncated header at offset 0")
    (got,) = struct.unpack_from(">I", blob, 0)
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise FormatError(f"{path}: truncated dimension table at offset 4")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    n = int(np.prod(dims, dtype=np.int64))
    if len(blob) < head + n:
        raise FormatError(f"{path}: truncated data at offset {len(blob)}, need {head + n} bytes")
    if len(blob) > head + n:
        raise FormatError(f"{path}: trailing bytes at offset {head + n}")
    return dims, np.frombuffer(blob, dtype=np.uint8, count=n, offset=head)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> Dataset:
    """Read an IDX image/label pair into an (n, 1, H, W) dataset scaled to [0, 1]."""
    (n, h, w), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (m,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n != m:
        raise FormatError(f"{labels_path}: label count {m} at offset 4 does not match image count {n}")
    labels = labels.astype(np.int64)
    c = int(num_classes) if num_classes else int(labels.max()) + 1
    feats = pixels.reshape(n, 1, h, w).astype(np.float64) / 255.0
    return Dataset(feats, labels, max(c, 2))


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------

@dataclass
class PartitionPlan:
    train: List[np.ndarray]
    test: List[np.ndarray]
    alpha: float
    seed: int

    @property
    def num_clients(self) -> int:
        return len(self.train)

    def to_json(self) -> str:
        doc = {
            "alpha": self.alpha,
            "seed": self.seed,
            "clients": [
                {"id": i, "train": tr.tolist(), "test": te.tolist()}
                for i, (tr, te) in enumerate(zip(self.train, self.test))
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        doc = json.loads(text)
        clients = sorted(doc["clients"], key=lambda c: c["id"])
        return cls([np.array(c["train"], dtype=np.int64) for c in clients],
                   [np.array(c["test"], dtype=np.int64) for c in clients],
                   doc["alpha"], doc["seed"])


def largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total``, proportional to ``weights``.

    Leftover units go to the largest fractional parts, ties to the lowest index.
    """
    w = np.asarray(weights, dtype=np.float64)
    s = w.sum()
    if total == 0:
        return np.zeros(w.size, dtype=np.int64)
    if s <= 0:
        raise ValidationError("largest_remainder needs positive total weight")
    exact = total * (w / s)
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _allocate(total: int, props: np.ndarray, cap: np.ndarray) -> np.ndarray:
    """Largest-remainder counts, with any per-class overflow moved onto classes
    that still have room, proportionally to their share of ``props``."""
    if total > int(cap.sum()):
        want = largest_remainder(total, props) - cap
        raise CapacityError(f"class {int(np.argmax(want))} pool exhausted: "
                            f"need {total} samples, {int(cap.sum())} remain")
    counts = largest_remainder(total, props)
    while True:
        over = counts > cap
        if not over.any():
            return counts
        deficit = int((counts - cap)[over].sum())
        counts = np.minimum(counts, cap)
        room = counts < cap
        weights = np.where(room, props, 0.0)
        if weights.sum() <= 0:
            weights = room.astype(np.float64)
        counts = counts + largest_remainder(deficit, weights)


def dirichlet_partition(labels, num_clients: int, alpha: float, train_per_client: int,
                        test_per_client: int, seed: int, num_classes: Optional[int] = None) -> PartitionPlan:
    """Per-client Dir(alpha) class mixtures with disjoint train/test shards.

    Each class pool is shuffled once; clients, in id order, draw class
    proportions p_i, take largest-remainder train counts from the front of
    each pool, then test counts proportional to their realized train
    histogram from what remains.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if not alpha > 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    if num_clients < 1 or train_per_client < 1 or test_per_client < 0:
        raise ValidationError("need N >= 1, train_per_client >= 1, test_per_client >= 0")
    c = int(num_classes) if num_classes else int(labels.max()) + 1
    rng = seeded_rng(seed)
    pools = [rng.permutation(np.flatnonzero(labels == k)) for k in range(c)]
    used = np.zeros(c, dtype=np.int64)
    size = np.array([p.size for p in pools], dtype=np.int64)
    train, test = [], []
    for _ in range(num_clients):
        p = dirichlet(rng, alpha, c)
        tr = _allocate(train_per_client, p, size - used)
        te = _allocate(test_per_client, tr / train_per_client, size - used - tr)
        tr_idx, te_idx = [], []
        for k in range(c):
            start = used[k]
            tr_idx.append(pools[k][start:start + tr[k]])
            te_idx.append(pools[k][start + tr[k]:start + tr[k] + te[k]])
            used[k] += tr[k] + te[k]
        train.append(np.sort(np.concatenate(tr_idx)))
        test.append(np.sort(np.concatenate(te_idx)))
    return PartitionPlan(train, test, float(alpha), int(seed))


@dataclass
class PartitionStats:
    train_hist: np.ndarray  # N x C, rows sum to 1
    test_hist: np.ndarray
    summary: float  # mean over clients of the largest class share


def partition_stats(plan: PartitionPlan, labels, num_classes: Optional[int] = None) -> PartitionStats:
    labels = np.asarray(labels, dtype=np.int64)
    c = int(num_classes) if num_classes else int(labels.max()) + 1

    def hist(shards):
        rows = []
        for idx in shards:
            h = np.bincount(labels[np.asarray(idx, dtype=np.int64)], minlength=c).astype(np.float64)
            rows.append(h / h.sum() if h.sum() else h)
        return np.array(rows)

    tr = hist(plan.train)
    return PartitionStats(tr, hist(plan.test), float(tr.max(axis=1).mean()))
