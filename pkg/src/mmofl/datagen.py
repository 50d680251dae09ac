"""Synthetic/external multimodal data, Dirichlet partitioning, FIFO streams and
missing-modality schedules."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

SYNCHRONIZED = "synchronized"
INDEPENDENT = "independent"


@dataclass(frozen=True)
class MultimodalDataset:
    data: tuple[np.ndarray, ...]
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        n = len(self.labels)
        for m, x in enumerate(self.data):
            if x.ndim != 2 or x.shape[0] != n:
                raise ValueError(f"modality {m} has {x.shape[0]} rows, labels have {n}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_modalities(self) -> int:
        return len(self.data)

    @property
    def input_dims(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.data)

    def subset(self, idx: np.ndarray) -> "MultimodalDataset":
        return MultimodalDataset(tuple(x[idx] for x in self.data), self.labels[idx], self.num_classes)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class RoundBatch:
    data: tuple[np.ndarray | None, ...]
    labels: np.ndarray
    availability: tuple[bool, ...]
    client_id: int = 0
    round_index: int = 0

    def __post_init__(self):
        if len(self.data) != len(self.availability):
            raise ValueError("one availability flag per modality")
        for m, (x, avail) in enumerate(zip(self.data, self.availability)):
            if avail != (x is not None):
                raise ValueError(f"modality {m}: availability flag disagrees with data")

    @property
    def full(self) -> bool:
        return all(self.availability)

    def __len__(self) -> int:
        return len(self.labels)


def full_batch(dataset: MultimodalDataset, client_id: int = 0, round_index: int = 0) -> RoundBatch:
    return RoundBatch(
        tuple(dataset.data), dataset.labels, (True,) * dataset.num_modalities, client_id, round_index
    )


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 6
    input_dims: tuple[int, ...] = (16, 16)
    class_center_separation: float = 1.0
    noise_std: float = 1.0
    modality_informativeness: tuple[float, ...] = (1.0, 1.0)
    total_samples: int = 10299
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        object.__setattr__(
            self, "modality_informativeness", tuple(float(v) for v in self.modality_informativeness)
        )
        if len(self.input_dims) != len(self.modality_informativeness):
            raise ValueError("one informativeness value per modality")
        if self.num_classes < 1 or self.total_samples < 0 or min(self.input_dims) < 1:
            raise ValueError("invalid synthetic spec dimensions")
        if self.class_center_separation <= 0:
            raise ValueError("class_center_separation must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if any(not 0.0 <= v <= 1.0 for v in self.modality_informativeness):
            raise ValueError("informativeness must lie in [0, 1]")


def class_centers(spec: SyntheticSpec) -> list[np.ndarray]:
    """Per-modality (C x dim) class centers, already scaled by informativeness."""
    rng = np.random.default_rng([spec.seed, 1])
    out = []
    for dim, info in zip(spec.input_dims, spec.modality_informativeness):
        raw = rng.standard_normal((spec.num_classes, dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        out.append(info * spec.class_center_separation * raw)
    return out


def generate_synthetic(spec: SyntheticSpec) -> MultimodalDataset:
    centers = class_centers(spec)
    rng = np.random.default_rng([spec.seed, 2])
    labels = rng.permutation(np.arange(spec.total_samples) % spec.num_classes)
    data = []
    for c, dim in zip(centers, spec.input_dims):
        noise = rng.standard_normal((spec.total_samples, dim))
        data.append(c[labels] + spec.noise_std * noise)
    return MultimodalDataset(tuple(data), labels.astype(np.int64), spec.num_classes)


def train_test_split(dataset: MultimodalDataset, test_fraction: float, seed: int):
    """Held-out split; returns ``(train, test)``."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    perm = np.random.default_rng([seed, 3]).permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


# --- external datasets -----------------------------------------------------

def _read_matrix(path: Path, cols: int | None) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: unparseable cell ({exc})") from None
    if not rows:
        return np.zeros((0, cols or 0))
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: ragged rows")
    arr = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: NaN or inf values")
    if cols is not None and arr.shape[1] != cols:
        raise ValueError(f"{path}: expected {cols} columns, found {arr.shape[1]}")
    return arr


def _read_labels(path: Path) -> np.ndarray:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line, 10))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not a base-10 integer: {line!r}") from None
    return np.asarray(out, dtype=np.int64)


def load_external(path: str | Path, manifest: str = "manifest.json") -> MultimodalDataset:
    """Load a dataset described by a JSON manifest.

    Manifest keys: ``modalities`` (list of CSV paths relative to ``path``),
    ``labels`` (label file), ``num_classes``, optional ``input_dims``.
    """
    root = Path(path)
    meta = json.loads((root / manifest).read_text())
    dims = meta.get("input_dims") or [None] * len(meta["modalities"])
    data = tuple(_read_matrix(root / f, d) for f, d in zip(meta["modalities"], dims))
    labels = _read_labels(root / meta["labels"])
    counts = {x.shape[0] for x in data} | {len(labels)}
    if len(counts) != 1:
        raise ValueError(f"row-count mismatch across modality/label files: {sorted(counts)}")
    num_classes = int(meta["num_classes"])
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label out of range")
    return MultimodalDataset(data, labels, num_classes)


def write_dataset(dataset: MultimodalDataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for m, x in enumerate(dataset.data):
        name = f"modality_{m}.csv"
        with open(out / name, "w") as fh:
            for row in x:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
        names.append(name)
    with open(out / "labels.csv", "w") as fh:
        fh.writelines(f"{int(y)}\n" for y in dataset.labels)
    manifest = {
        "modalities": names,
        "labels": "labels.csv",
        "num_classes": dataset.num_classes,
        "input_dims": list(dataset.input_dims),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# --- partitioning ------------------------------------------------------------

@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 5
    alpha: float = 10.0
    initial_pool_per_client: int = 2000
    window_size: int = 500
    churn_per_round: int = 20

    def __post_init__(self):
        if self.num_clients <= 0:
            raise ValueError("num_clients must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.window_size < 1:
            raise ValueError("window_size must be positive")
        if not 0 <= self.churn_per_round <= self.window_size:
            raise ValueError("churn_per_round must lie in [0, window_size]")
        if self.window_size > self.initial_pool_per_client:
            raise ValueError("window_size cannot exceed initial_pool_per_client")


@dataclass(frozen=True)
class Partition:
    pools: tuple[np.ndarray, ...]  # indices into the partitioned dataset
    with_replacement: bool


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation summing to ``total`` proportional to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    if total == 0 or w.sum() <= 0:
        return np.zeros(len(w), dtype=np.int64)
    exact = w / w.sum() * total
    base = np.floor(exact).astype(np.int64)
    rem = total - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rem]] += 1
    return base


def partition_dirichlet(dataset: MultimodalDataset, config: PartitionConfig, seed: int) -> Partition:
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot partition an empty dataset")
    K, C = config.num_clients, dataset.num_classes
    rng = np.random.default_rng([seed, 4])
    hist = dataset.class_histogram().astype(np.float64)
    # shares[c, k]: fraction of class c assigned to client k
    shares = rng.dirichlet(np.full(K, config.alpha), size=C)
    mass = hist[:, None] * shares
    by_class = [list(rng.permutation(np.flatnonzero(dataset.labels == c))) for c in range(C)]
    remaining = set(range(n))
    pools = []
    replaced = False
    for k in range(K):
        want = largest_remainder(mass[:, k], config.initial_pool_per_client)
        taken: list[int] = []
        for c in range(C):
            got = [i for i in by_class[c][: want[c]]]
            by_class[c] = by_class[c][want[c] :]
            taken.extend(got)
        remaining.difference_update(taken)
        short = config.initial_pool_per_client - len(taken)
        if short > 0:
            spare = np.array(sorted(remaining), dtype=np.int64)
            if len(spare) >= short:
                fill = rng.choice(spare, size=short, replace=False)
                remaining.difference_update(fill.tolist())
                for i in fill:
                    by_class[dataset.labels[i]].remove(i)
            else:
                replaced = True
                fill = np.concatenate([spare, rng.choice(n, size=short - len(spare), replace=True)])
                remaining.clear()
                by_class = [[] for _ in range(C)]
            taken.extend(int(i) for i in fill)
        pools.append(rng.permutation(np.asarray(taken, dtype=np.int64)))
    return Partition(tuple(pools), replaced)


# --- streaming ---------------------------------------------------------------

@dataclass(frozen=True)
class ClientStream:
    """FIFO window over a client's pool; the pool order is cycled."""

    pool: np.ndarray
    window_size: int
    churn: int

    def __post_init__(self):
        if self.window_size > len(self.pool):
            raise ValueError("window larger than pool")

    def positions(self, t: int) -> np.ndarray:
        """Absolute stream positions held in the window at round ``t``."""
        return t * self.churn + np.arange(self.window_size)

    def window(self, t: int) -> np.ndarray:
        return self.pool[self.positions(t) % len(self.pool)]

    def insertion_rounds(self, t: int) -> np.ndarray:
        pos = self.positions(t)
        out = np.zeros(self.window_size, dtype=np.int64)
        late = pos >= self.window_size
        if self.churn:
            out[late] = (pos[late] - self.window_size) // self.churn + 1
        return out


def make_streams(partition: Partition, config: PartitionConfig) -> list[ClientStream]:
    return [ClientStream(p, config.window_size, config.churn_per_round) for p in partition.pools]


def advance_stream(dataset: MultimodalDataset, stream: ClientStream, t: int, client_id: int = 0) -> RoundBatch:
    """Full-modality batch of the window at round ``t`` (round 0 = initial window)."""
    idx = stream.window(t)
    return RoundBatch(
        tuple(x[idx] for x in dataset.data),
        dataset.labels[idx],
        (True,) * dataset.num_modalities,
        client_id,
        t,
    )


# --- missing-modality schedule -------------------------------------------------

@dataclass(frozen=True)
class MissingSchedule:
    num_rounds: int
    num_clients: int
    num_modalities: int
    lam: float
    mode: str = SYNCHRONIZED
    # round -> client -> missing modalities; rounds/clients with nothing missing are absent
    missing: dict = field(default_factory=dict)

    def missing_set(self, t: int, k: int) -> frozenset:
        return self.missing.get(t, {}).get(k, frozenset())

    def available(self, t: int, k: int) -> tuple[bool, ...]:
        gone = self.missing_set(t, k)
        return tuple(m not in gone for m in range(self.num_modalities))

    def beta(self, t: int, k: int) -> float:
        """Available fraction of the M+1 model blocks (head counted)."""
        return (sum(self.available(t, k)) + 1) / (self.num_modalities + 1)

    @property
    def missing_rounds(self) -> list[int]:
        return sorted(self.missing)

    def rows(self):
        for t in range(self.num_rounds):
            for k in range(self.num_clients):
                avail = self.available(t, k)
                for m in range(self.num_modalities):
                    yield t, k, m, int(avail[m])

    def export_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "client", "modality", "available"])
            w.writerows(self.rows())


def empty_schedule(T: int, M: int, K: int) -> MissingSchedule:
    return MissingSchedule(T, K, M, 0.0, SYNCHRONIZED, {})


def build_schedule(T: int, lam: float, M: int, K: int, mode: str = SYNCHRONIZED, seed: int = 0) -> MissingSchedule:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if mode not in (SYNCHRONIZED, INDEPENDENT):
        raise ValueError(f"unknown schedule mode {mode!r}")
    n_missing = int(math.floor(lam * T + 0.5))
    if n_missing and M < 2:
        raise ValueError("with a single modality any missing round leaves a client with no data")
    rng = np.random.default_rng([seed, 5])
    rounds = np.sort(rng.choice(T, size=n_missing, replace=False)) if n_missing else []
    missing = {}
    for t in rounds:
        t = int(t)
        if mode == SYNCHRONIZED:
            m = int(rng.integers(M))
            missing[t] = {k: frozenset([m]) for k in range(K)}
            continue
        hit = rng.random(K) < 0.5
        if not hit.any():
            hit[int(rng.integers(K))] = True
        per = {}
        for k in np.flatnonzero(hit):
            size = int(rng.integers(1, M))
            per[int(k)] = frozenset(int(m) for m in rng.choice(M, size=size, replace=False))
        missing[t] = per
    return MissingSchedule(T, K, M, float(lam), mode, missing)


def apply_schedule(batch: RoundBatch, schedule: MissingSchedule) -> RoundBatch:
    gone = schedule.missing_set(batch.round_index, batch.client_id)
    if not gone:
        return batch
    data = tuple(None if m in gone else x for m, x in enumerate(batch.data))
    return replace(batch, data=data, availability=tuple(x is not None for x in data))
