"""Synchronous multimodal online FL rounds.

Each round: clients read their stream window, the missing-modality schedule
is applied, every client runs E local gradient steps from the broadcast
global model under the chosen strategy, and the server averages all K
uploads with equal weight. PMM additionally builds class prototypes on the
full-modality clients and broadcasts the persistent collection that
missing-modality clients substitute from.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import math
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pmm as P
from .datagen import (
    ClientStream,
    MissingSchedule,
    MultimodalDataset,
    RoundBatch,
    advance_stream,
    apply_schedule,
)
from .model import (
    SUBSTITUTED,
    ZERO_FILLED,
    ModelParams,
    average_params,
    forward,
    predict_accuracy,
    sgd_step,
    value_and_grad,
)


class Strategy(str, enum.Enum):
    FM = "FM"
    PM = "PM"
    ZF = "ZF"
    PMM = "PMM"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        aliases = {
            "fullmodality": cls.FM,
            "partialmodality": cls.PM,
            "zerofilling": cls.ZF,
        }
        key = str(value).replace("_", "").replace("-", "").lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown strategy {value!r}") from None


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 400
    local_iters: int = 1
    eta0: float = 0.1
    decay: float = 0.95
    eta_floor: float = 0.001
    strategy: Strategy = Strategy.PMM

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_iters < 1:
            raise ValueError("local_iters must be >= 1")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.eta0 <= 0 or self.eta_floor <= 0:
            raise ValueError("learning rates must be positive")

    def eta(self, t: int) -> float:
        return max(self.eta0 * self.decay**t, self.eta_floor)


@dataclass(frozen=True)
class PMMConfig:
    normalize: bool = True
    bits: int = 32
    delay: int = 0
    fallback: bool = True

    @property
    def quantizer(self) -> P.QuantizerConfig:
        return P.QuantizerConfig(self.bits)

    @property
    def delay_config(self) -> P.DelayConfig:
        return P.DelayConfig(self.delay)


@dataclass(frozen=True)
class Client:
    client_id: int
    stream: ClientStream

    def batch(self, dataset: MultimodalDataset, t: int) -> RoundBatch:
        return advance_stream(dataset, self.stream, t, self.client_id)


@dataclass(frozen=True)
class ServerState:
    params: ModelParams
    round: int = 0
    prototypes: P.PrototypeMatrix | None = None  # server copy, full precision
    broadcast: P.PrototypeMatrix | None = None  # what clients last received
    delay_counters: tuple[int, ...] = ()
    full_clients: tuple[int, ...] = ()
    opc_executions: int = 0

    @classmethod
    def initial(cls, params: ModelParams, with_prototypes: bool, normalize: bool = True) -> "ServerState":
        cfg = params.config
        protos = None
        if with_prototypes:
            protos = P.PrototypeMatrix.empty(cfg.num_modalities, cfg.num_classes, cfg.feature_dim, normalize)
        return cls(params, 0, protos, protos, (0,) * cfg.num_modalities)


@dataclass(frozen=True)
class CommEvent:
    round: int
    kind: str  # "model" | "proto"
    direction: str  # "up" | "down"
    client: int
    bits: int
    digest: str


def _comm(t, kind, direction, client, blob: bytes) -> CommEvent:
    return CommEvent(t, kind, direction, client, 8 * len(blob), hashlib.sha256(blob).hexdigest())


@dataclass(frozen=True)
class ClientEvent:
    round: int
    client: int
    strategy: str
    available: tuple[bool, ...]
    local_loss: float
    upload_bytes: int


@dataclass(frozen=True)
class RoundOutcome:
    round: int
    eta: float
    train_loss: float
    test_acc: float
    full_clients: tuple[int, ...]
    opc_runs: int
    fallback_rows: int
    comm: tuple[CommEvent, ...]
    clients: tuple[ClientEvent, ...]
    uploads: dict = field(default_factory=dict)  # client -> uploaded ModelParams


# --- local updates ---------------------------------------------------------------

def _descend(params, batch, E, eta, substitutes, mask):
    first = None
    for _ in range(E):
        loss, grad = value_and_grad(params, batch, substitutes, mask)
        if first is None:
            first = loss
        params = sgd_step(params, grad, eta)
    return params, first


def _zero_features(batch: RoundBatch, d: int) -> dict:
    n = len(batch.labels)
    return {m: (np.zeros((n, d)), ZERO_FILLED) for m, a in enumerate(batch.availability) if not a}


def _zero_inputs(batch: RoundBatch, input_dims) -> RoundBatch:
    n = len(batch.labels)
    data = tuple(x if x is not None else np.zeros((n, dim)) for x, dim in zip(batch.data, input_dims))
    return replace(batch, data=data, availability=(True,) * len(data))


def _require_some(batch: RoundBatch):
    if not any(batch.availability):
        raise ValueError(f"client {batch.client_id} has no modality at round {batch.round_index}")


def local_update_full(global_params: ModelParams, batch: RoundBatch, E: int, eta: float) -> ModelParams:
    if not batch.full:
        raise ValueError("full update needs every modality")
    return _descend(global_params, batch, E, eta, None, None)[0]


def _partial(global_params, batch, E, eta):
    _require_some(batch)
    subs = _zero_features(batch, global_params.config.feature_dim)
    return _descend(global_params, batch, E, eta, subs, batch.availability)


def local_update_partial(global_params: ModelParams, batch: RoundBatch, E: int, eta: float) -> ModelParams:
    """Missing modalities enter the head as zero features; their encoders get no gradient."""
    return _partial(global_params, batch, E, eta)[0]


def _zerofill(global_params, batch, E, eta):
    _require_some(batch)
    filled = _zero_inputs(batch, global_params.config.input_dims)
    return _descend(global_params, filled, E, eta, None, None)


def local_update_zerofill(global_params: ModelParams, batch: RoundBatch, E: int, eta: float) -> ModelParams:
    """Missing modalities are fed as all-zero raw inputs; every block trains."""
    return _zerofill(global_params, batch, E, eta)[0]


def _pmm(global_params, batch, E, eta, prototypes, fallback=True):
    _require_some(batch)
    subs = {
        m: (P.substitute(prototypes, batch.labels, m, fallback), SUBSTITUTED)
        for m, a in enumerate(batch.availability)
        if not a
    }
    return _descend(global_params, batch, E, eta, subs, batch.availability)


def local_update_pmm(
    global_params: ModelParams,
    batch: RoundBatch,
    E: int,
    eta: float,
    prototypes: P.PrototypeMatrix,
    fallback: bool = True,
) -> ModelParams:
    """Missing modalities are replaced by the class prototypes of the true labels."""
    return _pmm(global_params, batch, E, eta, prototypes, fallback)[0]


def _local(strategy: Strategy, params, batch, E, eta, prototypes, fallback):
    if batch.full:
        return _descend(params, batch, E, eta, None, None)
    if strategy is Strategy.FM:
        raise ValueError("FM strategy received a batch with missing modalities")
    if strategy is Strategy.PM:
        return _partial(params, batch, E, eta)
    if strategy is Strategy.ZF:
        return _zerofill(params, batch, E, eta)
    return _pmm(params, batch, E, eta, prototypes, fallback)


# --- one round ----------------------------------------------------------------------

def _map(executor, fn, items):
    if executor is None:
        return [fn(x) for x in items]
    return list(executor.map(fn, items))


def run_round(
    server: ServerState,
    clients: Sequence[Client],
    dataset: MultimodalDataset,
    schedule: MissingSchedule,
    train: TrainConfig,
    pmm_cfg: PMMConfig = PMMConfig(),
    test: RoundBatch | None = None,
    executor=None,
) -> tuple[ServerState, RoundOutcome]:
    t = server.round
    if train.strategy is Strategy.FM and schedule.missing:
        raise ValueError("FM is the no-missing reference; it needs an empty schedule")
    eta = train.eta(t)
    params = server.params
    full = [c.batch(dataset, t) for c in clients]
    batches = [apply_schedule(b, schedule) for b in full]
    train_loss = float(np.mean([forward(params, b)[2] for b in full]))
    s_t = tuple(b.client_id for b in batches if b.full)
    comm: list[CommEvent] = []

    # prototype construction runs on the broadcast model, before local training
    protos, view = server.prototypes, server.broadcast
    counters = server.delay_counters
    opc_runs = 0
    if train.strategy is Strategy.PMM:
        delay = P.DelayState(pmm_cfg.delay_config, list(counters))
        run_mods = [m for m in range(params.config.num_modalities) if P.should_run_opc(delay, m, bool(s_t))]
        counters = tuple(delay.counters)
        if s_t and run_mods:
            q = pmm_cfg.quantizer
            full_batches = [b for b in batches if b.full]

            def build(b):
                local = P.build_local_prototypes(params, b, pmm_cfg.normalize, run_mods)
                return P.serialize_local(local, q, pmm_cfg.normalize)

            blobs = _map(executor, build, full_batches)
            received = []
            for b, blob in zip(full_batches, blobs):
                comm.append(_comm(t, "proto", "up", b.client_id, blob))
                received.append(P.deserialize_local(blob))
            temporal = P.aggregate_temporal(received, s_t, pmm_cfg.normalize)
            if temporal is not None:
                protos = P.update_persistent(protos, temporal, t)
                opc_runs = int(temporal.present.any(axis=1).sum())
                blob = P.serialize_collection(protos, q)
                comm.extend(_comm(t, "proto", "down", c.client_id, blob) for c in clients)
                view = P.deserialize_collection(blob)

    fallback_rows = 0
    if train.strategy is Strategy.PMM:
        for b in batches:
            for m, a in enumerate(b.availability):
                if not a:
                    fallback_rows += P.missing_rows(view, b.labels, m)

    E = train.local_iters
    results = _map(
        executor,
        lambda b: _local(train.strategy, params, b, E, eta, view, pmm_cfg.fallback),
        batches,
    )
    uploads = {}
    events = []
    for b, (local, loss) in zip(batches, results):
        blob = local.to_bytes()
        comm.append(_comm(t, "model", "up", b.client_id, blob))
        uploads[b.client_id] = local
        events.append(ClientEvent(t, b.client_id, train.strategy.value, b.availability, loss, len(blob)))
    new_params = average_params(uploads)
    blob = new_params.to_bytes()
    comm.extend(_comm(t, "model", "down", c.client_id, blob) for c in clients)
    acc = predict_accuracy(new_params, test) if test is not None else math.nan

    nxt = ServerState(
        new_params, t + 1, protos, view, counters, s_t, server.opc_executions + opc_runs
    )
    outcome = RoundOutcome(t, eta, train_loss, acc, s_t, opc_runs, fallback_rows, tuple(comm), tuple(events), uploads)
    return nxt, outcome


# --- checkpoints ----------------------------------------------------------------------

def save_checkpoint(path: str | Path, server: ServerState, seed: int, extra: dict | None = None) -> None:
    meta = {
        "round": server.round,
        "seed": seed,
        "delay_counters": list(server.delay_counters),
        "full_clients": list(server.full_clients),
        "opc_executions": server.opc_executions,
        "rng": "all randomness derives from the seed; streams are closed-form in the round index",
        "extra": extra or {},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, sort_keys=True))
        zf.writestr("params.bin", server.params.to_bytes())
        if server.prototypes is not None:
            zf.writestr("prototypes.bin", P.serialize_collection(server.prototypes))
            zf.writestr("broadcast.bin", P.serialize_collection(server.broadcast))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ServerState, int, dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        params = ModelParams.from_bytes(zf.read("params.bin"))
        protos = view = None
        if "prototypes.bin" in zf.namelist():
            protos = P.deserialize_collection(zf.read("prototypes.bin"))
            view = P.deserialize_collection(zf.read("broadcast.bin"))
    server = ServerState(
        params,
        meta["round"],
        protos,
        view,
        tuple(meta["delay_counters"]),
        tuple(meta["full_clients"]),
        meta["opc_executions"],
    )
    return server, meta["seed"], meta["extra"]


def make_executor(workers: int):
    return ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
