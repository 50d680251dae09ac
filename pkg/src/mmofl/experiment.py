"""Experiment configuration (YAML) and the multi-round driver."""

from __future__ import annotations

import dataclasses
import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from . import datagen as D
from . import metrics as MX
from .model import ModelConfig, ModelParams, forward, init_params
from .protocol import (
    Client,
    PMMConfig,
    ServerState,
    Strategy,
    TrainConfig,
    load_checkpoint,
    make_executor,
    run_round,
    save_checkpoint,
)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" | "external"
    path: str | None = None
    manifest: str = "manifest.json"
    test_fraction: float = 0.2
    synthetic: D.SyntheticSpec = D.SyntheticSpec()


@dataclass(frozen=True)
class ScheduleConfig:
    lam: float = 0.5
    mode: str = D.SYNCHRONIZED


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    data: DataConfig = DataConfig()
    partition: D.PartitionConfig = D.PartitionConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    train: TrainConfig = TrainConfig()
    pmm: PMMConfig = PMMConfig()
    seeds: tuple[int, ...] = (0,)
    regret: str = "auto"  # "auto" | "off"
    comparator_tol: float = 1e-8
    output_dir: str = "runs"

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """``cfg.with_overrides(train={"strategy": "PM"}, schedule={"lam": 0.1})``."""
        out = self
        for name, changes in sections.items():
            cur = getattr(out, name)
            if isinstance(changes, Mapping):
                cur = dataclasses.replace(cur, **changes)
            else:
                cur = changes
            out = dataclasses.replace(out, **{name: cur})
        return out


# --- YAML mapping ------------------------------------------------------------------

TEMPLATE = """\
# Experiment configuration. Every key is optional except where noted;
# the values below are the defaults.
model:
  num_modalities: 2          # M
  input_dims: [16, 16]       # raw input width per modality
  feature_dim: 32            # d, encoder output width (prototype width)
  num_classes: 6             # C
  encoder_kind: [linear, linear]   # identity | linear | mlp1, per modality
  head_kind: mlp1            # linear | mlp1
  hidden_dim: 32             # width of mlp1 hidden layers
data:
  source: synthetic          # synthetic | external
  path: null                 # directory holding manifest.json (external only)
  manifest: manifest.json
  test_fraction: 0.2         # held-out full-modality test split
  synthetic:
    num_classes: 6
    input_dims: [16, 16]
    class_center_separation: 1.0
    noise_std: 1.0
    modality_informativeness: [1.0, 1.0]
    total_samples: 10299
    seed: 0
partition:
  num_clients: 5             # K
  alpha: 10.0                # Dirichlet non-IID level (larger = closer to IID)
  initial_pool_per_client: 2000
  window_size: 500           # per-round local dataset size
  churn_per_round: 20        # samples replaced per round (FIFO)
schedule:
  lambda: 0.5                # fraction of rounds with a missing modality
  mode: synchronized         # synchronized | independent
train:
  rounds: 400                # T, total rounds
  local_iters: 1             # E
  eta0: 0.1
  decay: 0.95                # per-round multiplicative decay
  eta_floor: 0.001
  strategy: PMM              # FM | PM | ZF | PMM
pmm:
  normalize: true            # unit-L2 prototypes
  bits: 32                   # quantizer bits per component (32 = full precision)
  delay: 0                   # OPC interval u in modality occurrences (0 = every round)
  fallback: true             # zero substitute for prototypes never built
experiment:
  seeds: [0]
  regret: auto               # auto (exact comparator in convex mode, proxy otherwise) | off
  comparator_tol: 1.0e-8
  output_dir: runs
"""

_SECTIONS = ("model", "data", "partition", "schedule", "train", "pmm", "experiment")


def _build(cls, raw: Any, path: str, problems: list[str], rename: Mapping[str, str] | None = None, nested=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        problems.append(f"{path}: expected a mapping")
        return None
    rename = rename or {}
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = rename.get(key, key)
        if name not in names:
            problems.append(f"{path}.{key}: unknown field")
            continue
        if nested and name in nested:
            value = nested[name](value, f"{path}.{key}")
            if value is None:
                continue
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path}: {exc}")
        return None


def config_from_dict(raw: Mapping) -> ExperimentConfig:
    problems: list[str] = []
    if not isinstance(raw, Mapping):
        raise ConfigError(["<root>: expected a mapping"])
    for key in raw:
        if key not in _SECTIONS:
            problems.append(f"{key}: unknown section")
    if "model" not in raw:
        problems.append("model: required section missing")
    model = _build(ModelConfig, raw.get("model"), "model", problems)
    data = _build(
        DataConfig,
        raw.get("data"),
        "data",
        problems,
        nested={"synthetic": lambda v, p: _build(D.SyntheticSpec, v, p, problems)},
    )
    part = _build(D.PartitionConfig, raw.get("partition"), "partition", problems)
    sched = _build(ScheduleConfig, raw.get("schedule"), "schedule", problems, rename={"lambda": "lam"})
    train = _build(TrainConfig, raw.get("train"), "train", problems)
    pmm = _build(PMMConfig, raw.get("pmm"), "pmm", problems)
    exp = raw.get("experiment") or {}
    extra = {}
    for key, value in exp.items():
        if key not in ("seeds", "regret", "comparator_tol", "output_dir"):
            problems.append(f"experiment.{key}: unknown field")
        else:
            extra[key] = tuple(value) if isinstance(value, list) else value
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(model, data, part, sched, train, pmm, **extra)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig, dataset: D.MultimodalDataset | None = None) -> None:
    """Cross-module consistency checks; raises ``ConfigError`` listing every problem."""
    p: list[str] = []
    m = cfg.model
    if cfg.data.source not in ("synthetic", "external"):
        p.append(f"data.source: unknown source {cfg.data.source!r}")
    if cfg.data.source == "external" and not cfg.data.path and dataset is None:
        p.append("data.path: required for external data")
    if not 0.0 < cfg.data.test_fraction < 1.0:
        p.append("data.test_fraction: must lie in (0, 1)")
    if cfg.data.source == "synthetic":
        s = cfg.data.synthetic
        if len(s.input_dims) != m.num_modalities:
            p.append(f"data.synthetic.input_dims: {len(s.input_dims)} modalities, model has {m.num_modalities}")
        elif s.input_dims != m.input_dims:
            p.append(f"data.synthetic.input_dims: {list(s.input_dims)} != model.input_dims {list(m.input_dims)}")
        if s.num_classes != m.num_classes:
            p.append(f"data.synthetic.num_classes: {s.num_classes} != model.num_classes {m.num_classes}")
    if dataset is not None:
        if dataset.num_modalities != m.num_modalities or dataset.input_dims != m.input_dims:
            p.append(f"data: dataset input dims {list(dataset.input_dims)} != model.input_dims {list(m.input_dims)}")
        if dataset.num_classes != m.num_classes:
            p.append(f"data: dataset has {dataset.num_classes} classes, model.num_classes is {m.num_classes}")
    if not 0.0 <= cfg.schedule.lam <= 1.0:
        p.append("schedule.lambda: must lie in [0, 1]")
    if cfg.schedule.mode not in (D.SYNCHRONIZED, D.INDEPENDENT):
        p.append(f"schedule.mode: unknown mode {cfg.schedule.mode!r}")
    if cfg.schedule.lam > 0 and m.num_modalities < 2 and cfg.train.strategy is not Strategy.FM:
        p.append("schedule.lambda: a single-modality model cannot lose a modality")
    if not 2 <= cfg.pmm.bits <= 32:
        p.append("pmm.bits: must lie in [2, 32]")
    if cfg.pmm.delay < 0:
        p.append("pmm.delay: must be >= 0")
    if cfg.regret not in ("auto", "off"):
        p.append(f"experiment.regret: unknown mode {cfg.regret!r}")
    if not cfg.seeds:
        p.append("experiment.seeds: at least one seed required")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        p.append("experiment.seeds: duplicate seeds")
    if p:
        raise ConfigError(p)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    s = cfg.data.synthetic
    return {
        "model": cfg.model.to_dict(),
        "data": {
            "source": cfg.data.source,
            "path": cfg.data.path,
            "manifest": cfg.data.manifest,
            "test_fraction": cfg.data.test_fraction,
            "synthetic": {
                "num_classes": s.num_classes,
                "input_dims": list(s.input_dims),
                "class_center_separation": s.class_center_separation,
                "noise_std": s.noise_std,
                "modality_informativeness": list(s.modality_informativeness),
                "total_samples": s.total_samples,
                "seed": s.seed,
            },
        },
        "partition": dataclasses.asdict(cfg.partition),
        "schedule": {"lambda": cfg.schedule.lam, "mode": cfg.schedule.mode},
        "train": {**dataclasses.asdict(cfg.train), "strategy": cfg.train.strategy.value},
        "pmm": dataclasses.asdict(cfg.pmm),
        "experiment": {
            "seeds": list(cfg.seeds),
            "regret": cfg.regret,
            "comparator_tol": cfg.comparator_tol,
            "output_dir": cfg.output_dir,
        },
    }


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return config_from_dict(raw or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def default_config() -> ExperimentConfig:
    return config_from_dict(yaml.safe_load(TEMPLATE))


# --- driver ----------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    records: list[MX.MetricsRecord]
    server: ServerState
    schedule: D.MissingSchedule
    comparator: MX.ComparatorOracle | None
    comm: list
    client_events: list
    meta: dict
    uploads: list = field(default_factory=list)  # per round: (global params, {client: local})

    def rows(self) -> list[dict]:
        return MX.record_rows(self.records, self.meta)


def load_dataset(cfg: ExperimentConfig) -> D.MultimodalDataset:
    if cfg.data.source == "external":
        ds = D.load_external(cfg.data.path, cfg.data.manifest)
        validate(cfg, ds)
        return ds
    return D.generate_synthetic(cfg.data.synthetic)


def effective_lambda(cfg: ExperimentConfig) -> float:
    return 0.0 if cfg.train.strategy is Strategy.FM else cfg.schedule.lam


def run_meta(cfg: ExperimentConfig, seed: int) -> dict:
    return {
        "lambda": effective_lambda(cfg),
        "alpha": float(cfg.partition.alpha),
        "b": cfg.pmm.bits,
        "delay": cfg.pmm.delay,
        "strategy": cfg.train.strategy.value,
        "seed": seed,
    }


def run_experiment(
    cfg: ExperimentConfig,
    seed: int,
    workers: int = 1,
    dataset: D.MultimodalDataset | None = None,
    checkpoint: str | Path | None = None,
    stop_after: int | None = None,
    resume: str | Path | None = None,
    keep_uploads: bool = False,
) -> ExperimentResult:
    """Run ``cfg.train.rounds`` rounds for one seed.

    ``stop_after`` ends early (used with ``checkpoint`` to write a resumable
    state); ``resume`` continues from such a checkpoint bit-exactly.
    """
    T = cfg.train.rounds
    if dataset is None:
        dataset = load_dataset(cfg)
    train_ds, test_ds = D.train_test_split(dataset, cfg.data.test_fraction, seed)
    partition = D.partition_dirichlet(train_ds, cfg.partition, seed)
    clients = [Client(k, s) for k, s in enumerate(D.make_streams(partition, cfg.partition))]
    M, K = cfg.model.num_modalities, cfg.partition.num_clients
    if cfg.train.strategy is Strategy.FM:
        schedule = D.empty_schedule(T, M, K)
    else:
        schedule = D.build_schedule(T, cfg.schedule.lam, M, K, cfg.schedule.mode, seed)
    test = D.full_batch(test_ds) if len(test_ds) else None
    meta = run_meta(cfg, seed)

    iterates: list[ModelParams] = []
    partial: list[dict] = []
    if resume is not None:
        server, ck_seed, extra = load_checkpoint(resume)
        if ck_seed != seed:
            raise ValueError(f"checkpoint was written for seed {ck_seed}, not {seed}")
        partial = extra["records"]
        with zipfile.ZipFile(resume) as zf:
            its = np.load(io.BytesIO(zf.read("iterates.npy")))
        iterates = [ModelParams.from_flat(cfg.model, v) for v in its]
    else:
        server = ServerState.initial(init_params(cfg.model, seed), cfg.train.strategy is Strategy.PMM, cfg.pmm.normalize)
        iterates = [server.params]

    outcomes = []
    uploads = []
    end = T if stop_after is None else min(T, stop_after)
    executor = make_executor(workers)
    try:
        while server.round < end:
            server, out = run_round(server, clients, train_ds, schedule, cfg.train, cfg.pmm, test, executor)
            outcomes.append(out)
            iterates.append(server.params)
            if keep_uploads:
                uploads.append((iterates[-2], out.uploads))
    finally:
        if executor is not None:
            executor.shutdown()

    rows = partial + [_outcome_row(o) for o in outcomes]
    _fill_opc(rows)
    if checkpoint is not None:
        _write_checkpoint(checkpoint, server, seed, rows, iterates)

    comparator = None
    comp_losses = [math.nan] * len(rows)
    if cfg.regret != "off" and rows and server.round == T:
        pooled = _pool_streams(train_ds, clients, T)
        if cfg.model.convex:
            comparator = MX.fit_comparator(pooled, cfg.model, cfg.comparator_tol)
        else:
            # iterates[t] is the model evaluated at round t; the final one never was
            comparator = MX.proxy_comparator(iterates[:T], pooled)
        comp_losses = [
            float(np.mean([forward(comparator.params, c.batch(train_ds, t))[2] for c in clients]))
            for t in range(T)
        ]
    _, cum = MX.regret_series([r["train_loss"] for r in rows], comp_losses)

    records = []
    mu = md = pu = pd = 0
    for r, cl, cr in zip(rows, comp_losses, cum):
        mu_t, md_t, pu_t, pd_t = r["model_up"], r["model_down"], r["proto_up"], r["proto_down"]
        mu, md, pu, pd = mu + mu_t, md + md_t, pu + pu_t, pd + pd_t
        records.append(
            MX.MetricsRecord(
                round=r["round"],
                train_loss=r["train_loss"],
                comparator_loss=cl,
                cum_regret=float(cr),
                test_acc=r["test_acc"],
                model_bits_up=mu_t,
                model_bits_down=md_t,
                proto_bits_up=pu_t,
                proto_bits_down=pd_t,
                model_bits_total=mu + md,
                proto_bits_total=pu + pd,
                opc_executions_cumulative=r["opc_cum"],
                fallback_rows=r["fallback_rows"],
            )
        )
    comm = [ev for o in outcomes for ev in o.comm]
    events = [ev for o in outcomes for ev in o.clients]
    return ExperimentResult(records, server, schedule, comparator, comm, events, meta, uploads)


def _outcome_row(o) -> dict:
    tot = MX.account_communication(o.comm)
    return {
        "round": o.round,
        "train_loss": o.train_loss,
        "test_acc": o.test_acc,
        "model_up": tot.model_up,
        "model_down": tot.model_down,
        "proto_up": tot.proto_up,
        "proto_down": tot.proto_down,
        "opc_runs": o.opc_runs,
        "fallback_rows": o.fallback_rows,
        "opc_cum": None,
    }


def _write_checkpoint(path, server, seed, rows, iterates):
    save_checkpoint(path, server, seed, {"records": rows})
    buf = io.BytesIO()
    np.save(buf, np.stack([p.flat() for p in iterates]))
    with zipfile.ZipFile(path, "a") as zf:
        zf.writestr("iterates.npy", buf.getvalue())


def _fill_opc(rows):
    total = 0
    for r in rows:
        total += r["opc_runs"]
        r["opc_cum"] = total


def _pool_streams(train_ds: D.MultimodalDataset, clients, T: int) -> MX.WeightedData:
    w = np.zeros(len(train_ds))
    K = len(clients)
    for c in clients:
        share = 1.0 / (K * c.stream.window_size)
        for t in range(T):
            np.add.at(w, c.stream.window(t), share)
    idx = np.flatnonzero(w)
    feats = np.concatenate([x[idx] for x in train_ds.data], axis=1)
    return MX.WeightedData(feats, train_ds.labels[idx], w[idx])
