"""Regret against a hindsight comparator, communication accounting, CSV export."""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datagen import RoundBatch
from .model import ModelConfig, ModelParams, forward, log_softmax, zero_params

CSV_COLUMNS = (
    "round",
    "train_loss",
    "comparator_loss",
    "cum_regret",
    "test_acc",
    "model_bits",
    "proto_bits",
    "opc_count",
    "lambda",
    "alpha",
    "b",
    "delay",
    "strategy",
    "seed",
)
_INT_COLUMNS = {"round", "model_bits", "proto_bits", "opc_count", "b", "delay", "seed"}
_STR_COLUMNS = {"strategy"}


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    train_loss: float
    comparator_loss: float
    cum_regret: float
    test_acc: float
    model_bits_up: int
    model_bits_down: int
    proto_bits_up: int
    proto_bits_down: int
    model_bits_total: int  # cumulative, up + down
    proto_bits_total: int  # cumulative, up + down
    opc_executions_cumulative: int
    fallback_rows: int = 0


@dataclass(frozen=True)
class WeightedData:
    """Pooled samples with per-sample weights; the weighted CE sum equals sum_t F_t."""

    features: np.ndarray  # (n, M*d) concatenated modality inputs
    labels: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class ComparatorOracle:
    params: ModelParams
    objective: float
    grad_norm: float
    iterations: int
    converged: bool
    kind: str = "exact"  # "exact" | "proxy"


def pool_batches(rounds: Sequence[Sequence]) -> WeightedData:
    """Pool round batches (``rounds[t][k]``) so each round carries weight one."""
    feats, labels, weights = [], [], []
    for batches in rounds:
        K = len(batches)
        for b in batches:
            feats.append(np.concatenate(b.data, axis=1))
            labels.append(b.labels)
            weights.append(np.full(len(b.labels), 1.0 / (K * len(b.labels))))
    if not feats:
        raise ValueError("nothing to pool")
    return WeightedData(np.concatenate(feats), np.concatenate(labels), np.concatenate(weights))


def _softmax_objective(A, X1, y, w):
    logits = X1 @ A
    logp = log_softmax(logits)
    n = len(y)
    obj = float(-(w * logp[np.arange(n), y]).sum())
    p = np.exp(logp)
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    g *= w[:, None]
    return obj, X1.T @ g, p


def fit_comparator(
    pooled: WeightedData,
    config: ModelConfig,
    tolerance: float = 1e-8,
    max_iter: int = 100,
) -> ComparatorOracle:
    """Minimize the pooled objective for a convex-mode model by damped Newton.

    The softmax Hessian is singular along the all-classes shift, so steps are
    taken with the minimum-norm least-squares solution.
    """
    if not config.convex:
        raise ValueError("the hindsight comparator needs identity encoders and a linear head")
    X1 = np.hstack([pooled.features, np.ones((len(pooled.labels), 1))])
    y, w = pooled.labels, pooled.weights
    D1, C = X1.shape[1], config.num_classes
    if D1 - 1 != config.num_modalities * config.feature_dim:
        raise ValueError("pooled features do not match the model input width")
    A = np.zeros((D1, C))
    obj, g, p = _softmax_objective(A, X1, y, w)
    it = 0
    while np.linalg.norm(g) >= tolerance and it < max_iter:
        H = np.empty((D1, C, D1, C))
        for c in range(C):
            for e in range(c, C):
                s = w * (p[:, c] * (c == e) - p[:, c] * p[:, e])
                blk = X1.T @ (X1 * s[:, None])
                H[:, c, :, e] = blk
                H[:, e, :, c] = blk
        Hm = H.reshape(D1 * C, D1 * C)
        step = -np.linalg.lstsq(Hm, g.ravel(), rcond=None)[0].reshape(D1, C)
        slope = float((g * step).sum())
        if slope >= 0:  # numerically flat; fall back to steepest descent
            step, slope = -g, -float((g * g).sum())
        lr = 1.0
        while True:
            cand = A + lr * step
            obj_c, g_c, p_c = _softmax_objective(cand, X1, y, w)
            if obj_c <= obj + 1e-4 * lr * slope or lr < 1e-10:
                break
            lr *= 0.5
        A, obj, g, p = cand, obj_c, g_c, p_c
        it += 1
    gn = float(np.linalg.norm(g))
    params = ModelParams(config, (A.ravel().copy(),) + zero_params(config).blocks[1:])
    return ComparatorOracle(params, obj, gn, it, gn < tolerance)


def weighted_objective(params: ModelParams, pooled: WeightedData) -> float:
    """Sum of per-round losses for any model, via the pooled weighted samples."""
    cfg = params.config
    cuts = np.cumsum(cfg.input_dims)[:-1]
    parts = np.split(pooled.features, cuts, axis=1)
    batch = RoundBatch(tuple(parts), pooled.labels, (True,) * cfg.num_modalities)
    _, logits, _ = forward(params, batch)
    logp = log_softmax(logits)
    return float(-(pooled.weights * logp[np.arange(len(pooled.labels)), pooled.labels]).sum())


def proxy_comparator(candidates: Sequence[ModelParams], pooled: WeightedData) -> ComparatorOracle:
    """Best post-hoc iterate; a stand-in for the hindsight optimum in non-convex mode."""
    if not candidates:
        raise ValueError("no candidate iterates")
    scores = [weighted_objective(p, pooled) for p in candidates]
    best = int(np.argmin(scores))
    return ComparatorOracle(candidates[best], scores[best], math.nan, len(candidates), False, "proxy")


def regret_series(train_losses: Sequence[float], comparator_losses: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Per-round regret terms and their running sum."""
    a = np.asarray(train_losses, dtype=np.float64)
    b = np.asarray(comparator_losses, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("loss trace and comparator trace cover different rounds")
    per = a - b
    return per, np.cumsum(per)


@dataclass(frozen=True)
class CommTotals:
    model_up: int = 0
    model_down: int = 0
    proto_up: int = 0
    proto_down: int = 0

    @property
    def model(self) -> int:
        return self.model_up + self.model_down

    @property
    def proto(self) -> int:
        return self.proto_up + self.proto_down


def account_communication(events: Iterable) -> CommTotals:
    totals = {"model_up": 0, "model_down": 0, "proto_up": 0, "proto_down": 0}
    for ev in events:
        key = f"{ev.kind}_{ev.direction}"
        if key not in totals:
            raise ValueError(f"unknown traffic class {key!r}")
        totals[key] += int(ev.bits)
    return CommTotals(**totals)


def model_bits_per_round(num_clients: int, blob_bits: int) -> int:
    """Every client uploads its local model and downloads the new global one."""
    return num_clients * 2 * blob_bits


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def record_rows(records: Sequence[MetricsRecord], meta: Mapping) -> list[dict]:
    rows = []
    for r in records:
        rows.append(
            {
                "round": r.round,
                "train_loss": r.train_loss,
                "comparator_loss": r.comparator_loss,
                "cum_regret": r.cum_regret,
                "test_acc": r.test_acc,
                "model_bits": r.model_bits_total,
                "proto_bits": r.proto_bits_total,
                "opc_count": r.opc_executions_cumulative,
                **{k: meta[k] for k in ("lambda", "alpha", "b", "delay", "strategy", "seed")},
            }
        )
    return rows


def write_csv_atomic(path: str | Path, columns: Sequence[str], rows: Iterable[Mapping]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_fmt(row[c]) for c in columns])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def export_csv(records: Sequence[MetricsRecord] | Sequence[Mapping], path: str | Path, meta: Mapping | None = None) -> Path:
    """One row per round in the fixed column order; reals printed with 17 significant digits."""
    if records and isinstance(records[0], MetricsRecord):
        rows = record_rows(records, meta or {})
    else:
        rows = list(records)
    return write_csv_atomic(path, CSV_COLUMNS, rows)


def read_csv(path: str | Path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            typed = {}
            for k, v in row.items():
                if k in _STR_COLUMNS:
                    typed[k] = v
                elif k in _INT_COLUMNS:
                    typed[k] = int(v)
                else:
                    typed[k] = float(v)
            out.append(typed)
    return out
