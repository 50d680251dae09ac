"""Prototypical modality mitigation: online prototype construction (class-mean
encoder features from full-modality clients, aggregated per round and folded
into a persistent running mean) and online prototype substitution for missing
modalities. Also the uniform scalar quantizer and the occurrence-counting
delay trigger used to cut prototype traffic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import ModelParams, encode

COLLECTION_MAGIC = b"MMOPCOLL"
LOCAL_MAGIC = b"MMOPLOCL"
_HEAD = ">HHIBB"  # M, C, d, bits, normalize


def l2_normalize_rows(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalize the last axis; returns ``(normalized, nonzero_mask)``.

    Zero rows are left as zeros.
    """
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    nonzero = norm[..., 0] > 0
    out = np.where(norm > 0, v / np.where(norm > 0, norm, 1.0), 0.0)
    return out, nonzero


@dataclass(frozen=True)
class LocalPrototypeSet:
    client_id: int
    round_index: int
    vectors: np.ndarray  # (M, C, d); rows without support are zero
    counts: np.ndarray  # (M, C) support sizes, 0 = no entry

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    def entries(self) -> dict[tuple[int, int], tuple[np.ndarray, int]]:
        return {
            (int(m), int(c)): (self.vectors[m, c], int(self.counts[m, c]))
            for m, c in zip(*np.nonzero(self.present))
        }


@dataclass(frozen=True)
class PrototypeMatrix:
    """Persistent per-(modality, class) prototypes kept by the server."""

    vectors: np.ndarray  # (M, C, d)
    update_count: np.ndarray  # (M, C)
    last_update: np.ndarray  # (M,), -1 = never
    normalize: bool = True

    @classmethod
    def empty(cls, M: int, C: int, d: int, normalize: bool = True) -> "PrototypeMatrix":
        return cls(np.zeros((M, C, d)), np.zeros((M, C), dtype=np.int64), np.full(M, -1, dtype=np.int64), normalize)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.vectors.shape

    @property
    def initialized(self) -> np.ndarray:
        return self.update_count > 0

    def equals(self, other: "PrototypeMatrix") -> bool:
        return (
            self.normalize == other.normalize
            and self.vectors.tobytes() == other.vectors.tobytes()
            and np.array_equal(self.update_count, other.update_count)
            and np.array_equal(self.last_update, other.last_update)
        )


@dataclass(frozen=True)
class TemporalPrototypes:
    vectors: np.ndarray  # (M, C, d)
    present: np.ndarray  # (M, C) bool


def build_local_prototypes(
    params: ModelParams,
    batch,
    normalize: bool = True,
    modalities: Iterable[int] | None = None,
) -> LocalPrototypeSet:
    if not batch.full:
        raise ValueError("local prototypes are only built from full-modality batches")
    cfg = params.config
    M, C, d = cfg.num_modalities, cfg.num_classes, cfg.feature_dim
    wanted = set(range(M) if modalities is None else modalities)
    labels = batch.labels
    counts_c = np.bincount(labels, minlength=C)
    vectors = np.zeros((M, C, d))
    counts = np.zeros((M, C), dtype=np.int64)
    for m in sorted(wanted):
        z = encode(params, m, batch.data[m])
        sums = np.zeros((C, d))
        np.add.at(sums, labels, z)
        has = counts_c > 0
        vectors[m, has] = sums[has] / counts_c[has, None]
        counts[m] = counts_c
    if normalize:
        vectors, nonzero = l2_normalize_rows(vectors)
        counts = np.where(nonzero, counts, 0)
    return LocalPrototypeSet(batch.client_id, batch.round_index, vectors, counts)


def aggregate_temporal(
    local_sets: Mapping[int, LocalPrototypeSet] | Sequence[LocalPrototypeSet],
    full_clients: Iterable[int],
    normalize: bool = True,
) -> TemporalPrototypes | None:
    """Unweighted mean over full-modality clients holding an entry; ``None`` if nobody contributed."""
    if not isinstance(local_sets, Mapping):
        local_sets = {s.client_id: s for s in local_sets}
    members = [local_sets[k] for k in sorted(set(full_clients)) if k in local_sets]
    if not members:
        return None
    M, C, d = members[0].vectors.shape
    total = np.zeros((M, C, d))
    n = np.zeros((M, C), dtype=np.int64)
    for s in members:
        total += np.where(s.present[..., None], s.vectors, 0.0)
        n += s.present
    present = n > 0
    vectors = np.zeros((M, C, d))
    vectors[present] = total[present] / n[present][:, None]
    if normalize:
        vectors, nonzero = l2_normalize_rows(vectors)
        present &= nonzero
    if not present.any():
        return None
    return TemporalPrototypes(vectors, present)


def update_persistent(matrix: PrototypeMatrix, temporal: TemporalPrototypes | None, round_index: int) -> PrototypeMatrix:
    """Fold temporal prototypes into the per-(m, c) running mean."""
    if temporal is None or not temporal.present.any():
        return matrix
    vec = matrix.vectors.copy()
    count = matrix.update_count.copy()
    last = matrix.last_update.copy()
    sel = temporal.present
    n = count[sel] + 1
    vec[sel] = ((n - 1)[:, None] * vec[sel] + temporal.vectors[sel]) / n[:, None]
    count[sel] = n
    if matrix.normalize:
        vec[sel] = l2_normalize_rows(vec[sel])[0]
    last[sel.any(axis=1)] = round_index
    return PrototypeMatrix(vec, count, last, matrix.normalize)


def missing_rows(matrix: PrototypeMatrix, labels: np.ndarray, modality: int) -> int:
    """How many samples would fall back to a zero substitute."""
    return int(np.count_nonzero(~matrix.initialized[modality, labels]))


def substitute(matrix: PrototypeMatrix, labels: np.ndarray, modality: int, fallback: bool = True) -> np.ndarray:
    """Stack the persistent prototype of each sample's class: an (N x d) block."""
    labels = np.asarray(labels)
    if not fallback and missing_rows(matrix, labels, modality):
        absent = sorted(set(labels[~matrix.initialized[modality, labels]].tolist()))
        raise KeyError(f"no prototype for modality {modality}, classes {absent}")
    # uninitialized rows are stored as zeros
    return matrix.vectors[modality, labels].copy()


# --- quantization ---------------------------------------------------------------

@dataclass(frozen=True)
class QuantizerConfig:
    bits: int = 32

    def __post_init__(self):
        if not 2 <= self.bits <= 32:
            raise ValueError("bits must lie in [2, 32]")

    @property
    def enabled(self) -> bool:
        return self.bits < 32


@dataclass(frozen=True)
class QuantizedPayload:
    bits: int
    shape: tuple[int, ...]
    levels: np.ndarray | None  # uint integer levels, None on the bypass path
    lo: float
    hi: float
    raw: np.ndarray | None = None

    @property
    def bit_count(self) -> int:
        n = int(np.prod(self.shape))
        if self.levels is None:
            return n * 64
        return n * self.bits + 2 * 64

    def dequantize(self) -> np.ndarray:
        if self.levels is None:
            return self.raw.reshape(self.shape).copy()
        return dequantize_levels(self.levels, self.lo, self.hi, self.bits).reshape(self.shape)


def dequantize_levels(q: np.ndarray, lo: float, hi: float, bits: int) -> np.ndarray:
    if hi == lo:
        return np.full(q.shape, lo, dtype=np.float64)
    return lo + q.astype(np.float64) * ((hi - lo) / (2**bits - 1))


def quantize_upload(values: np.ndarray, config: QuantizerConfig) -> QuantizedPayload:
    """Uniform scalar quantization on [min, max] with 2**bits levels."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    flat = v.ravel()
    if not config.enabled:
        return QuantizedPayload(32, v.shape, None, 0.0, 0.0, flat.copy())
    if flat.size == 0:
        return QuantizedPayload(config.bits, v.shape, np.zeros(0, dtype=np.uint32), 0.0, 0.0)
    lo, hi = float(flat.min()), float(flat.max())
    top = 2**config.bits - 1
    if hi == lo:
        q = np.zeros(flat.size, dtype=np.uint32)
    else:
        q = np.clip(np.rint((flat - lo) / ((hi - lo) / top)), 0, top).astype(np.uint32)
    return QuantizedPayload(config.bits, v.shape, q, lo, hi)


def _pack(q: np.ndarray, bits: int) -> bytes:
    if q.size == 0:
        return b""
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint32)
    bitmat = ((q[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitmat.ravel()).tobytes()


def _unpack(buf: bytes, n: int, bits: int) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=np.uint32)
    allbits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8))[: n * bits].reshape(n, bits)
    weights = (1 << np.arange(bits - 1, -1, -1, dtype=np.uint64)).astype(np.uint64)
    return (allbits.astype(np.uint64) @ weights).astype(np.uint32)


def _encode_grid(magic: bytes, extra: bytes, vectors, counts, bits: int, normalize: bool) -> bytes:
    M, C, d = vectors.shape
    head = magic + struct.pack(_HEAD, M, C, d, bits, int(normalize)) + extra
    head += np.asarray(counts, dtype=">u4").tobytes()
    rows = vectors[np.asarray(counts) > 0]
    if rows.size == 0:
        return head
    payload = quantize_upload(rows, QuantizerConfig(bits))
    if payload.levels is None:
        return head + rows.astype("<f8").tobytes()
    return head + _pack(payload.levels, bits) + struct.pack("<dd", payload.lo, payload.hi)


def _decode_grid(blob: bytes, magic: bytes, extra_fmt: str):
    if blob[:8] != magic:
        raise ValueError("bad magic in prototype blob")
    pos = 8
    try:
        M, C, d, bits, norm = struct.unpack_from(_HEAD, blob, pos)
        pos += struct.calcsize(_HEAD)
        extra = struct.unpack_from(extra_fmt.format(M=M), blob, pos)
        pos += struct.calcsize(extra_fmt.format(M=M))
        counts = np.frombuffer(blob, dtype=">u4", count=M * C, offset=pos).astype(np.int64).reshape(M, C)
        pos += 4 * M * C
    except struct.error as exc:
        raise ValueError(f"truncated prototype blob: {exc}") from None
    except ValueError as exc:
        raise ValueError(f"truncated prototype blob: {exc}") from None
    if not 2 <= bits <= 32:
        raise ValueError(f"bad bit width {bits} in prototype blob")
    mask = counts > 0
    n = int(mask.sum()) * d
    vectors = np.zeros((M, C, d))
    body = blob[pos:]
    if n == 0:
        if body:
            raise ValueError("trailing bytes in prototype blob")
    elif bits == 32:
        if len(body) != 8 * n:
            raise ValueError("prototype payload has the wrong length")
        vectors[mask] = np.frombuffer(body, dtype="<f8").reshape(-1, d)
    else:
        nbytes = (n * bits + 7) // 8
        if len(body) != nbytes + 16:
            raise ValueError("prototype payload has the wrong length")
        q = _unpack(body[:nbytes], n, bits)
        lo, hi = struct.unpack("<dd", body[nbytes:])
        vectors[mask] = dequantize_levels(q, lo, hi, bits).reshape(-1, d)
    return vectors, counts, bits, bool(norm), extra


def serialize_collection(matrix: PrototypeMatrix, quantizer: QuantizerConfig = QuantizerConfig()) -> bytes:
    M = matrix.shape[0]
    extra = np.asarray(matrix.last_update, dtype=">i4").tobytes()
    assert len(extra) == 4 * M
    return _encode_grid(COLLECTION_MAGIC, extra, matrix.vectors, matrix.update_count, quantizer.bits, matrix.normalize)


def deserialize_collection(blob: bytes) -> PrototypeMatrix:
    vectors, counts, _, norm, last = _decode_grid(blob, COLLECTION_MAGIC, ">{M}i")
    return PrototypeMatrix(vectors, counts, np.asarray(last, dtype=np.int64), norm)


def serialize_local(local: LocalPrototypeSet, quantizer: QuantizerConfig = QuantizerConfig(), normalize: bool = True) -> bytes:
    extra = struct.pack(">II", local.client_id, local.round_index)
    return _encode_grid(LOCAL_MAGIC, extra, local.vectors, local.counts, quantizer.bits, normalize)


def deserialize_local(blob: bytes) -> LocalPrototypeSet:
    vectors, counts, _, _, (client, rnd) = _decode_grid(blob, LOCAL_MAGIC, ">II")
    return LocalPrototypeSet(client, rnd, vectors, counts)


# --- delayed update ------------------------------------------------------------

@dataclass(frozen=True)
class DelayConfig:
    interval: int = 0

    def __post_init__(self):
        if self.interval < 0:
            raise ValueError("delay interval must be >= 0")


@dataclass
class DelayState:
    """Per-modality occurrence counters since the last OPC."""

    config: DelayConfig
    counters: list[int] = field(default_factory=list)

    @classmethod
    def fresh(cls, config: DelayConfig, num_modalities: int) -> "DelayState":
        return cls(config, [0] * num_modalities)


def modality_observed(schedule, t: int, modality: int) -> bool:
    """True when at least one full-modality client sees ``modality`` at round ``t``."""
    return any(all(schedule.available(t, k)) for k in range(schedule.num_clients))


def should_run_opc(delay: DelayState, modality: int, observed: bool) -> bool:
    """Advance the counter of ``modality`` and report whether OPC fires now."""
    u = delay.config.interval
    if u == 0:
        return True
    if observed:
        delay.counters[modality] += 1
    if delay.counters[modality] >= u:
        delay.counters[modality] = 0
        return True
    return False


def predicted_opc_count(occurrences: int, interval: int) -> int:
    return occurrences if interval <= 1 else occurrences // interval
