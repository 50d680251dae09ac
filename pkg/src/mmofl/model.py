"""Multimodal classifier: per-modality encoders feeding a fusion head.

Block 0 of every parameter/gradient vector is the head; block ``m + 1`` is
the encoder of modality ``m`` (modalities are 0-indexed in the API).
The head consumes the modality features concatenated in modality order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

ENCODER_KINDS = ("identity", "linear", "mlp1")
HEAD_KINDS = ("linear", "mlp1")

ENCODED = "encoded"
ZERO_FILLED = "zero_filled"
SUBSTITUTED = "prototype_substituted"
SOURCE_TAGS = (ENCODED, ZERO_FILLED, SUBSTITUTED)

PARAMS_MAGIC = b"MMOFLPRM"


@dataclass(frozen=True)
class ModelConfig:
    num_modalities: int
    input_dims: tuple[int, ...]
    feature_dim: int
    num_classes: int
    encoder_kind: tuple[str, ...] = ("linear",)
    head_kind: str = "linear"
    hidden_dim: int = 32

    def __post_init__(self):
        m = self.num_modalities
        if m < 1:
            raise ValueError("num_modalities must be >= 1")
        kinds = self.encoder_kind
        if isinstance(kinds, str):
            kinds = (kinds,) * m
        kinds = tuple(kinds)
        if len(kinds) == 1 and m > 1:
            kinds = kinds * m
        object.__setattr__(self, "encoder_kind", kinds)
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        if len(self.input_dims) != m or len(kinds) != m:
            raise ValueError(
                f"expected {m} input_dims and encoder kinds, got "
                f"{len(self.input_dims)} and {len(kinds)}"
            )
        if min(self.input_dims) < 1 or self.feature_dim < 1 or self.num_classes < 1 or self.hidden_dim < 1:
            raise ValueError("all dimensions must be positive")
        for i, kind in enumerate(kinds):
            if kind not in ENCODER_KINDS:
                raise ValueError(f"unknown encoder kind {kind!r}")
            if kind == "identity" and self.input_dims[i] != self.feature_dim:
                raise ValueError(
                    f"identity encoder for modality {i} needs input_dim == feature_dim "
                    f"({self.input_dims[i]} != {self.feature_dim})"
                )
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.head_kind!r}")

    @property
    def convex(self) -> bool:
        """Identity encoders with a linear head: multinomial logistic regression."""
        return self.head_kind == "linear" and all(k == "identity" for k in self.encoder_kind)

    def layer_shapes(self, block: int) -> list[tuple[int, int]]:
        if block == 0:
            fan_in = self.num_modalities * self.feature_dim
            if self.head_kind == "linear":
                return [(fan_in, self.num_classes)]
            return [(fan_in, self.hidden_dim), (self.hidden_dim, self.num_classes)]
        kind = self.encoder_kind[block - 1]
        fan_in = self.input_dims[block - 1]
        if kind == "identity":
            return []
        if kind == "linear":
            return [(fan_in, self.feature_dim)]
        return [(fan_in, self.hidden_dim), (self.hidden_dim, self.feature_dim)]

    def block_sizes(self) -> tuple[int, ...]:
        return tuple(
            sum(i * o + o for i, o in self.layer_shapes(b)) for b in range(self.num_modalities + 1)
        )

    def to_dict(self) -> dict:
        return {
            "num_modalities": self.num_modalities,
            "input_dims": list(self.input_dims),
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "encoder_kind": list(self.encoder_kind),
            "head_kind": self.head_kind,
            "hidden_dim": self.hidden_dim,
        }


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    blocks: tuple[np.ndarray, ...]

    def __post_init__(self):
        sizes = self.config.block_sizes()
        if len(self.blocks) != len(sizes):
            raise ValueError(f"expected {len(sizes)} blocks, got {len(self.blocks)}")
        for b, (arr, n) in enumerate(zip(self.blocks, sizes)):
            if arr.shape != (n,):
                raise ValueError(f"block {b} has shape {arr.shape}, expected ({n},)")

    @property
    def head(self) -> np.ndarray:
        return self.blocks[0]

    @property
    def encoders(self) -> tuple[np.ndarray, ...]:
        return self.blocks[1:]

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.blocks) if self.blocks else np.zeros(0)

    @classmethod
    def from_flat(cls, config: ModelConfig, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        sizes = config.block_sizes()
        if vec.shape != (sum(sizes),):
            raise ValueError(f"flat vector has shape {vec.shape}, expected ({sum(sizes)},)")
        cuts = np.cumsum(sizes)[:-1]
        return cls(config, tuple(b.copy() for b in np.split(vec, cuts)))

    def layers(self, block: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into one block, W shaped (fan_in, fan_out)."""
        out = []
        arr = self.blocks[block]
        pos = 0
        for fan_in, fan_out in self.config.layer_shapes(block):
            w = arr[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            out.append((w, arr[pos : pos + fan_out]))
            pos += fan_out
        return out

    def to_bytes(self) -> bytes:
        desc = json.dumps(
            {"config": self.config.to_dict(), "block_sizes": list(self.config.block_sizes())},
            sort_keys=True,
        ).encode()
        payload = self.flat().astype("<f8").tobytes()
        return PARAMS_MAGIC + struct.pack("<I", len(desc)) + desc + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParams":
        if blob[:8] != PARAMS_MAGIC:
            raise ValueError("not a parameter blob")
        (n,) = struct.unpack("<I", blob[8:12])
        desc = json.loads(blob[12 : 12 + n])
        config = model_config_from_dict(desc["config"])
        vec = np.frombuffer(blob[12 + n :], dtype="<f8").astype(np.float64)
        return cls.from_flat(config, vec)

    def bit_identical(self, other: "ModelParams") -> bool:
        return self.config == other.config and self.flat().tobytes() == other.flat().tobytes()


def model_config_from_dict(d: Mapping) -> ModelConfig:
    return ModelConfig(
        num_modalities=int(d["num_modalities"]),
        input_dims=tuple(d["input_dims"]),
        feature_dim=int(d["feature_dim"]),
        num_classes=int(d["num_classes"]),
        encoder_kind=tuple(d["encoder_kind"]) if not isinstance(d["encoder_kind"], str) else d["encoder_kind"],
        head_kind=d.get("head_kind", "linear"),
        hidden_dim=int(d.get("hidden_dim", 32)),
    )


@dataclass(frozen=True)
class FeatureBlock:
    features: tuple[np.ndarray, ...]
    sources: tuple[str, ...]

    def __post_init__(self):
        if len(self.features) != len(self.sources):
            raise ValueError("one source tag per modality block")
        rows = {f.shape[0] for f in self.features}
        if len(rows) > 1:
            raise ValueError(f"feature blocks disagree on batch size: {sorted(rows)}")
        for tag in self.sources:
            if tag not in SOURCE_TAGS:
                raise ValueError(f"unknown source tag {tag!r}")


@dataclass(frozen=True)
class GradientVector:
    blocks: tuple[np.ndarray, ...]
    # active[i] is False when block i was hard-zeroed
    active: tuple[bool, ...] = field(default=())

    def flat(self) -> np.ndarray:
        return np.concatenate(self.blocks)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    blocks = []
    for b in range(config.num_modalities + 1):
        parts = []
        for fan_in, fan_out in config.layer_shapes(b):
            s = 1.0 / np.sqrt(fan_in)
            parts.append(rng.uniform(-s, s, size=fan_in * fan_out))
            parts.append(rng.uniform(-s, s, size=fan_out))
        blocks.append(np.concatenate(parts) if parts else np.zeros(0))
    return ModelParams(config, tuple(blocks))


def zero_params(config: ModelConfig) -> ModelParams:
    return ModelParams(config, tuple(np.zeros(n) for n in config.block_sizes()))


def _mlp_forward(layers, x):
    acts = [x]
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def _mlp_backward(layers, acts, grad_out, need_input_grad):
    g = grad_out
    last = len(layers) - 1
    parts = []
    for i in range(last, -1, -1):
        w, _ = layers[i]
        if i < last:
            g = g * (1.0 - acts[i + 1] ** 2)
        parts.append(g.sum(axis=0))
        parts.append((acts[i].T @ g).ravel())
        if i > 0 or need_input_grad:
            g = g @ w.T
    flat = np.concatenate(parts[::-1]) if parts else np.zeros(0)
    return flat, (g if need_input_grad else None)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def _check_batch(params: ModelParams, batch, substitutes):
    cfg = params.config
    n = len(batch.labels)
    if n == 0:
        raise ValueError("empty batch")
    for m in range(cfg.num_modalities):
        if m in substitutes:
            block, tag = substitutes[m]
            if block.shape != (n, cfg.feature_dim):
                raise ValueError(f"override for modality {m} has shape {block.shape}")
            if tag not in SOURCE_TAGS or tag == ENCODED:
                raise ValueError(f"bad override tag {tag!r}")
            if not np.all(np.isfinite(block)):
                raise ValueError(f"non-finite override for modality {m}")
            continue
        x = batch.data[m]
        if x is None:
            raise ValueError(f"modality {m} has neither data nor an override")
        if x.shape != (n, cfg.input_dims[m]):
            raise ValueError(f"modality {m} data has shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite input in modality {m}")


def _forward(params, batch, substitutes):
    substitutes = substitutes or {}
    _check_batch(params, batch, substitutes)
    cfg = params.config
    feats, tags, caches = [], [], []
    for m in range(cfg.num_modalities):
        if m in substitutes:
            block, tag = substitutes[m]
            feats.append(block)
            tags.append(tag)
            caches.append(None)
        else:
            z, acts = _mlp_forward(params.layers(m + 1), batch.data[m])
            feats.append(z)
            tags.append(ENCODED)
            caches.append(acts)
    fused = np.concatenate(feats, axis=1)
    logits, head_acts = _mlp_forward(params.layers(0), fused)
    return FeatureBlock(tuple(feats), tuple(tags)), logits, caches, head_acts


def forward(params: ModelParams, batch, substitutes: Mapping[int, tuple[np.ndarray, str]] | None = None):
    """Return ``(features, logits, loss)``; loss is mean softmax cross-entropy.

    ``substitutes`` maps a modality index to ``(block, tag)``; the block
    (N x feature_dim) replaces the encoder output verbatim.
    """
    feats, logits, _, _ = _forward(params, batch, substitutes)
    return feats, logits, cross_entropy(logits, batch.labels)


def value_and_grad(
    params: ModelParams,
    batch,
    substitutes: Mapping[int, tuple[np.ndarray, str]] | None = None,
    mask: Sequence[bool] | None = None,
) -> tuple[float, GradientVector]:
    cfg = params.config
    mask = tuple(bool(v) for v in mask) if mask is not None else (True,) * cfg.num_modalities
    if len(mask) != cfg.num_modalities:
        raise ValueError("mask needs one entry per modality")
    feats, logits, caches, head_acts = _forward(params, batch, substitutes)
    labels = batch.labels
    n = len(labels)
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    need_in = any(mask[m] and caches[m] is not None and cfg.layer_shapes(m + 1) for m in range(cfg.num_modalities))
    head_grad, dfused = _mlp_backward(params.layers(0), head_acts, dlogits, need_in)
    blocks = [head_grad]
    d = cfg.feature_dim
    for m in range(cfg.num_modalities):
        size = params.blocks[m + 1].size
        if not mask[m] or caches[m] is None or size == 0:
            blocks.append(np.zeros(size))
            continue
        g, _ = _mlp_backward(params.layers(m + 1), caches[m], dfused[:, m * d : (m + 1) * d], False)
        blocks.append(g)
    return loss, GradientVector(tuple(blocks), (True,) + mask)


def backward(params: ModelParams, batch, substitutes=None, mask=None) -> GradientVector:
    return value_and_grad(params, batch, substitutes, mask)[1]


def sgd_step(params: ModelParams, grad: GradientVector, eta: float) -> ModelParams:
    if eta <= 0:
        raise ValueError("eta must be positive")
    if len(grad.blocks) != len(params.blocks):
        raise ValueError("gradient layout does not match parameters")
    active = grad.active or (True,) * len(params.blocks)
    out = []
    for p, g, on in zip(params.blocks, grad.blocks, active):
        if p.shape != g.shape:
            raise ValueError("gradient layout does not match parameters")
        out.append(p - eta * g if on else p)
    return ModelParams(params.config, tuple(out))


def average_params(models: Sequence[ModelParams] | Mapping[int, ModelParams]) -> ModelParams:
    """Element-wise mean, reduced in ascending client order.

    Computed as ``first + sum(x_k - first) / K`` so that identical inputs
    come back bit-exact.
    """
    if isinstance(models, Mapping):
        models = [models[k] for k in sorted(models)]
    models = list(models)
    if not models:
        raise ValueError("cannot average an empty list of models")
    cfg = models[0].config
    for other in models[1:]:
        if other.config != cfg:
            raise ValueError("cannot average models with different layouts")
    k = len(models)
    out = []
    for b, base in enumerate(models[0].blocks):
        acc = np.zeros_like(base)
        for other in models[1:]:
            acc += other.blocks[b] - base
        out.append(base + acc / k)
    return ModelParams(cfg, tuple(out))


def predict(params: ModelParams, batch) -> np.ndarray:
    _, logits, _ = forward(params, batch)
    return np.argmax(logits, axis=1)


def predict_accuracy(params: ModelParams, test) -> float:
    if len(test.labels) == 0:
        raise ValueError("empty test batch")
    if not all(test.availability):
        raise ValueError("accuracy is evaluated on full-modality data")
    return float(np.mean(predict(params, test) == test.labels))


def encode(params: ModelParams, modality: int, x: np.ndarray) -> np.ndarray:
    """Features of one modality's raw input under its encoder."""
    z, _ = _mlp_forward(params.layers(modality + 1), x)
    return z
