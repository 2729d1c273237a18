"""Compact bidirectional-RNN sequence tagger with an expandable label head.

Checkpoint container (all integers little-endian)::

    8 bytes   magic b"FINRCKPT"
    uint32    container version (currently 1)
    uint32    header length H
    H bytes   UTF-8 JSON header, sorted keys: tagger config, entity types,
              registry version, task index, round index, and the ordered list
              of tensors as {"name", "shape"}
    ...       each tensor in header order, row-major float64
    uint32    CRC-32 of every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .corpus import LabelRegistry, Sentence
from .errors import ConfigurationError, ContractViolation, DeserializationError

MAGIC = b"FINRCKPT"
FORMAT_VERSION = 1
HEAD_INIT_STD = 0.02


@dataclass(frozen=True)
class TaggerConfig:
    vocab_hash_buckets: int = 4096
    embedding_dim: int = 32
    # 48 rather than 64 so the default 12 feature groups divide it
    hidden_dim: int = 48
    encoder_layers: int = 1
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab_hash_buckets, self.embedding_dim, self.hidden_dim, self.encoder_layers) < 1:
            raise ConfigurationError("tagger sizes must be positive")
        if self.hidden_dim % 2:
            raise ConfigurationError("hidden_dim must be even (two recurrent directions)")

    def check_groups(self, groups: int) -> None:
        if groups < 1 or self.hidden_dim % groups:
            raise ConfigurationError(f"hidden_dim {self.hidden_dim} not divisible by {groups} groups")


@lru_cache(maxsize=1 << 16)
def _crc(token: str) -> int:
    return zlib.crc32(token.encode("utf-8"))


def token_bucket(token: str, buckets: int) -> int:
    return _crc(token) % buckets


def _head_rows(seed: int, key: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 1, _crc(key)])
    return rng.normal(0.0, HEAD_INIT_STD, size=(2 if key else 1, dim))


@dataclass
class Batch:
    """Index bookkeeping for a list of sentences packed token-after-token."""

    lengths: np.ndarray
    offsets: np.ndarray
    buckets: np.ndarray
    fwd_idx: np.ndarray
    rev_idx: np.ndarray
    unpack_fwd: np.ndarray
    unpack_rev: np.ndarray

    @property
    def num_tokens(self) -> int:
        return int(self.lengths.sum())

    def rows(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i] + self.lengths[i]))


def make_batch(sentences: Sequence[Sentence] | Sequence[Sequence[str]], buckets: int) -> Batch:
    toks = [s.tokens if isinstance(s, Sentence) else tuple(s) for s in sentences]
    if not toks or any(len(t) == 0 for t in toks):
        raise ContractViolation("forward needs non-empty sentences")
    lengths = np.array([len(t) for t in toks], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    steps = int(lengths.max())
    pos = np.arange(steps)[None, :]
    live = pos < lengths[:, None]
    fwd = np.where(live, offsets[:, None] + pos, -1)
    rev = np.where(live, offsets[:, None] + lengths[:, None] - 1 - pos, -1)
    row = np.arange(len(toks))[:, None] * steps
    unpack_fwd = (row + pos)[live]
    unpack_rev = (row + lengths[:, None] - 1 - pos)[live]
    flat = np.array([token_bucket(w, buckets) for t in toks for w in t], dtype=np.int64)
    return Batch(lengths, offsets, flat, fwd, rev, unpack_fwd, unpack_rev)


class Tagger:
    """Mutable model: a parameter dict plus the label registry it predicts over."""

    def __init__(self, config: TaggerConfig, registry: LabelRegistry, params: dict[str, np.ndarray]):
        self.config = config
        self.registry = registry
        self.params = params
        if params["head.weight"].shape[0] != registry.num_labels:
            raise ContractViolation("head size does not match registry version")

    @classmethod
    def initialize(cls, config: TaggerConfig, registry: LabelRegistry) -> "Tagger":
        rng = np.random.default_rng([config.seed, 0])
        e, h = config.embedding_dim, config.hidden_dim // 2
        params = {"embedding": rng.normal(0.0, 1.0, size=(config.vocab_hash_buckets, e))}
        width = e
        for layer in range(config.encoder_layers):
            for direction in ("fwd", "bwd"):
                p = f"encoder.{layer}.{direction}."
                params[p + "w_in"] = rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, h))
                params[p + "w_rec"] = rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, h))
                params[p + "bias"] = np.zeros(h)
            width = config.hidden_dim
        params["head.weight"] = _head_rows(config.seed, "", config.hidden_dim)
        params["head.bias"] = np.zeros(1)
        model = cls(config, registry.at_version(0), params)
        return model.expand_head(registry.announced)

    @property
    def num_labels(self) -> int:
        return self.registry.num_labels

    def copy(self) -> "Tagger":
        return Tagger(self.config, self.registry, {k: v.copy() for k, v in self.params.items()})

    # -- forward --------------------------------------------------------

    def encode(self, batch: Batch, params: Mapping | None = None):
        """Packed hidden states (tokens x hidden_dim) and logits (tokens x labels)."""
        p = self.params if params is None else params
        b, steps = batch.fwd_idx.shape
        half = self.config.hidden_dim // 2
        src = p["embedding"]
        idx = batch.buckets
        for layer in range(self.config.encoder_layers):
            pre = f"encoder.{layer}."
            outs = []
            for direction, gather, unpack in (
                ("fwd", batch.fwd_idx, batch.unpack_fwd),
                ("bwd", batch.rev_idx, batch.unpack_rev),
            ):
                rows = np.where(gather >= 0, idx[np.maximum(gather, 0)], -1) if idx is not None else gather
                x = nx.reshape(nx.take_rows(src, rows.ravel()), (b, steps, -1))
                hs = nx.rnn_scan(x, p[pre + direction + ".w_in"], p[pre + direction + ".w_rec"], p[pre + direction + ".bias"])
                outs.append(nx.take_rows(nx.reshape(hs, (b * steps, half)), unpack))
            src = nx.concat(outs, axis=1)
            idx = None
        hidden = src
        logits = nx.add(nx.matmul(hidden, nx.transpose(p["head.weight"])), p["head.bias"])
        return hidden, logits

    def forward(self, sentence: Sentence | Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        batch = make_batch([sentence], self.config.vocab_hash_buckets)
        hidden, logits = self.encode(batch)
        return hidden.value, logits.value

    def forward_many(self, sentences: Sequence[Sentence], batch_size: int = 64):
        """Per-sentence (hidden, logits) arrays, computed in packed chunks."""
        out = []
        for start in range(0, len(sentences), batch_size):
            chunk = sentences[start : start + batch_size]
            batch = make_batch(chunk, self.config.vocab_hash_buckets)
            hidden, logits = self.encode(batch)
            for i in range(len(chunk)):
                r = batch.rows(i)
                out.append((hidden.value[r], logits.value[r]))
        return out

    def predict(self, sentences: Sequence[Sentence], batch_size: int = 64) -> list[list[int]]:
        return [list(np.argmax(lg, axis=1)) for _, lg in self.forward_many(sentences, batch_size)]

    # -- head growth and updates -----------------------------------------

    def expand_head(self, new_types: Sequence[str]) -> "Tagger":
        new_types = tuple(new_types)
        announced = self.registry.announced
        expected = self.registry.entity_types[len(announced) : len(announced) + len(new_types)]
        if set(new_types) & set(announced) or len(set(new_types)) != len(new_types):
            raise ConfigurationError(f"types already in the head: {sorted(set(new_types) & set(announced))}")
        if tuple(new_types) != expected:
            raise ConfigurationError(f"types must be announced in registry order; expected {expected}")
        if not new_types:
            return self
        params = dict(self.params)
        rows = [params["head.weight"]] + [_head_rows(self.config.seed, t, self.config.hidden_dim) for t in new_types]
        params["head.weight"] = np.concatenate(rows, axis=0)
        params["head.bias"] = np.concatenate([params["head.bias"], np.zeros(2 * len(new_types))])
        return Tagger(self.config, self.registry.at_version(self.registry.version + len(new_types)), params)

    def sgd_step(self, gradients: Mapping[str, np.ndarray], lr: float) -> "Tagger":
        for name, g in gradients.items():
            theta = self.params[name]
            if g.shape != theta.shape:
                raise ContractViolation(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        if lr == 0:
            return self
        for name, g in gradients.items():
            self.params[name] = self.params[name] - lr * g
        return self

    def checkpoint(self, task_index: int = 0, round_index: int = 0) -> "Checkpoint":
        return Checkpoint.create(self.config, self.registry, self.params, task_index, round_index)


def sgd_step(model: Tagger, gradients: Mapping[str, np.ndarray], lr: float) -> Tagger:
    return model.sgd_step(gradients, lr)


def expand_head(model: Tagger, new_types: Sequence[str]) -> Tagger:
    return model.expand_head(new_types)


@dataclass(frozen=True)
class Checkpoint:
    config: TaggerConfig
    registry: LabelRegistry
    task_index: int
    round_index: int
    params: Mapping[str, np.ndarray] = field(repr=False)

    @classmethod
    def create(cls, config, registry, params, task_index=0, round_index=0) -> "Checkpoint":
        frozen = {}
        for name in sorted(params):
            arr = np.array(params[name], dtype=np.float64, copy=True)
            arr.setflags(write=False)
            frozen[name] = arr
        return cls(config, registry, int(task_index), int(round_index), MappingProxyType(frozen))

    def to_tagger(self) -> Tagger:
        return Tagger(self.config, self.registry, {k: v.copy() for k, v in self.params.items()})

    def forward(self, sentence):
        return Tagger(self.config, self.registry, dict(self.params)).forward(sentence)

    def serialize(self) -> bytes:
        header = {
            "config": asdict(self.config),
            "entity_types": list(self.registry.entity_types),
            "registry_version": self.registry.version,
            "task_index": self.task_index,
            "round_index": self.round_index,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()],
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head]
        parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self.params.values()]
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def deserialize(cls, data: bytes) -> "Checkpoint":
        if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
            raise DeserializationError("not a checkpoint (bad magic or too short)")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise DeserializationError("checksum mismatch (truncated or corrupted)")
        version, hlen = struct.unpack_from("<II", body, len(MAGIC))
        if version != FORMAT_VERSION:
            raise DeserializationError(f"unsupported checkpoint version {version}")
        pos = len(MAGIC) + 8
        try:
            header = json.loads(body[pos : pos + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DeserializationError(f"bad header: {exc}") from exc
        pos += hlen
        params = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) * 8
            if pos + n > len(body):
                raise DeserializationError(f"tensor {spec['name']} truncated")
            params[spec["name"]] = np.frombuffer(body, dtype="<f8", count=n // 8, offset=pos).reshape(shape)
            pos += n
        if pos != len(body):
            raise DeserializationError("trailing bytes after tensors")
        registry = LabelRegistry(tuple(header["entity_types"]), header["registry_version"])
        return cls.create(TaggerConfig(**header["config"]), registry, params, header["task_index"], header["round_index"])


def serialize(ckpt: Checkpoint) -> bytes:
    return ckpt.serialize()


def deserialize(data: bytes) -> Checkpoint:
    return Checkpoint.deserialize(data)


def forward(model: Tagger | Checkpoint, sentence):
    return model.forward(sentence)


def gradients(model: Tagger, loss_fn, batch: Batch):
    """Tape gradients of ``loss_fn(hidden, logits)`` w.r.t. every parameter.

    Returns ``(loss Var or result, {name: grad})``; ``loss_fn`` may return a
    Var or an object with an ``objective`` Var attribute.
    """
    with nx.GradientTape() as tape:
        watched = {k: tape.watch(v, name=k) for k, v in model.params.items()}
        hidden, logits = model.encode(batch, watched)
        result = loss_fn(hidden, logits)
        root = getattr(result, "objective", result)
    grads = tape.gradient(root, list(watched.values()))
    return result, dict(zip(watched.keys(), grads))
