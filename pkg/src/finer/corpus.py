"""CoNLL ingestion, incremental task streams, and Non-IID client shards."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError

log = logging.getLogger(__name__)

NON_ENTITY = 0


@dataclass(frozen=True)
class LabelRegistry:
    """Label ids: ``O`` is 0, type ``k`` (alphabetical) owns ``B=1+2k`` and ``I=2+2k``.

    ``version`` is the number of types announced so far; because types are
    announced alphabetically the ids of a type never move between versions.
    """

    entity_types: tuple[str, ...] = ()
    version: int = 0

    def __post_init__(self):
        if tuple(sorted(self.entity_types)) != tuple(self.entity_types):
            raise ConfigurationError("entity types must be sorted alphabetically")
        if len(set(self.entity_types)) != len(self.entity_types):
            raise ConfigurationError("duplicate entity type in registry")
        if not 0 <= self.version <= len(self.entity_types):
            raise ConfigurationError(f"registry version {self.version} out of range")

    @property
    def num_labels(self) -> int:
        return 1 + 2 * self.version

    @property
    def announced(self) -> tuple[str, ...]:
        return self.entity_types[: self.version]

    def at_version(self, version: int) -> "LabelRegistry":
        return LabelRegistry(self.entity_types, version)

    def type_index(self, name: str) -> int:
        try:
            return self.entity_types.index(name)
        except ValueError:
            raise KeyError(f"unknown entity type {name!r}") from None

    def begin_id(self, name: str) -> int:
        return 1 + 2 * self.type_index(name)

    def inside_id(self, name: str) -> int:
        return 2 + 2 * self.type_index(name)

    def label_ids(self, names: Iterable[str]) -> list[int]:
        out = []
        for n in names:
            out.extend((self.begin_id(n), self.inside_id(n)))
        return out

    def type_of(self, label: int) -> str | None:
        if label == NON_ENTITY:
            return None
        return self.entity_types[(label - 1) // 2]

    def tag(self, label: int) -> str:
        if label == NON_ENTITY:
            return "O"
        prefix = "B" if label % 2 == 1 else "I"
        return f"{prefix}-{self.type_of(label)}"

    def tags(self, labels: Sequence[int]) -> list[str]:
        return [self.tag(int(x)) for x in labels]

    def label_id(self, tag: str) -> int:
        if tag == "O":
            return NON_ENTITY
        prefix, _, name = tag.partition("-")
        if prefix == "B":
            return self.begin_id(name)
        if prefix == "I":
            return self.inside_id(name)
        raise KeyError(f"not a BIO tag: {tag!r}")


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.labels):
            raise ValueError("tokens and labels differ in length")

    def __len__(self):
        return len(self.tokens)

    def types(self, registry: LabelRegistry) -> set[str]:
        return {registry.type_of(x) for x in self.labels if x != NON_ENTITY}


@dataclass(frozen=True)
class Corpus:
    sentences: tuple[Sentence, ...]
    registry: LabelRegistry
    repairs: int = 0

    def __len__(self):
        return len(self.sentences)


def _split_tag(tag: str, path, lineno) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    prefix, sep, name = tag.partition("-")
    if not sep or prefix not in ("B", "I") or not name:
        raise ParseError(f"malformed BIO label {tag!r}", path, lineno)
    return prefix, name


def repair_bio(tags: Sequence[str]) -> tuple[list[str], int]:
    """Turn every I-X that does not continue an X span into B-X."""
    out, fixes, prev = [], 0, None
    for tag in tags:
        if tag.startswith("I-") and prev != tag[2:]:
            tag = "B-" + tag[2:]
            fixes += 1
        out.append(tag)
        prev = tag[2:] if tag != "O" else None
    return out, fixes


def parse_conll(text: str, path=None) -> Corpus:
    raw: list[tuple[list[str], list[str]]] = []
    tokens: list[str] = []
    tags: list[str] = []
    for lineno, line in enumerate(text.split("\n"), 1):
        line = line.rstrip("\r")
        if not line.strip():
            if tokens:
                raw.append((tokens, tags))
                tokens, tags = [], []
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0]:
            raise ParseError(f"expected <token><TAB><label>, got {line!r}", path, lineno)
        _split_tag(parts[1], path, lineno)
        tokens.append(parts[0])
        tags.append(parts[1])
    if tokens:
        raw.append((tokens, tags))

    types = sorted({t[2:] for _, ts in raw for t in ts if t != "O"})
    registry = LabelRegistry(tuple(types), len(types))
    sentences, repairs = [], 0
    for toks, ts in raw:
        fixed, n = repair_bio(ts)
        repairs += n
        sentences.append(Sentence(tuple(toks), tuple(registry.label_id(t) for t in fixed)))
    if repairs:
        log.warning("repaired %d I- labels without a matching span head", repairs)
    return Corpus(tuple(sentences), registry, repairs)


def load_corpus(path) -> Corpus:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read corpus: {exc}", path) from exc
    return parse_conll(text, path)


def format_conll(sentences: Iterable[Sentence], registry: LabelRegistry) -> str:
    blocks = []
    for s in sentences:
        blocks.append("".join(f"{tok}\t{registry.tag(lab)}\n" for tok, lab in zip(s.tokens, s.labels)))
    return "\n".join(blocks)


def write_conll(path, sentences: Iterable[Sentence], registry: LabelRegistry) -> None:
    Path(path).write_text(format_conll(sentences, registry), encoding="utf-8")


def mask_labels(sentence: Sentence, keep: Iterable[int]) -> Sentence:
    keep = set(keep)
    labels = tuple(x if x in keep else NON_ENTITY for x in sentence.labels)
    if labels == sentence.labels:
        return sentence
    return Sentence(sentence.tokens, labels)


def mask_to_types(sentence: Sentence, registry: LabelRegistry, types: Iterable[str]) -> Sentence:
    return mask_labels(sentence, registry.label_ids(types))


@dataclass(frozen=True)
class TaskSlice:
    task_index: int
    new_types: tuple[str, ...]
    sentences: tuple[Sentence, ...]
    registry: LabelRegistry = field(default=LabelRegistry(), repr=False)

    @property
    def size(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class TaskStream:
    slices: tuple[TaskSlice, ...]
    registry: LabelRegistry
    schedule: str

    def __len__(self):
        return len(self.slices)

    def __iter__(self):
        return iter(self.slices)

    def seen_types(self, task_index: int) -> tuple[str, ...]:
        out: list[str] = []
        for sl in self.slices[:task_index]:
            out.extend(sl.new_types)
        return tuple(out)


def build_task_stream(corpus: Corpus, base: int, step: int, seed: int = 0) -> TaskStream:
    """Split the corpus into alphabetical task slices.

    Sentences are placed greedily in input order: each goes to the eligible
    task (one whose new types it mentions) with the fewest sentences so far,
    ties to the earliest task; entity-free sentences go to the smallest task
    overall. ``seed`` is accepted for interface symmetry; placement is
    deterministic.
    """
    del seed
    types = corpus.registry.entity_types
    n = len(types)
    if base < 1 or step < 1 or base > n or (n - base) % step:
        raise ConfigurationError(f"cannot split {n} types into base={base}, step={step}")
    groups = [types[:base]] + [types[i : i + step] for i in range(base, n, step)]
    owner = {name: k for k, grp in enumerate(groups) for name in grp}
    buckets: list[list[Sentence]] = [[] for _ in groups]
    for s in corpus.sentences:
        eligible = sorted({owner[t] for t in s.types(corpus.registry)})
        candidates = eligible or range(len(groups))
        best = min(candidates, key=lambda k: (len(buckets[k]), k))
        buckets[best].append(s)
    slices = tuple(
        TaskSlice(
            task_index=k + 1,
            new_types=tuple(grp),
            sentences=tuple(mask_to_types(s, corpus.registry, grp) for s in buckets[k]),
            registry=corpus.registry,
        )
        for k, grp in enumerate(groups)
    )
    return TaskStream(slices, corpus.registry, f"{base}-{step}")


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    task_index: int
    assigned_types: tuple[str, ...]
    sentences: tuple[Sentence, ...] = field(repr=False)

    def __len__(self):
        return len(self.sentences)


def shard_clients(
    task: TaskSlice,
    receiving_clients: Sequence[int],
    subsample_fraction: float,
    seed: int,
    max_retries: int = 10,
) -> list[ClientShard]:
    """Give each client a random nonempty subset of the task's types and a subsample.

    The subsample keeps ``floor(fraction * eligible)`` sentences, where eligible
    sentences mention at least one assigned type; a subset whose subsample
    would be empty is redrawn.
    """
    if not receiving_clients:
        raise ConfigurationError("no receiving clients")
    if not 0 < subsample_fraction <= 1:
        raise ConfigurationError(f"subsample fraction {subsample_fraction} outside (0, 1]")
    registry = task.registry
    types = task.new_types
    present = [s.types(registry) for s in task.sentences]
    shards = []
    for cid in receiving_clients:
        rng = np.random.default_rng([seed, task.task_index, cid])
        for _ in range(max_retries + 1):
            mask = int(rng.integers(1, 2 ** len(types)))
            chosen = tuple(t for i, t in enumerate(types) if mask >> i & 1)
            eligible = [i for i, ts in enumerate(present) if ts & set(chosen)]
            count = int(np.floor(subsample_fraction * len(eligible)))
            if count > 0:
                break
        else:
            raise ConfigurationError(
                f"client {cid}: no sentences for any drawn type subset of task {task.task_index}"
            )
        picked = np.sort(rng.choice(len(eligible), size=count, replace=False))
        keep = registry.label_ids(chosen)
        sents = tuple(mask_labels(task.sentences[eligible[i]], keep) for i in picked)
        shards.append(ClientShard(cid, task.task_index, chosen, sents))
    return shards
