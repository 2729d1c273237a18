"""Deterministic synthetic NER corpus for desk-scale experiments.

Each entity type owns a small lexicon of entity words and a few cue words
that tend to precede its mentions; the rest of the vocabulary is filler.
Sentences mix several types, so masking in later tasks hides earlier types
exactly as in real incremental NER data.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, LabelRegistry, Sentence

DEFAULT_TYPES = ("DATE", "DRUG", "LOC", "ORG", "PER", "TIME")


@dataclass(frozen=True)
class SyntheticSpec:
    entity_types: tuple[str, ...] = DEFAULT_TYPES
    vocab_size: int = 200
    entity_words_per_type: int = 15
    cue_words_per_type: int = 3
    min_length: int = 5
    max_length: int = 12
    # probabilities of 0, 1, 2, 3 mentions per sentence
    mention_counts: tuple[float, ...] = (0.1, 0.4, 0.35, 0.15)
    cue_probability: float = 0.7
    two_word_probability: float = 0.35


def build_lexicon(spec: SyntheticSpec):
    """Entity words and cues per type, plus filler, totalling ``vocab_size`` words."""
    entity = {t: tuple(f"{t.lower()}{i:02d}" for i in range(spec.entity_words_per_type)) for t in spec.entity_types}
    cues = {t: tuple(f"cue{t.lower()}{i}" for i in range(spec.cue_words_per_type)) for t in spec.entity_types}
    used = sum(len(v) for v in entity.values()) + sum(len(v) for v in cues.values())
    if used >= spec.vocab_size:
        raise ValueError("vocabulary too small for the requested lexicons")
    filler = tuple(f"w{i:03d}" for i in range(spec.vocab_size - used))
    return entity, cues, filler


def generate_sentences(n: int, seed: int, spec: SyntheticSpec = SyntheticSpec()) -> Corpus:
    entity, cues, filler = build_lexicon(spec)
    types = tuple(sorted(spec.entity_types))
    registry = LabelRegistry(types, len(types))
    rng = np.random.default_rng([seed, 404])
    sentences = []
    for _ in range(n):
        k = int(rng.choice(len(spec.mention_counts), p=spec.mention_counts))
        chunks: list[list[tuple[str, str]]] = []
        for _ in range(k):
            kind = types[int(rng.integers(len(types)))]
            chunk = []
            if rng.random() < spec.cue_probability:
                chunk.append((cues[kind][int(rng.integers(len(cues[kind])))], "O"))
            words = 2 if rng.random() < spec.two_word_probability else 1
            for j in range(words):
                chunk.append((entity[kind][int(rng.integers(len(entity[kind])))], ("B-" if j == 0 else "I-") + kind))
            chunks.append(chunk)
        used = sum(len(c) for c in chunks)
        target = max(int(rng.integers(spec.min_length, spec.max_length + 1)), used + k)
        pieces: list[list[tuple[str, str]]] = [[(filler[int(rng.integers(len(filler)))], "O")] for _ in range(target - used)]
        # keep at least one filler token between consecutive mentions
        slots = sorted(rng.choice(len(pieces) + 1, size=k, replace=False)) if k else []
        out: list[tuple[str, str]] = []
        ci = 0
        for pos in range(len(pieces) + 1):
            while ci < k and slots[ci] == pos:
                out.extend(chunks[ci])
                ci += 1
            if pos < len(pieces):
                out.extend(pieces[pos])
        sentences.append(Sentence(tuple(w for w, _ in out), tuple(registry.label_id(t) for _, t in out)))
    return Corpus(tuple(sentences), registry, 0)


def generate_benchmark(train: int = 1200, test: int = 300, seed: int = 7, spec: SyntheticSpec = SyntheticSpec()):
    """Train and held-out test corpora drawn from the same generator."""
    return generate_sentences(train, seed, spec), generate_sentences(test, seed + 1, spec)
