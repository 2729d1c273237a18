"""Exact-match span scoring for BIO sequences."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .errors import ContractViolation

Span = tuple[str, int, int]


def extract_spans(tags: Sequence[str]) -> set[Span]:
    """Maximal ``B-X (I-X)*`` runs as (type, start, end) with exclusive end.

    An ``I-X`` that does not continue an X span opens a new span.
    """
    spans: set[Span] = set()
    start, kind = None, None
    for i, tag in enumerate(tags):
        prefix, _, name = tag.partition("-")
        if prefix == "I" and kind == name:
            continue
        if kind is not None:
            spans.add((kind, start, i))
            start, kind = None, None
        if prefix in ("B", "I"):
            start, kind = i, name
    if kind is not None:
        spans.add((kind, start, len(tags)))
    return spans


def _f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    # same value as 2pr/(p+r), but rounded once
    f = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return p, r, f


@dataclass(frozen=True)
class TypeScore:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return _f1(self.tp, self.fp, self.fn)[0]

    @property
    def recall(self) -> float:
        return _f1(self.tp, self.fp, self.fn)[1]

    @property
    def f1(self) -> float:
        return _f1(self.tp, self.fp, self.fn)[2]


@dataclass(frozen=True)
class GroupScore:
    micro_f1: Optional[float]
    macro_f1: Optional[float]
    types: tuple[str, ...] = ()


@dataclass(frozen=True)
class SpanMetrics:
    per_type: Mapping[str, TypeScore]
    micro_f1: float
    macro_f1: float
    groups: Mapping[str, GroupScore] = field(default_factory=dict)

    def f1(self, name: str) -> float:
        return self.per_type[name].f1


def _aggregate(scores: Mapping[str, TypeScore], types: Iterable[str]) -> GroupScore:
    # types with no gold and no predicted spans are left out of the macro mean
    evaluated = tuple(t for t in types if t in scores and (scores[t].tp + scores[t].fp + scores[t].fn) > 0)
    if not evaluated:
        return GroupScore(None, None, ())
    tp = sum(scores[t].tp for t in evaluated)
    fp = sum(scores[t].fp for t in evaluated)
    fn = sum(scores[t].fn for t in evaluated)
    macro = sum(scores[t].f1 for t in evaluated) / len(evaluated)
    return GroupScore(_f1(tp, fp, fn)[2], macro, evaluated)


def span_f1(
    predictions: Sequence[Sequence[str]],
    golds: Sequence[Sequence[str]],
    type_groups: Optional[Mapping[str, Iterable[str]]] = None,
    types: Optional[Iterable[str]] = None,
) -> SpanMetrics:
    """Micro/macro span F1 over aligned tag sequences.

    ``types`` restricts scoring to the listed entity types (spans of other
    types are ignored); by default every type seen in either side is scored.
    ``type_groups`` maps a group name to its types for per-group breakdowns.
    """
    if len(predictions) != len(golds):
        raise ContractViolation(f"{len(predictions)} predicted vs {len(golds)} gold sentences")
    tp: Counter = Counter()
    fp: Counter = Counter()
    fn: Counter = Counter()
    for pred, gold in zip(predictions, golds):
        if len(pred) != len(gold):
            raise ContractViolation("prediction and gold sentence lengths differ")
        ps, gs = extract_spans(pred), extract_spans(gold)
        for s in ps & gs:
            tp[s[0]] += 1
        for s in ps - gs:
            fp[s[0]] += 1
        for s in gs - ps:
            fn[s[0]] += 1
    observed = set(tp) | set(fp) | set(fn)
    scope = sorted(observed if types is None else set(types))
    scores = {t: TypeScore(tp[t], fp[t], fn[t]) for t in scope}
    overall = _aggregate(scores, scope)
    groups = {name: _aggregate(scores, list(members)) for name, members in (type_groups or {}).items()}
    return SpanMetrics(
        per_type=scores,
        micro_f1=overall.micro_f1 if overall.micro_f1 is not None else 0.0,
        macro_f1=overall.macro_f1 if overall.macro_f1 is not None else 0.0,
        groups=groups,
    )
