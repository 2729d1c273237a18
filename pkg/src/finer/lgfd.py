"""LGFD objectives: feature and structural distillation, confidence-gated
pseudo-labels, cross-entropy on pseudo targets, type prototypes, and the
inter-type contrastive loss.

Loss functions accept plain arrays or tape ``Var`` objects and return a scalar
``Var``; old-model inputs are always treated as constants.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import numerics as nx
from .corpus import NON_ENTITY, Sentence
from .errors import ConfigurationError, ContractViolation


# target id of tokens that carry no supervision
IGNORE = -1


class Source(enum.Enum):
    GROUND_TRUTH = "ground_truth"
    PSEUDO = "pseudo"
    NON_ENTITY = "non_entity"
    IGNORED = "ignored"


@dataclass(frozen=True)
class ConfidenceRecord:
    token: int
    predicted: int
    entropy: float
    threshold: float
    accepted: bool


@dataclass(frozen=True)
class PseudoTarget:
    labels: tuple[int, ...]
    sources: tuple[Source, ...]
    confidence: tuple[ConfidenceRecord, ...] = ()

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class ThresholdTable:
    """Median old-model entropy per predicted old label (nats)."""

    alpha: Mapping[int, float] = field(default_factory=dict)

    def __contains__(self, label):
        return label in self.alpha

    def __getitem__(self, label):
        return self.alpha[label]

    def __len__(self):
        return len(self.alpha)


@dataclass
class PrototypeSet:
    """Per-type centroids; ``centroids`` row ``i`` belongs to ``types[i]``."""

    types: tuple
    centroids: object  # ndarray or Var, shape (K, d_h)
    side: str = "current"

    def __len__(self):
        return len(self.types)

    def as_dict(self) -> dict:
        values = nx.value_of(self.centroids)
        return {t: values[i] for i, t in enumerate(self.types)}


@dataclass
class LossBreakdown:
    ce: float
    skd: Optional[float]
    itc: Optional[float]
    lambda1: float
    lambda2: float
    total: float
    fd: Optional[float] = None
    kd: Optional[float] = None
    itc_skipped: bool = False
    objective: object = field(default=None, repr=False, compare=False)


# -- distillation ------------------------------------------------------------


def feature_distillation(h_old, h_new) -> nx.Var:
    old = nx.value_of(h_old)
    if old.shape != nx.value_of(h_new).shape:
        raise ContractViolation(f"hidden shapes differ: {old.shape} vs {nx.value_of(h_new).shape}")
    return nx.mean(nx.square(nx.sub(h_new, old)))


def group_columns(h, groups: int):
    """(n, d) -> (groups, n, d/groups) with contiguous column blocks."""
    n, d = nx.value_of(h).shape
    if groups < 1 or d % groups:
        raise ConfigurationError(f"hidden width {d} not divisible by {groups} groups")
    return nx.transpose(nx.reshape(h, (n, groups, d // groups)), (1, 0, 2))


def old_structure(h_old: np.ndarray, groups: int) -> np.ndarray:
    """Sign-normalized left factors of each column group of a constant hidden matrix."""
    return nx.svd_batched(nx.value_of(group_columns(np.asarray(h_old), groups))).u


def structural_distillation(h_old, h_new, groups: int, old_u: Optional[np.ndarray] = None) -> nx.Var:
    if nx.value_of(h_new).shape[0] < 1:
        raise ContractViolation("structural distillation needs at least one token")
    if old_u is None:
        old_u = old_structure(nx.value_of(h_old), groups)
    new_u = nx.svd_u(group_columns(h_new, groups))
    per_group = nx.mean(nx.square(nx.sub(new_u, old_u)), axis=(1, 2))
    return nx.mean(per_group)


def structural_distillation_packed(hidden, lengths, offsets, old_us: Sequence[np.ndarray], groups: int, weights) -> nx.Var:
    """Weighted sum over sentences of per-sentence structural distillation.

    Sentences of equal length share one batched SVD call; the math per
    sentence is identical to :func:`structural_distillation`.
    """
    d = nx.value_of(hidden).shape[1]
    if d % groups:
        raise ConfigurationError(f"hidden width {d} not divisible by {groups} groups")
    c = d // groups
    terms = []
    for n in sorted(set(int(x) for x in lengths)):
        members = [i for i, x in enumerate(lengths) if x == n]
        rows = np.concatenate([np.arange(offsets[i], offsets[i] + n) for i in members])
        block = nx.reshape(nx.getitem(hidden, rows), (len(members), n, groups, c))
        new_u = nx.svd_u(nx.transpose(block, (0, 2, 1, 3)))
        old_u = np.stack([old_us[i] for i in members])
        per_sentence = nx.mean(nx.square(nx.sub(new_u, old_u)), axis=(1, 2, 3))
        w = np.array([weights[i] for i in members])
        terms.append(nx.sum_(nx.mul(per_sentence, w)))
    out = terms[0]
    for t in terms[1:]:
        out = nx.add(out, t)
    return out


# -- pseudo-labeling ---------------------------------------------------------


def thresholds_from_probs(gold: Sequence[Sequence[int]], old_probs: Sequence[np.ndarray]) -> ThresholdTable:
    buckets: dict[int, list[float]] = {}
    for labels, probs in zip(gold, old_probs):
        candidates = np.asarray(labels) == NON_ENTITY
        if not np.any(candidates):
            continue
        p = probs[candidates]
        for e, u in zip(np.argmax(p, axis=1), nx.entropy_rows(p)):
            buckets.setdefault(int(e), []).append(float(u))
    return ThresholdTable({e: float(np.median(v)) for e, v in sorted(buckets.items())})


def compute_thresholds(old_model, sentences: Sequence[Sentence]) -> ThresholdTable:
    """Median entropy of the old model's prediction, keyed by the predicted
    label, over tokens whose ground truth is the non-entity label."""
    if not sentences:
        return ThresholdTable({})
    outputs = old_model.forward_many(list(sentences))
    probs = [nx.softmax(lg, axis=1) for _, lg in outputs]
    return thresholds_from_probs([s.labels for s in sentences], probs)


def pseudo_label(
    gt: Sequence[int], old_probs, thresholds: Optional[ThresholdTable], uncertain: str = "ignore"
) -> PseudoTarget:
    """Augment ground truth with confident old-model predictions on ``O`` tokens.

    Entity ground truth is copied. An ``O`` token takes the old model's argmax
    label (``O`` included) when its entropy is below that label's threshold.
    Otherwise the token is dropped from the loss (``uncertain="ignore"``) or
    kept as ``O`` (``uncertain="non_entity"``). ``thresholds=None`` accepts
    every old prediction, which is plain self-training.
    """
    if uncertain not in ("ignore", "non_entity"):
        raise ConfigurationError(f"unknown uncertain-token policy {uncertain!r}")
    probs = nx.as_tensor(old_probs)
    if probs.shape[0] != len(gt):
        raise ContractViolation("old probabilities and labels differ in length")
    pred = np.argmax(probs, axis=1)
    ent = nx.entropy_rows(probs)
    labels, sources, records = [], [], []
    for j, y in enumerate(gt):
        if y != NON_ENTITY:
            labels.append(int(y))
            sources.append(Source.GROUND_TRUTH)
            continue
        e, u = int(pred[j]), float(ent[j])
        # a NaN threshold (label absent from the table) never accepts
        alpha = float("inf") if thresholds is None else thresholds.alpha.get(e, float("nan"))
        accepted = u < alpha
        records.append(ConfidenceRecord(j, e, u, alpha, accepted))
        if accepted:
            labels.append(e)
            sources.append(Source.PSEUDO if e != NON_ENTITY else Source.NON_ENTITY)
        elif uncertain == "ignore":
            labels.append(IGNORE)
            sources.append(Source.IGNORED)
        else:
            labels.append(NON_ENTITY)
            sources.append(Source.NON_ENTITY)
    return PseudoTarget(tuple(labels), tuple(sources), tuple(records))


def plain_target(gt: Sequence[int]) -> PseudoTarget:
    return PseudoTarget(
        tuple(int(y) for y in gt),
        tuple(Source.GROUND_TRUTH if y != NON_ENTITY else Source.NON_ENTITY for y in gt),
    )


# -- classification ----------------------------------------------------------


def ce_loss(pseudo: PseudoTarget | Sequence[int], logits, weights=None) -> nx.Var:
    """Mean token cross-entropy against ``pseudo`` labels; ``IGNORE`` tokens add nothing.

    ``weights`` overrides the uniform 1/n token weighting (used for packed batches).
    """
    targets = np.asarray(pseudo.labels if isinstance(pseudo, PseudoTarget) else pseudo, dtype=np.int64)
    n, num_labels = nx.value_of(logits).shape
    if targets.shape != (n,):
        raise ContractViolation("one target per logit row required")
    if targets.size and (targets.max() >= num_labels or targets.min() < IGNORE):
        raise ContractViolation(f"target label outside 0..{num_labels - 1}")
    if weights is None:
        weights = np.full(n, 1.0 / n)
    ignored = targets == IGNORE
    weights = np.where(ignored, 0.0, weights)
    picked = nx.take_along(nx.log_softmax_op(logits, axis=1), np.where(ignored, 0, targets))
    return nx.mul(nx.sum_(nx.mul(picked, weights)), -1.0)


# -- prototypes and contrast -------------------------------------------------


def prototype_assignment(labels: Sequence[int], include_non_entity: bool = False):
    """Type keys and a row-normalized (K, n) averaging matrix; B-/I- share a type."""
    labels = np.asarray(labels, dtype=np.int64)
    keys = np.where(labels == IGNORE, -1, (labels + 1) // 2)  # 0 for O, k+1 for type k
    present = sorted(set(int(k) for k in keys if k > 0 or (include_non_entity and k == 0)))
    if not present:
        return (), np.zeros((0, labels.size))
    onehot = (keys[None, :] == np.array(present)[:, None]).astype(np.float64)
    return tuple(present), onehot / onehot.sum(axis=1, keepdims=True)


def prototypes(hidden, pseudo: PseudoTarget | Sequence[int], side: str = "current", include_non_entity: bool = False) -> PrototypeSet:
    """Centroid of hidden rows per entity type. Keys are 1-based type indices
    (``label_id + 1) // 2``), with 0 reserved for the non-entity label."""
    labels = pseudo.labels if isinstance(pseudo, PseudoTarget) else pseudo
    if nx.value_of(hidden).shape[0] != len(labels):
        raise ContractViolation("hidden rows and labels differ in count")
    keys, avg = prototype_assignment(labels, include_non_entity)
    if not keys:
        return PrototypeSet((), np.zeros((0, nx.value_of(hidden).shape[1])), side)
    return PrototypeSet(keys, nx.matmul(avg, hidden), side)


def itc_loss(p_new: PrototypeSet, p_old: PrototypeSet) -> Optional[nx.Var]:
    """Inter-type contrast between current and old prototypes; None when fewer
    than two shared types remain."""
    shared = [t for t in p_new.types if t in set(p_old.types)]
    k = len(shared)
    if k < 2:
        return None
    new_pos = [p_new.types.index(t) for t in shared]
    old_pos = [p_old.types.index(t) for t in shared]
    cur = p_new.centroids
    if new_pos != list(range(len(p_new.types))):
        cur = nx.getitem(cur, np.array(new_pos))
    old = nx.value_of(p_old.centroids)[old_pos]
    positive = nx.sum_(nx.mul(cur, old), axis=1)
    sims = nx.matmul(cur, nx.transpose(nx.concat([cur, old], axis=0)))
    same = np.eye(k, dtype=bool)
    mask = ~np.concatenate([same, same], axis=1)
    denom = nx.logsumexp(sims, axis=1, mask=mask)
    return nx.mul(nx.mean(nx.sub(positive, denom)), -1.0)


def total_loss(ce, skd=None, itc=None, lambda1: float = 2.0, lambda2: float = 0.02, fd=None, kd=None, itc_skipped=False) -> LossBreakdown:
    """Combined objective ``ce + lambda1*distill + lambda2*itc``; absent terms count as 0.

    ``fd`` (plain feature distillation) takes the structural term's place when
    given, and ``kd`` is an extra unweighted term used by the logit-KD baseline.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigurationError("loss weights must be non-negative")
    objective = ce
    distill = fd if fd is not None else skd
    if distill is not None and lambda1:
        objective = nx.add(objective, nx.mul(distill, lambda1))
    if itc is not None and lambda2:
        objective = nx.add(objective, nx.mul(itc, lambda2))
    if kd is not None:
        objective = nx.add(objective, kd)
    f = nx.scalar
    return LossBreakdown(
        ce=f(ce),
        skd=None if skd is None else f(skd),
        itc=None if itc is None else f(itc),
        lambda1=lambda1,
        lambda2=lambda2,
        total=f(objective),
        fd=None if fd is None else f(fd),
        kd=None if kd is None else f(kd),
        itc_skipped=itc_skipped,
        objective=objective,
    )
