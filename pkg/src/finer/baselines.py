"""Baseline objectives: fine-tuning, self-training, and logit distillation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import NON_ENTITY
from .errors import ConfigurationError, ContractViolation

METHODS = ("lgfd", "ft", "st", "logit_kd", "lgfd_fd_ablation", "lgfd_no_itc", "lgfd_no_skd")


@dataclass(frozen=True)
class Objective:
    """What a client optimizes once it holds an old model.

    Without an old model every method reduces to cross-entropy on the
    client's ground truth.
    """

    pseudo_labeling: bool = True
    confidence_threshold: bool = True
    lambda1: float = 2.0
    lambda2: float = 0.02
    distillation: str = "skd"  # or "fd"
    logit_kd: bool = False
    include_non_entity_prototype: bool = False
    uncertain_tokens: str = "ignore"

    @property
    def needs_old_model(self) -> bool:
        return self.pseudo_labeling or self.logit_kd or self.lambda1 > 0 or self.lambda2 > 0


def resolve_objective(method: str, lambda1: float, lambda2: float, pseudo_labeling: bool = True,
                      include_non_entity_prototype: bool = False, uncertain_tokens: str = "ignore") -> Objective:
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if uncertain_tokens not in ("ignore", "non_entity"):
        raise ConfigurationError(f"unknown uncertain-token policy {uncertain_tokens!r}")
    common = dict(include_non_entity_prototype=include_non_entity_prototype, uncertain_tokens=uncertain_tokens)
    if method == "ft":
        return Objective(pseudo_labeling=False, lambda1=0.0, lambda2=0.0, **common)
    if method == "st":
        return Objective(pseudo_labeling=True, confidence_threshold=False, lambda1=0.0, lambda2=0.0, **common)
    if method == "logit_kd":
        return Objective(pseudo_labeling=False, lambda1=0.0, lambda2=0.0, logit_kd=True, **common)
    if method == "lgfd_no_skd":
        lambda1 = 0.0
    elif method == "lgfd_no_itc":
        lambda2 = 0.0
    distillation = "fd" if method == "lgfd_fd_ablation" else "skd"
    return Objective(pseudo_labeling=pseudo_labeling, lambda1=lambda1, lambda2=lambda2,
                     distillation=distillation, **common)


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats for probability vectors; 0 log 0 = 0."""
    p, q = nx.as_tensor(p), nx.as_tensor(q)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def logit_kd_loss(gt: Sequence[int], logits, old_probs, weights=None) -> nx.Var:
    """Cross-entropy on entity tokens plus KL(old || new) on non-entity tokens.

    The new model's distribution for the KL term is renormalized over the
    old model's label columns. Both terms use per-token ``weights``
    (default ``1/n``) and are summed.
    """
    gt = np.asarray(gt, dtype=np.int64)
    old = nx.as_tensor(old_probs)
    n, num_labels = nx.value_of(logits).shape
    if old.shape[0] != n or gt.shape != (n,):
        raise ContractViolation("labels, logits and old probabilities must align")
    if old.shape[1] > num_labels:
        raise ContractViolation("old model has more labels than the new one")
    if weights is None:
        weights = np.full(n, 1.0 / n)
    entity = gt != NON_ENTITY
    w_ce = np.where(entity, weights, 0.0)
    w_kd = np.where(entity, 0.0, weights)
    picked = nx.take_along(nx.log_softmax_op(logits, axis=1), gt)
    ce = nx.mul(nx.sum_(nx.mul(picked, w_ce)), -1.0)
    log_q = nx.log_softmax_op(nx.getitem(logits, (slice(None), slice(0, old.shape[1]))), axis=1)
    with np.errstate(divide="ignore"):
        log_p = np.where(old > 0, np.log(np.where(old > 0, old, 1.0)), 0.0)
    kl_rows = nx.sum_(nx.mul(nx.sub(log_p, log_q), old), axis=1)
    kd = nx.sum_(nx.mul(kl_rows, w_kd))
    return nx.add(ce, kd)
