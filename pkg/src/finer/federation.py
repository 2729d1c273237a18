"""Federated incremental training: client groups, selection, the entropy
task-switch monitor, local training, and sample-weighted aggregation."""
from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from . import lgfd
from . import numerics as nx
from .baselines import Objective, logit_kd_loss, resolve_objective
from .corpus import ClientShard, Sentence, TaskSlice, TaskStream, mask_to_types, shard_clients
from .errors import AggregationError, ConfigurationError, ContractViolation
from .metrics import span_f1
from .tagger import Checkpoint, Tagger, TaggerConfig, gradients, make_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FederationConfig:
    initial_clients: int = 10
    clients_added_per_task: int = 4
    selection_fraction: float = 0.4
    rounds_per_task: int = 5
    epochs_single_type: int = 5
    epochs_multi_type: int = 10
    subsample_fraction: float = 0.6
    entropy_threshold: float = 0.6
    lambda1: float = 2.0
    lambda2: float = 0.02
    groups: int = 12
    batch_size: int = 16
    lr_first_task: float = 2e-3
    lr_incremental: float = 4e-4
    # "token": per-sentence entropy divided by its length; "sentence": raw per-sentence sum
    entropy_normalization: str = "token"
    pseudo_labeling: bool = True
    include_non_entity_prototype: bool = False
    # low-confidence O tokens under pseudo-labeling: "ignore" (no loss) or "non_entity"
    uncertain_tokens: str = "ignore"
    # which clients test for a task switch each round: "selected" or "all" clients with data
    monitor_scope: str = "selected"
    grad_clip: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.selection_fraction <= 1:
            raise ConfigurationError("selection_fraction must lie in (0, 1]")
        if not 0 < self.subsample_fraction <= 1:
            raise ConfigurationError("subsample_fraction must lie in (0, 1]")
        if self.entropy_threshold <= 0:
            raise ConfigurationError("entropy_threshold must be positive")
        counts = (self.initial_clients, self.rounds_per_task, self.groups, self.batch_size)
        if min(counts) < 1 or self.clients_added_per_task < 0:
            raise ConfigurationError("client, round, group and batch counts must be positive")
        if min(self.epochs_single_type, self.epochs_multi_type) < 0:
            raise ConfigurationError("epoch counts must be non-negative")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.entropy_normalization not in ("token", "sentence"):
            raise ConfigurationError("entropy_normalization must be 'token' or 'sentence'")
        if self.uncertain_tokens not in ("ignore", "non_entity"):
            raise ConfigurationError("uncertain_tokens must be 'ignore' or 'non_entity'")
        if self.monitor_scope not in ("selected", "all"):
            raise ConfigurationError("monitor_scope must be 'selected' or 'all'")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("grad_clip must be positive")


class Group(enum.Enum):
    OLD_ONLY = "S_o"
    CONTINUING = "S_c"
    NEW = "S_n"


@dataclass
class ClientContext:
    """Per-task cache built lazily from a client's shard and stored old model."""

    targets: list
    old_hidden: Optional[list] = None
    old_u: Optional[list] = None
    old_probs: Optional[list] = None
    thresholds: Optional[lgfd.ThresholdTable] = None


@dataclass
class ClientState:
    client_id: int
    group: Group = Group.NEW
    shard: Optional[ClientShard] = None
    old_checkpoint: Optional[Checkpoint] = None
    last_entropy: Optional[float] = None
    task_counter: int = 1
    snapshot_round: Optional[int] = None
    context: Optional[ClientContext] = field(default=None, repr=False)

    @property
    def has_data(self) -> bool:
        return self.shard is not None and len(self.shard) > 0


@dataclass
class RoundLog:
    round: int
    task: int
    local_round: int
    selected: list
    entropies: dict
    triggers: dict
    weights: dict
    wall_time: float = 0.0

    def to_record(self) -> dict:
        """JSON-ready fields; wall time is left out so records are reproducible."""
        return {
            "round": self.round,
            "task": self.task,
            "local_round": self.local_round,
            "selected": list(self.selected),
            "entropies": {str(k): v for k, v in sorted(self.entropies.items())},
            "triggers": {str(k): v for k, v in sorted(self.triggers.items())},
            "weights": {str(k): v for k, v in sorted(self.weights.items())},
        }


@dataclass(frozen=True)
class TaskMetrics:
    task: int
    old_ma_f1: Optional[float]
    new_ma_f1: Optional[float]
    all_mi_f1: float
    all_ma_f1: float


@dataclass
class ExperimentResult:
    logs: list
    metrics: list
    final: Checkpoint

    @property
    def aggregation_events(self) -> int:
        return len(self.logs)

    def averages(self) -> tuple[float, float]:
        """Mean all-type Mi-F1 and Ma-F1 over tasks after the first."""
        later = [m for m in self.metrics if m.task >= 2] or list(self.metrics)
        return (
            float(np.mean([m.all_mi_f1 for m in later])),
            float(np.mean([m.all_ma_f1 for m in later])),
        )


# -- monitor -----------------------------------------------------------------


def select_clients(pool: Sequence[int], fraction: float, rng: np.random.Generator) -> list[int]:
    if not pool:
        raise ContractViolation("cannot select from an empty pool")
    k = max(1, int(round(fraction * len(pool))))
    k = min(k, len(pool))
    picked = rng.choice(len(pool), size=k, replace=False)
    return sorted(pool[i] for i in picked)


def average_entropy(model, sentences: Sequence[Sentence], normalization: str = "token") -> float:
    """Mean over sentences of the summed token prediction entropy; with
    ``normalization="token"`` each sentence sum is divided by its length."""
    if not sentences:
        raise ContractViolation("average entropy of an empty shard")
    if isinstance(model, Checkpoint):
        model = model.to_tagger()
    total = 0.0
    for _, logits in model.forward_many(list(sentences)):
        h = float(np.sum(nx.entropy_rows(nx.softmax(logits, axis=1))))
        total += h / len(logits) if normalization == "token" else h
    return total / len(sentences)


def detect_task_switch(current: float, previous: Optional[float], threshold: float) -> bool:
    if previous is None:
        return False
    return current - previous >= threshold


def snapshot_old_model(client: ClientState, previous_global: Checkpoint, round_index: Optional[int] = None) -> None:
    """Store the previous round's global model as the client's old model."""
    if round_index is not None and client.snapshot_round is not None and round_index - client.snapshot_round <= 1:
        log.warning("client %d switched tasks in consecutive rounds; keeping the latest snapshot", client.client_id)
    client.old_checkpoint = previous_global
    client.task_counter += 1
    client.snapshot_round = round_index
    client.context = None


# -- local training ----------------------------------------------------------


def _build_context(client: ClientState, objective: Objective, groups: int) -> ClientContext:
    sents = list(client.shard.sentences)
    if client.old_checkpoint is None or not objective.needs_old_model:
        return ClientContext(targets=[lgfd.plain_target(s.labels) for s in sents])
    old = client.old_checkpoint.to_tagger()
    outputs = old.forward_many(sents)
    hidden = [h for h, _ in outputs]
    probs = [nx.softmax(lg, axis=1) for _, lg in outputs]
    thresholds = None
    if objective.pseudo_labeling:
        if objective.confidence_threshold:
            thresholds = lgfd.thresholds_from_probs([s.labels for s in sents], probs)
        targets = [lgfd.pseudo_label(s.labels, p, thresholds, objective.uncertain_tokens) for s, p in zip(sents, probs)]
    else:
        targets = [lgfd.plain_target(s.labels) for s in sents]
    old_u = None
    if objective.lambda1 > 0 and objective.distillation == "skd":
        old_u = [lgfd.old_structure(h, groups) for h in hidden]
    return ClientContext(targets, hidden, old_u, probs if objective.logit_kd else None, thresholds)


def batch_objective(hidden, logits, batch, idx, ctx: ClientContext, objective: Objective, groups: int):
    """Combined loss for one mini-batch of a client's shard (indices ``idx``)."""
    b = len(idx)
    lengths = batch.lengths
    tok_w = np.concatenate([np.full(n, 1.0 / (n * b)) for n in lengths])
    labels = np.concatenate([ctx.targets[i].labels for i in idx])
    have_old = ctx.old_hidden is not None
    if have_old and objective.logit_kd:
        old_probs = np.concatenate([ctx.old_probs[i] for i in idx])
        kd = logit_kd_loss(labels, logits, old_probs, tok_w)
        return lgfd.total_loss(kd, lambda1=0.0, lambda2=0.0)
    ce = lgfd.ce_loss(labels, logits, tok_w)
    if not have_old:
        return lgfd.total_loss(ce, lambda1=0.0, lambda2=0.0)
    skd = fd = itc = None
    skipped = False
    if objective.lambda1 > 0:
        if objective.distillation == "skd":
            skd = lgfd.structural_distillation_packed(
                hidden, lengths, batch.offsets, [ctx.old_u[i] for i in idx], groups, np.full(b, 1.0 / b)
            )
        else:
            old_h = np.concatenate([ctx.old_hidden[i] for i in idx])
            d = old_h.shape[1]
            fd = nx.sum_(nx.mul(nx.square(nx.sub(hidden, old_h)), (tok_w / d)[:, None]))
    if objective.lambda2 > 0:
        old_h = np.concatenate([ctx.old_hidden[i] for i in idx])
        incl = objective.include_non_entity_prototype
        p_new = lgfd.prototypes(hidden, labels, "current", incl)
        p_old = lgfd.prototypes(old_h, labels, "old", incl)
        itc = lgfd.itc_loss(p_new, p_old)
        skipped = itc is None
    return lgfd.total_loss(ce, skd, itc, objective.lambda1, objective.lambda2, fd=fd, itc_skipped=skipped)


def local_train(
    client: ClientState,
    global_ckpt: Checkpoint,
    epochs: int,
    batch_size: int,
    lr: float,
    objective: Objective,
    groups: int = 12,
    rng: Optional[np.random.Generator] = None,
    grad_clip: Optional[float] = None,
):
    """Train a copy of the global model on the client's shard.

    Returns ``(params, sample_count, mean_loss)``; ``None`` when the client has
    no current-task data.
    """
    if not client.has_data:
        log.info("client %d has no current-task data; skipped", client.client_id)
        return None
    if client.context is None:
        client.context = _build_context(client, objective, groups)
    ctx = client.context
    model = global_ckpt.to_tagger()
    sents = client.shard.sentences
    rng = rng or np.random.default_rng(0)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(sents))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            batch = make_batch([sents[i] for i in idx], model.config.vocab_hash_buckets)
            result, grads = gradients(
                model, lambda h, lg: batch_objective(h, lg, batch, idx, ctx, objective, groups), batch
            )
            if grad_clip is not None:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > grad_clip:
                    grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
            model.sgd_step(grads, lr)
            losses.append(result.total)
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return model.params, len(sents), mean_loss


def aggregate(updates: Sequence[tuple[Mapping[str, np.ndarray], int]], client_ids: Optional[Sequence[int]] = None):
    """Sample-count weighted mean of parameter dicts.

    Computed as ``first + sum_i w_i (p_i - first)`` so identical inputs come
    back bit-identical.
    """
    if not updates:
        raise AggregationError("nothing to aggregate")
    ids = list(client_ids) if client_ids is not None else list(range(len(updates)))
    first, _ = updates[0]
    for cid, (params, count) in zip(ids, updates):
        if set(params) != set(first):
            raise AggregationError(f"client {cid} sent a different parameter set", cid)
        for name, value in params.items():
            if np.shape(value) != np.shape(first[name]):
                raise AggregationError(
                    f"client {cid}: {name} has shape {np.shape(value)}, expected {np.shape(first[name])}", cid
                )
        if count < 0:
            raise AggregationError(f"client {cid} reported a negative sample count", cid)
    total = float(sum(c for _, c in updates))
    if total <= 0:
        raise AggregationError("sample counts sum to zero")
    weights = [c / total for _, c in updates]
    out = {}
    for name in first:
        base = np.asarray(first[name], dtype=np.float64)
        acc = base.copy()
        for w, (params, _) in zip(weights[1:], updates[1:]):
            acc += w * (np.asarray(params[name]) - base)
        out[name] = acc
    return out, weights


# -- orchestration -----------------------------------------------------------


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


class Federation:
    """One seeded run of the federated incremental pipeline."""

    def __init__(
        self,
        stream: TaskStream,
        config: FederationConfig,
        tagger_config: TaggerConfig,
        method: str = "lgfd",
        test_sentences: Sequence[Sentence] = (),
    ):
        tagger_config.check_groups(config.groups)
        self.stream = stream
        self.config = config
        self.seed = config.seed
        self.objective = resolve_objective(
            method, config.lambda1, config.lambda2, config.pseudo_labeling,
            config.include_non_entity_prototype, config.uncertain_tokens,
        )
        self.method = method
        self.test_sentences = list(test_sentences)
        self.registry = stream.registry
        self.global_model = Tagger.initialize(replace(tagger_config, seed=config.seed), self.registry.at_version(0))
        self.clients: dict[int, ClientState] = {}
        self.task = 0
        self.task_slice: Optional[TaskSlice] = None
        self.global_round = 0
        self.previous_global: Optional[Checkpoint] = None
        self.logs: list[RoundLog] = []
        self.metrics: list[TaskMetrics] = []

    # client bookkeeping

    def _add_clients(self, n: int) -> list[int]:
        start = len(self.clients)
        ids = list(range(start, start + n))
        for cid in ids:
            self.clients[cid] = ClientState(cid, Group.NEW)
        return ids

    def advance_task(self, task_slice: TaskSlice, rng: Optional[np.random.Generator] = None) -> None:
        """Activate the next task: grow the pool, regroup clients, reshard, expand the head."""
        self.task = task_slice.task_index
        self.task_slice = task_slice
        rng = rng or _rng(self.seed, self.task, 2)
        if self.task == 1:
            existing: list[int] = []
            new_ids = self._add_clients(self.config.initial_clients)
        else:
            existing = sorted(self.clients)
            new_ids = self._add_clients(self.config.clients_added_per_task)
        coins = rng.random(len(existing))
        receiving = []
        for cid, coin in zip(existing, coins):
            client = self.clients[cid]
            client.group = Group.OLD_ONLY if coin < 0.5 else Group.CONTINUING
            client.shard = None
            client.context = None
            if client.group is Group.CONTINUING:
                receiving.append(cid)
        receiving.extend(new_ids)
        for shard in shard_clients(task_slice, receiving, self.config.subsample_fraction, self.seed):
            self.clients[shard.client_id].shard = shard
        self.global_model = self.global_model.expand_head(task_slice.new_types)

    def _epochs(self) -> int:
        if len(self.task_slice.new_types) == 1:
            return self.config.epochs_single_type
        return self.config.epochs_multi_type

    def run_round(self, local_round: int) -> RoundLog:
        started = time.perf_counter()
        cfg = self.config
        ckpt = self.global_model.checkpoint(self.task, self.global_round)
        selected = select_clients(sorted(self.clients), cfg.selection_fraction, _rng(self.seed, self.task, local_round, 1))
        watching = set(selected) if cfg.monitor_scope == "selected" else set(self.clients)
        entropies, triggers = {}, {}
        for cid, client in self.clients.items():
            if not client.has_data:
                continue
            value = average_entropy(self.global_model, client.shard.sentences, cfg.entropy_normalization)
            fired = (
                self.task >= 2
                and cid in watching
                and detect_task_switch(value, client.last_entropy, cfg.entropy_threshold)
            )
            if fired and self.previous_global is not None:
                snapshot_old_model(client, self.previous_global, self.global_round)
            entropies[cid] = value
            triggers[cid] = bool(fired)
            client.last_entropy = value

        lr = cfg.lr_first_task if self.task == 1 else cfg.lr_incremental
        updates, ids = [], []
        for cid in selected:
            client = self.clients[cid]
            out = local_train(
                client, ckpt, self._epochs(), cfg.batch_size, lr, self.objective, cfg.groups,
                _rng(self.seed, self.task, local_round, cid, 3), cfg.grad_clip,
            )
            if out is None:
                continue
            params, count, _ = out
            updates.append((params, count))
            ids.append(cid)
        weights = {}
        if updates:
            merged, w = aggregate(updates, ids)
            self.global_model = Tagger(self.global_model.config, self.global_model.registry, merged)
            weights = dict(zip(ids, w))
        self.previous_global = ckpt
        entry = RoundLog(
            self.global_round, self.task, local_round, selected, entropies, triggers, weights,
            time.perf_counter() - started,
        )
        self.logs.append(entry)
        self.global_round += 1
        return entry

    def evaluate(self) -> TaskMetrics:
        seen = self.stream.seen_types(self.task)
        new = tuple(self.task_slice.new_types)
        old = tuple(t for t in seen if t not in new)
        if not self.test_sentences:
            return TaskMetrics(self.task, None, None, 0.0, 0.0)
        gold = [mask_to_types(s, self.registry, seen) for s in self.test_sentences]
        preds = self.global_model.predict(gold)
        reg = self.global_model.registry
        m = span_f1(
            [reg.tags(p) for p in preds],
            [reg.tags(s.labels) for s in gold],
            type_groups={"old": old, "new": new},
            types=seen,
        )
        return TaskMetrics(
            self.task,
            m.groups["old"].macro_f1 if old else None,
            m.groups["new"].macro_f1,
            m.micro_f1,
            m.macro_f1,
        )

    def run(self) -> ExperimentResult:
        for task_slice in self.stream:
            self.advance_task(task_slice)
            for r in range(1, self.config.rounds_per_task + 1):
                self.run_round(r)
            self.metrics.append(self.evaluate())
            log.info("seed %d task %d: %s", self.seed, self.task, self.metrics[-1])
        return ExperimentResult(self.logs, self.metrics, self.global_model.checkpoint(self.task, self.global_round))


def run_experiment(
    config: FederationConfig,
    stream: TaskStream,
    tagger_config: TaggerConfig = TaggerConfig(),
    method: str = "lgfd",
    test_sentences: Sequence[Sentence] = (),
) -> ExperimentResult:
    return Federation(stream, config, tagger_config, method, test_sentences).run()
