import math

import numpy as np
import pytest

from finer import lgfd
from finer import numerics as nx
from finer.baselines import METHODS, Objective, kl_divergence, logit_kd_loss, resolve_objective
from finer.corpus import LabelRegistry, Sentence
from finer.errors import ConfigurationError, ContractViolation
from finer.lgfd import IGNORE, Source, ThresholdTable
from finer.tagger import Tagger, TaggerConfig


def _probs(rows):
    p = np.asarray(rows, dtype=float)
    return p / p.sum(axis=1, keepdims=True)


# -- distillation ---------------------------------------------------------------


def test_feature_distillation_examples():
    assert float(lgfd.feature_distillation(np.ones((3, 4)), np.ones((3, 4))).value) == 0.0
    assert float(lgfd.feature_distillation(np.zeros((1, 2)), np.array([[1.0, 2.0]])).value) == 2.5
    with pytest.raises(ContractViolation):
        lgfd.feature_distillation(np.zeros((1, 2)), np.zeros((2, 2)))


def test_structural_distillation_zero_on_equal_inputs():
    h = np.random.default_rng(0).normal(size=(5, 8))
    assert float(lgfd.structural_distillation(h, h.copy(), 2).value) == 0.0


def test_structural_distillation_single_group_is_u_mse():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    expected = nx.mse(nx.svd(a).u, nx.svd(b).u)
    assert float(lgfd.structural_distillation(a, b, 1).value) == pytest.approx(expected, abs=1e-14)


def test_structural_distillation_groups_are_column_blocks():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    per = [nx.mse(nx.svd(a[:, 4 * g : 4 * g + 4]).u, nx.svd(b[:, 4 * g : 4 * g + 4]).u) for g in range(2)]
    assert float(lgfd.structural_distillation(a, b, 2).value) == pytest.approx(np.mean(per), abs=1e-14)


def test_structural_distillation_bad_groups():
    with pytest.raises(ConfigurationError):
        lgfd.structural_distillation(np.zeros((2, 6)), np.zeros((2, 6)), 4)


def test_packed_structural_distillation_matches_per_sentence():
    rng = np.random.default_rng(3)
    lengths = np.array([3, 2, 3, 4])
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    hidden = rng.normal(size=(lengths.sum(), 8))
    olds = [rng.normal(size=(n, 8)) for n in lengths]
    old_us = [lgfd.old_structure(o, 2) for o in olds]
    w = rng.uniform(size=4)
    packed = float(lgfd.structural_distillation_packed(hidden, lengths, offsets, old_us, 2, w).value)
    direct = sum(
        w[i] * float(lgfd.structural_distillation(olds[i], hidden[offsets[i] : offsets[i] + n], 2).value)
        for i, n in enumerate(lengths)
    )
    assert packed == pytest.approx(direct, abs=1e-13)


# -- thresholds and pseudo-labels ----------------------------------------------


def test_thresholds_median():
    # three O tokens predicted as label 1 with entropies 0.1, 0.2, 0.3 (via crafted probability rows)
    def row(u):
        # two-label distribution with entropy u, solved numerically
        lo, hi = 0.5, 1.0
        for _ in range(200):
            mid = (lo + hi) / 2
            h = nx.shannon_entropy([mid, 1 - mid])
            lo, hi = (mid, hi) if h > u else (lo, mid)
        return [1 - lo, lo, 0.0]

    probs = np.array([row(0.1), row(0.2), row(0.3), row(0.4)])
    table = lgfd.thresholds_from_probs([[0, 0, 0, 3]], [probs])
    assert table[1] == pytest.approx(0.2, abs=1e-9)
    single = lgfd.thresholds_from_probs([[3, 3, 3, 0]], [probs])
    assert dict(single.alpha).keys() == {1}
    assert single[1] == pytest.approx(0.4, abs=1e-9)
    even = lgfd.thresholds_from_probs([[0, 0, 3, 3]], [probs])
    assert even[1] == pytest.approx(0.15, abs=1e-9)


def test_thresholds_empty_without_o_tokens():
    assert len(lgfd.thresholds_from_probs([[1, 2]], [_probs([[1, 2, 3], [3, 2, 1]])])) == 0


def test_compute_thresholds_uses_model():
    reg = LabelRegistry(("A", "B"), 1)
    model = Tagger.initialize(TaggerConfig(vocab_hash_buckets=32, embedding_dim=4, hidden_dim=4), reg)
    sents = [Sentence(("x", "y", "z"), (0, 1, 0))]
    table = lgfd.compute_thresholds(model, sents)
    probs = nx.softmax(model.forward(sents[0])[1], axis=1)
    assert table.alpha == lgfd.thresholds_from_probs([s.labels for s in sents], [probs]).alpha
    assert len(lgfd.compute_thresholds(model, [])) == 0


def test_pseudo_label_worked_example():
    # token 0 is O in gt, old model says B-PER (id 5) confidently; token 1 is B-GPE ground truth (id 7)
    probs = np.zeros((2, 7))
    probs[0] = [0.01, 0.0, 0.0, 0.0, 0.0, 0.99, 0.0]
    probs[1] = [1.0, 0, 0, 0, 0, 0, 0]
    u = nx.shannon_entropy(probs[0])
    assert u < 0.2
    out = lgfd.pseudo_label([0, 7], probs, ThresholdTable({5: 0.2}))
    assert out.labels == (5, 7)
    assert out.sources == (Source.PSEUDO, Source.GROUND_TRUTH)
    (rec,) = out.confidence
    assert rec.accepted and rec.predicted == 5 and rec.token == 0


def test_pseudo_label_uncertain_entity_prediction():
    probs = _probs([[0.3, 0.7, 0.0]])
    u = nx.shannon_entropy(probs[0])
    table = ThresholdTable({1: u / 2})
    ignored = lgfd.pseudo_label([0], probs, table)
    assert ignored.labels == (IGNORE,) and ignored.sources == (Source.IGNORED,)
    assert not ignored.confidence[0].accepted
    kept = lgfd.pseudo_label([0], probs, table, uncertain="non_entity")
    assert kept.labels == (0,) and not kept.confidence[0].accepted


def test_pseudo_label_non_entity_prediction():
    probs = _probs([[0.9, 0.1, 0.0], [0.55, 0.45, 0.0]])
    table = ThresholdTable({0: 0.5})
    dropped = lgfd.pseudo_label([0, 0], probs, table)
    assert dropped.labels == (0, IGNORE)
    # the conservative policy keeps every O token as O
    assert lgfd.pseudo_label([0, 0], probs, table, uncertain="non_entity").labels == (0, 0)


def test_pseudo_label_missing_table_entry_rejects():
    probs = _probs([[0.0, 1.0, 0.0]])
    out = lgfd.pseudo_label([0], probs, ThresholdTable({}), uncertain="non_entity")
    assert out.labels == (0,) and not out.confidence[0].accepted


def test_pseudo_label_without_thresholds_is_self_training():
    probs = _probs([[0.2, 0.41, 0.39], [0.9, 0.05, 0.05]])
    out = lgfd.pseudo_label([0, 0], probs, None)
    assert out.labels == (1, 0)
    assert all(r.accepted for r in out.confidence)


def test_pseudo_label_validation():
    with pytest.raises(ContractViolation):
        lgfd.pseudo_label([0, 0], _probs([[1, 1]]), None)
    with pytest.raises(ConfigurationError):
        lgfd.pseudo_label([0], _probs([[1, 1]]), None, uncertain="drop")


# -- cross-entropy -----------------------------------------------------------------


def test_ce_loss_examples():
    big = np.array([[50.0, 0.0], [0.0, 50.0]])
    assert float(lgfd.ce_loss([0, 1], big).value) == pytest.approx(0.0, abs=1e-12)
    assert float(lgfd.ce_loss([0, 3, 2], np.zeros((3, 5))).value) == pytest.approx(math.log(5))
    logits = np.log(np.array([[0.5, 0.5, 1e-300], [0.25, 0.75, 1e-300]]))
    assert float(lgfd.ce_loss([0, 0], logits).value) == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-12)


def test_ce_loss_ignores_masked_tokens():
    logits = np.random.default_rng(0).normal(size=(3, 4))
    full = float(lgfd.ce_loss([1, 2, 3], logits, np.full(3, 0.5)).value)
    part = float(lgfd.ce_loss([1, IGNORE, 3], logits, np.full(3, 0.5)).value)
    only_mid = float(lgfd.ce_loss([IGNORE, 2, IGNORE], logits, np.full(3, 0.5)).value)
    assert part + only_mid == pytest.approx(full, abs=1e-14)


def test_ce_loss_rejects_out_of_range():
    with pytest.raises(ContractViolation):
        lgfd.ce_loss([4], np.zeros((1, 3)))


# -- prototypes and ITC ---------------------------------------------------------------


def test_prototypes_examples():
    h = np.array([[0.0, 2.0], [2.0, 0.0], [5.0, 5.0]])
    p = lgfd.prototypes(h, [1, 2, 0])
    assert p.types == (1,)
    np.testing.assert_array_equal(nx.value_of(p.centroids), [[1.0, 1.0]])
    single = lgfd.prototypes(h, [0, 3, 0])
    np.testing.assert_array_equal(nx.value_of(single.centroids), [[2.0, 0.0]])
    assert len(lgfd.prototypes(h, [0, 0, 0])) == 0
    assert lgfd.prototypes(h, [0, 0, 0], include_non_entity=True).types == (0,)
    assert len(lgfd.prototypes(h, [IGNORE, IGNORE, IGNORE], include_non_entity=True)) == 0


def test_itc_orthonormal_example():
    e = np.eye(2)
    a = lgfd.PrototypeSet((1, 2), e)
    b = lgfd.PrototypeSet((1, 2), e.copy(), "old")
    expected = -math.log(math.e / 2)
    assert expected == pytest.approx(-0.3069, abs=1e-4)
    assert float(lgfd.itc_loss(a, b).value) == pytest.approx(expected, abs=1e-12)


def test_itc_monotone_in_positive_pair():
    rng = np.random.default_rng(4)
    cur = rng.normal(size=(3, 4))
    old = rng.normal(size=(3, 4))
    base = float(lgfd.itc_loss(lgfd.PrototypeSet((1, 2, 3), cur), lgfd.PrototypeSet((1, 2, 3), old)).value)
    # moving old prototype 0 along the current prototype 0 raises only that positive score
    bumped = old.copy()
    bumped[0] += 0.5 * cur[0] / np.dot(cur[0], cur[0])
    after = float(lgfd.itc_loss(lgfd.PrototypeSet((1, 2, 3), cur), lgfd.PrototypeSet((1, 2, 3), bumped)).value)
    assert after < base


def test_itc_skipped_below_two_types():
    a = lgfd.PrototypeSet((1, 2), np.eye(2))
    assert lgfd.itc_loss(a, lgfd.PrototypeSet((2, 3), np.eye(2))) is None


def test_itc_aligns_shared_types():
    rng = np.random.default_rng(5)
    cur = rng.normal(size=(3, 4))
    old = rng.normal(size=(3, 4))
    full = float(lgfd.itc_loss(lgfd.PrototypeSet((1, 2, 3), cur[:2]), lgfd.PrototypeSet((1, 2), old[:2])).value)
    shuffled = float(lgfd.itc_loss(lgfd.PrototypeSet((2, 1), cur[[1, 0]]), lgfd.PrototypeSet((1, 2, 4), old)).value)
    assert full == pytest.approx(shuffled, abs=1e-12)


# -- total --------------------------------------------------------------------------


def test_total_loss_examples():
    out = lgfd.total_loss(1.0, 0.5, -0.3, 2.0, 0.02)
    assert out.total == pytest.approx(1.994, abs=1e-12)
    assert lgfd.total_loss(1.0, 0.5, -0.3, 0.0, 0.0).total == 1.0
    assert lgfd.total_loss(1.0).total == 1.0
    fd = lgfd.total_loss(1.0, skd=None, itc=None, lambda1=2.0, lambda2=0.0, fd=0.25)
    assert fd.total == 1.5 and fd.fd == 0.25
    with pytest.raises(ConfigurationError):
        lgfd.total_loss(1.0, lambda1=-1.0)


# -- baselines ----------------------------------------------------------------------


def test_kl_examples():
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.1438, abs=1e-4)
    assert kl_divergence([1.0, 0.0], [0.3, 0.7]) == pytest.approx(-math.log(0.3))


def test_logit_kd_zero_when_models_agree():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(4, 3))
    old = nx.softmax(logits, axis=1)
    # all O tokens, so the value is the KL term alone
    assert float(logit_kd_loss([0, 0, 0, 0], logits, old).value) == pytest.approx(0.0, abs=1e-14)


def test_logit_kd_splits_ce_and_kl():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(3, 5))
    old = nx.softmax(rng.normal(size=(3, 3)), axis=1)
    w = np.full(3, 1 / 3)
    total = float(logit_kd_loss([0, 4, 0], logits, old, w).value)
    ce = -nx.log_softmax(logits, axis=1)[1, 4] / 3
    q = nx.softmax(logits[:, :3], axis=1)
    kl = (kl_divergence(old[0], q[0]) + kl_divergence(old[2], q[2])) / 3
    assert total == pytest.approx(ce + kl, abs=1e-13)


def test_resolve_objective():
    assert set(METHODS) == {"lgfd", "ft", "st", "logit_kd", "lgfd_fd_ablation", "lgfd_no_itc", "lgfd_no_skd"}
    assert resolve_objective("ft", 2, 0.02) == resolve_objective("lgfd", 0, 0, pseudo_labeling=False)
    assert resolve_objective("lgfd_no_skd", 2, 0.02).lambda1 == 0
    assert resolve_objective("lgfd_no_itc", 2, 0.02).lambda2 == 0
    assert resolve_objective("lgfd_fd_ablation", 2, 0.02).distillation == "fd"
    st = resolve_objective("st", 2, 0.02)
    assert st.pseudo_labeling and not st.confidence_threshold
    assert resolve_objective("logit_kd", 2, 0.02).logit_kd
    assert not Objective(pseudo_labeling=False, lambda1=0, lambda2=0).needs_old_model
    with pytest.raises(ConfigurationError):
        resolve_objective("podnet", 2, 0.02)
