import math

import numpy as np
import pytest

from emofuse import objectives as O
from emofuse import tensor as T
from emofuse.errors import ContractError, LabelError, ParameterError


def unit_bank(dim=16):
    """Orthonormal prompt embeddings: class c -> basis vector e_c."""
    return O.TextBank.from_embeddings(np.eye(8, dim, dtype=np.float32))


def unit_rows(labels, dim=16):
    return np.eye(8, dim, dtype=np.float32)[np.asarray(labels)]


# ---------------------------------------------------------------------------
# weighted cross entropy
# ---------------------------------------------------------------------------

def test_uniform_weights_equal_standard_ce():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((6, 8))
    labels = rng.integers(0, 8, size=6)
    out = O.weighted_cross_entropy(T.tensor(logits, dtype=np.float64), labels, np.ones(8))
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expected = -logp[np.arange(6), labels].mean()
    np.testing.assert_allclose(float(out.data), expected, rtol=1e-12)


def test_zero_logits_give_ln8():
    out = O.weighted_cross_entropy(T.tensor(np.zeros((4, 8)), dtype=np.float64),
                                   np.array([0, 3, 5, 7]), np.ones(8))
    assert abs(float(out.data) - math.log(8.0)) <= 1e-6


def test_confident_correct_logits_drive_loss_to_zero():
    logits = np.full((3, 8), -30.0)
    labels = np.array([1, 4, 6])
    logits[np.arange(3), labels] = 30.0
    out = O.weighted_cross_entropy(T.tensor(logits), labels, np.ones(8))
    assert float(out.data) < 1e-3


def test_label_out_of_range_errors():
    with pytest.raises(LabelError):
        O.weighted_cross_entropy(T.tensor(np.zeros((2, 8))), np.array([0, 8]), np.ones(8))


def test_loss_monotone_in_correct_logit():
    rng = np.random.default_rng(1)
    base = rng.standard_normal((1, 8))
    labels = np.array([2])
    prev = np.inf
    for bump in np.linspace(-3, 3, 13):
        logits = base.copy()
        logits[0, 2] += bump
        val = float(O.weighted_cross_entropy(
            T.tensor(logits, dtype=np.float64), labels, np.ones(8)).data)
        assert val < prev
        prev = val


def test_weighting_emphasizes_rare_class():
    logits = np.zeros((2, 8))
    labels = np.array([0, 1])
    weights = np.ones(8)
    weights[1] = 5.0
    # weighted mean: both samples at ln 8, so weights cancel
    out = O.weighted_cross_entropy(T.tensor(logits, dtype=np.float64), labels, weights)
    assert abs(float(out.data) - math.log(8.0)) <= 1e-9


# ---------------------------------------------------------------------------
# contrastive loss
# ---------------------------------------------------------------------------

def test_contrastive_hand_value_orthogonal_pairs():
    # B=2, v_i = t_i orthogonal, tau=1: each direction -log(e/(e+1)) ~ 0.3133
    bank = unit_bank()
    v = T.tensor(unit_rows([0, 1]), dtype=np.float64)
    loss = O.contrastive_loss(v, np.array([0, 1]), bank, tau=1.0)
    assert abs(float(loss.data) - 0.3132616875) <= 1e-4


def test_contrastive_same_label_pair_masks_to_zero():
    bank = unit_bank()
    v = T.tensor(unit_rows([3, 3]), dtype=np.float64)
    loss = O.contrastive_loss(v, np.array([3, 3]), bank, tau=1.0)
    assert abs(float(loss.data)) <= 1e-7


def test_contrastive_identical_pairs_give_ln_b():
    # all v identical to all (identical) prompts, distinct labels, tau=1
    bank = O.TextBank.from_embeddings(np.tile(np.eye(1, 16), (8, 1)).astype(np.float32))
    v = T.tensor(np.tile(np.eye(1, 16), (4, 1)), dtype=np.float64)
    loss = O.contrastive_loss(v, np.array([0, 1, 2, 3]), bank, tau=1.0)
    np.testing.assert_allclose(float(loss.data), math.log(4.0), rtol=1e-6)


def test_contrastive_batch_permutation_invariant():
    rng = np.random.default_rng(2)
    bank = O.TextBank.from_embeddings(rng.standard_normal((8, 16)).astype(np.float32))
    raw = rng.standard_normal((5, 16))
    v = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    labels = np.array([0, 2, 4, 6, 1])
    a = float(O.contrastive_loss(T.tensor(v, dtype=np.float64), labels, bank, 0.5).data)
    perm = np.array([3, 0, 4, 1, 2])
    b = float(O.contrastive_loss(
        T.tensor(v[perm], dtype=np.float64), labels[perm], bank, 0.5).data)
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_contrastive_nonnegative():
    rng = np.random.default_rng(3)
    bank = O.TextBank.from_embeddings(rng.standard_normal((8, 16)).astype(np.float32))
    for seed in range(5):
        r = np.random.default_rng(seed)
        raw = r.standard_normal((6, 16))
        v = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        labels = r.integers(0, 8, size=6)
        loss = float(O.contrastive_loss(T.tensor(v, dtype=np.float64), labels, bank, 0.07).data)
        assert loss >= 0.0


def test_contrastive_rejects_unnormalized_rows():
    bank = unit_bank()
    with pytest.raises(ContractError):
        O.contrastive_loss(T.tensor(2.0 * unit_rows([0, 1])), np.array([0, 1]), bank, 1.0)


def test_contrastive_rejects_bad_temperature():
    bank = unit_bank()
    with pytest.raises(ParameterError):
        O.contrastive_loss(T.tensor(unit_rows([0, 1])), np.array([0, 1]), bank, 0.0)


def test_contrastive_gradients_reach_projection_inputs():
    rng = np.random.default_rng(4)
    bank = O.TextBank.from_embeddings(rng.standard_normal((8, 12)).astype(np.float32))
    raws = [T.tensor(rng.standard_normal(12) * 2, requires_grad=True, dtype=np.float64)
            for _ in range(4)]
    labels = np.array([0, 1, 2, 2])

    def f():
        v = T.stack_rows([T.l2_normalize(r) for r in raws])
        return O.contrastive_loss(v, labels, bank, tau=0.5)

    assert T.grad_check(f, raws, seed=5) <= 1e-4


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

def _combined_inputs(dtype=np.float64):
    rng = np.random.default_rng(6)
    logits = T.tensor(rng.standard_normal((5, 8)), dtype=dtype)
    raw = rng.standard_normal((5, 16))
    v = T.tensor(raw / np.linalg.norm(raw, axis=1, keepdims=True), dtype=dtype)
    labels = np.array([0, 1, 3, 3, 7])
    bank = O.TextBank.from_embeddings(rng.standard_normal((8, 16)).astype(np.float32))
    return logits, labels, v, bank


def test_combined_lambda_zero_is_plain_ce():
    logits, labels, v, bank = _combined_inputs()
    report = O.combined_loss(logits, labels, v, bank, np.ones(8), lam=0.0, tau=0.07)
    assert report.l_total == report.l_cls


def test_combined_linear_identity():
    logits, labels, v, bank = _combined_inputs()
    report = O.combined_loss(logits, labels, v, bank, np.ones(8), lam=0.1, tau=0.07)
    assert abs(report.l_total - (report.l_cls + 0.1 * report.l_con)) <= 1e-7
    assert report.lam == 0.1
    assert report.l_cls >= 0 and report.l_con >= 0


def test_combined_default_lambda_value():
    assert O.DEFAULT_LAMBDA == 0.1


# ---------------------------------------------------------------------------
# macro F1
# ---------------------------------------------------------------------------

def test_macro_f1_perfect_predictions():
    ids = np.arange(8).repeat(3)
    report = O.macro_f1(ids, ids)
    assert report.macro_f1 == 1.0
    np.testing.assert_array_equal(report.per_class_f1, np.ones(8))


def test_macro_f1_hand_case():
    labels = np.array([0, 0, 1, 1])
    preds = np.array([0, 1, 1, 1])
    report = O.macro_f1(preds, labels)
    np.testing.assert_allclose(report.per_class_f1[0], 2 / 3, rtol=1e-12)
    np.testing.assert_allclose(report.per_class_f1[1], 0.8, rtol=1e-12)
    assert abs(report.macro_f1 - (2 / 3 + 0.8) / 8) <= 1e-6
    assert abs(report.macro_f1 - 0.18333333) <= 1e-6


def test_macro_f1_relabeling_invariance():
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 8, size=40)
    preds = rng.integers(0, 8, size=40)
    base = O.macro_f1(preds, labels)
    perm = rng.permutation(8)
    remapped = O.macro_f1(perm[preds], perm[labels])
    np.testing.assert_allclose(remapped.macro_f1, base.macro_f1, rtol=1e-12)
    np.testing.assert_allclose(np.sort(remapped.per_class_f1), np.sort(base.per_class_f1))


def test_macro_f1_confusion_row_sums():
    rng = np.random.default_rng(8)
    labels = rng.integers(0, 8, size=60)
    preds = rng.integers(0, 8, size=60)
    report = O.macro_f1(preds, labels)
    np.testing.assert_array_equal(report.confusion.sum(axis=1), np.bincount(labels, minlength=8))


def test_macro_f1_rejects_bad_ids():
    with pytest.raises(LabelError):
        O.macro_f1(np.array([0, 9]), np.array([0, 1]))


def test_metrics_report_json_schema():
    import json
    report = O.macro_f1(np.array([0, 1, 2]), np.array([0, 1, 3]))
    doc = json.loads(report.to_json())
    assert set(doc) == {"macro_f1", "per_class_f1", "confusion"}
    assert len(doc["per_class_f1"]) == 8
    assert len(doc["confusion"]) == 8 and all(len(row) == 8 for row in doc["confusion"])


def test_prompt_template():
    bank = unit_bank()
    assert bank.prompts[1] == "A face expressing Anger"
    assert bank.prompts[7] == "A face expressing Other"
    np.testing.assert_allclose(np.linalg.norm(bank.normalized, axis=1), 1.0, atol=1e-6)
