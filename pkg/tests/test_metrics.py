"""Metric implementations against brute-force oracles and tie conventions."""

import numpy as np
import pytest

from lahst import metrics as mx


# ---------------------------------------------------------------------------
# brute-force oracles (independent of the implementations)
# ---------------------------------------------------------------------------


def oracle_micro_f1(scores, gold, threshold=0.5):
    tp = fp = fn = 0
    for i in range(scores.shape[0]):
        for j in range(scores.shape[1]):
            pred = scores[i, j] >= threshold
            if pred and gold[i, j]:
                tp += 1
            elif pred and not gold[i, j]:
                fp += 1
            elif not pred and gold[i, j]:
                fn += 1
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def oracle_macro_f1(scores, gold, threshold=0.5):
    vals = []
    for j in range(scores.shape[1]):
        vals.append(oracle_micro_f1(scores[:, j : j + 1], gold[:, j : j + 1], threshold))
    return sum(vals) / len(vals)


def oracle_auc_pairwise(scores, gold):
    pos = [s for s, g in zip(scores, gold) if g]
    neg = [s for s, g in zip(scores, gold) if not g]
    if not pos or not neg:
        return None
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def oracle_macro_auc(scores, gold):
    vals = [oracle_auc_pairwise(scores[:, j], gold[:, j]) for j in range(scores.shape[1])]
    vals = [v for v in vals if v is not None]
    return sum(vals) / len(vals) if vals else None


def oracle_p_at_k(scores, gold, k):
    total = 0.0
    for i in range(scores.shape[0]):
        ranked = sorted(range(scores.shape[1]), key=lambda j: (-scores[i, j], j))
        total += sum(1 for j in ranked[:k] if gold[i, j]) / k
    return total / scores.shape[0]


def random_instance(rng):
    p = int(rng.integers(1, 31))
    l = int(rng.integers(5, 11))
    scores = rng.uniform(size=(p, l))
    if rng.uniform() < 0.3:  # force ties sometimes
        scores = np.round(scores, 1)
    gold = rng.uniform(size=(p, l)) < rng.uniform(0.1, 0.6)
    return scores, gold


# ---------------------------------------------------------------------------
# analytic examples
# ---------------------------------------------------------------------------


def test_micro_f1_perfect_and_constructed():
    gold = np.array([[1, 0], [0, 1]], dtype=bool)
    scores = gold.astype(float)
    assert mx.micro_f1(scores, gold) == 1.0

    # TP=2, FP=1, FN=1 -> 2/3
    scores = np.array([[0.9, 0.8], [0.1, 0.9]])
    gold = np.array([[1, 0], [1, 1]], dtype=bool)
    assert abs(mx.micro_f1(scores, gold) - 2 / 3) < 1e-15


def test_micro_f1_zero_denominator():
    scores = np.zeros((3, 4))
    gold = np.zeros((3, 4), dtype=bool)
    assert mx.micro_f1(scores, gold) == 0.0


def test_macro_f1_half_when_one_label_wrong():
    scores = np.array([[0.9, 0.1], [0.9, 0.1]])
    gold = np.array([[1, 1], [1, 1]], dtype=bool)
    assert mx.macro_f1(scores, gold) == 0.5


def test_auc_perfect_and_ties():
    scores = np.array([[0.9], [0.8], [0.2], [0.1]])
    gold = np.array([[1], [1], [0], [0]], dtype=bool)
    assert mx.micro_auc(scores, gold) == 1.0

    flat = np.full((6, 1), 0.4)
    gold = np.array([[1], [0], [1], [0], [0], [1]], dtype=bool)
    assert mx.micro_auc(flat, gold) == 0.5  # midrank convention


def test_auc_degenerate_returns_none_not_zero():
    scores = np.random.default_rng(0).uniform(size=(4, 2))
    all_pos = np.ones((4, 2), dtype=bool)
    assert mx.micro_auc(scores, all_pos) is None
    assert mx.macro_auc(scores, all_pos) is None
    one_sided = np.zeros((4, 2), dtype=bool)
    one_sided[:, 0] = [1, 0, 1, 0]
    assert mx.macro_auc(scores, one_sided) is not None
    assert mx.per_label_auc(scores, one_sided)[1] is None


def test_precision_at_5_analytic():
    # gold {1,3}; top-5 by score = [3,7,1,9,2] -> 2/5
    scores = np.zeros((1, 10))
    for rank, label in enumerate([3, 7, 1, 9, 2]):
        scores[0, label] = 1.0 - 0.1 * rank
    gold = np.zeros((1, 10), dtype=bool)
    gold[0, [1, 3]] = True
    assert abs(mx.precision_at_k(scores, gold, 5) - 0.4) < 1e-15

    gold[0, [3, 7, 1, 9, 2]] = True
    assert mx.precision_at_k(scores, gold, 5) == 1.0


def test_precision_at_k_needs_enough_labels():
    with pytest.raises(ValueError):
        mx.precision_at_k(np.zeros((2, 3)), np.zeros((2, 3), dtype=bool), 5)


def test_p_at_k_tie_break_by_label_index():
    scores = np.array([[0.5, 0.5, 0.5, 0.5, 0.5, 0.9]])
    gold = np.zeros((1, 6), dtype=bool)
    gold[0, [0, 1]] = True  # the two smallest-index tied labels win slots
    assert abs(mx.precision_at_k(scores, gold, 3) - 2 / 3) < 1e-15
    assert mx.top_k_labels(scores[0], 3) == [5, 0, 1]


# ---------------------------------------------------------------------------
# oracle sweeps (>=100 random instances each)
# ---------------------------------------------------------------------------


def test_f1_matches_oracle_exactly():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        scores, gold = random_instance(rng)
        assert mx.micro_f1(scores, gold) == oracle_micro_f1(scores, gold)
        assert abs(mx.macro_f1(scores, gold) - oracle_macro_f1(scores, gold)) < 1e-15


def test_auc_matches_pairwise_oracle():
    for seed in range(100):
        rng = np.random.default_rng(200 + seed)
        scores, gold = random_instance(rng)
        got = mx.micro_auc(scores, gold)
        ref = oracle_auc_pairwise(scores.reshape(-1), gold.reshape(-1))
        if ref is None:
            assert got is None
        else:
            assert abs(got - ref) < 1e-12
        got_macro = mx.macro_auc(scores, gold)
        ref_macro = oracle_macro_auc(scores, gold)
        if ref_macro is None:
            assert got_macro is None
        else:
            assert abs(got_macro - ref_macro) < 1e-12


def test_p_at_5_matches_sort_oracle():
    for seed in range(100):
        rng = np.random.default_rng(400 + seed)
        scores, gold = random_instance(rng)
        assert mx.precision_at_k(scores, gold, 5) == oracle_p_at_k(scores, gold, 5)


# ---------------------------------------------------------------------------
# invariances
# ---------------------------------------------------------------------------


def test_metrics_invariant_to_patient_order_and_label_permutation():
    rng = np.random.default_rng(17)
    scores, gold = random_instance(rng)
    row_perm = rng.permutation(scores.shape[0])
    col_perm = rng.permutation(scores.shape[1])
    s2 = scores[row_perm][:, col_perm]
    g2 = gold[row_perm][:, col_perm]
    assert mx.micro_f1(scores, gold) == mx.micro_f1(s2, g2)
    assert abs(mx.macro_f1(scores, gold) - mx.macro_f1(s2, g2)) < 1e-15
    assert abs(mx.micro_auc(scores, gold) - mx.micro_auc(s2, g2)) < 1e-12
    assert mx.precision_at_k(scores, gold, 5) == mx.precision_at_k(s2, g2, 5)


def test_p_at_k_invariant_to_monotone_transform():
    rng = np.random.default_rng(23)
    scores, gold = random_instance(rng)
    for transform in (lambda s: 3.0 * s + 1.0, np.exp, lambda s: s**3):
        assert mx.precision_at_k(scores, gold, 5) == mx.precision_at_k(transform(scores), gold, 5)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        mx.micro_f1(np.zeros((2, 3)), np.zeros((3, 2), dtype=bool))
