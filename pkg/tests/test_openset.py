import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfan.openset import (ScoredSample, acc, auroc, calibrate_threshold, evaluate_logits, macro_f1,
                          macro_f1_table, oscr, predict, predict_all, roc_curve, score)
from oracles import auroc_pairs, oscr_enumerate, random_scores


def test_score_examples():
    assert score([2, -1, 0]) == 2
    assert score([1.5, 1.5, 1.5]) == 1.5
    x = np.array([0.3, -2.0, 1.1])
    assert score(x + 7.25) == score(x) + 7.25
    with pytest.raises(ValueError):
        score([])


def test_calibrate_examples():
    assert calibrate_threshold(np.arange(1, 11), 0.9) == 2
    s = np.random.default_rng(0).standard_normal(17)
    assert calibrate_threshold(s, 1.0) == s.min()
    assert calibrate_threshold([3.0] * 5) == 3.0
    with pytest.raises(ValueError):
        calibrate_threshold([])


def test_calibrate_enumeration_oracle():
    rng = np.random.default_rng(1)
    for trial in range(100):
        n = int(rng.integers(1, 60))
        s = random_scores(rng, n, ties=trial % 2 == 0)
        theta = calibrate_threshold(s, 0.9)
        ok = [v for v in s if np.mean(s >= v) >= 0.9]
        assert theta == max(ok)
        if len(np.unique(s)) == n:
            assert 0.9 <= np.mean(s >= theta) <= 0.9 + 1 / n


def test_calibrate_acceptance_bound_without_ties():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 300))
        s = rng.standard_normal(n)
        frac = np.mean(s >= calibrate_threshold(s, 0.9))
        assert 0.9 <= frac <= 0.9 + 1 / n


def test_predict_examples():
    assert predict([3, 1], 2) == 0
    assert predict([1, 1], 2) == 2
    assert predict([2, 0.5], 2) == 0
    assert predict([1.0, 4.0, 4.0], 0) == 1
    logits = np.array([[3, 1], [1, 1], [2, 0.5]])
    assert list(predict_all(logits, 2)) == [0, 2, 0]
    s = ScoredSample(np.array([0.2, 0.9]), 1, True)
    assert s.score == 0.9 and s.predicted(0.5) == 1 and s.predicted(1.0) == 2


def test_acc_examples():
    logits = np.eye(4)
    assert acc(logits, [0, 1, 2, 3]) == 1.0
    assert acc(logits, [1, 2, 3, 0]) == 0.0
    assert acc(logits, [0, 1, 2, 0]) == 0.75
    with pytest.raises(ValueError):
        acc(np.zeros((0, 2)), [])


def test_auroc_examples():
    assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert auroc([0.9, 0.4], [0.5, 0.1]) == 0.75
    assert auroc([0.3, 0.3, 0.7], [0.7, 0.3, 0.3]) == 0.5
    with pytest.raises(ValueError):
        auroc([0.1], [])


def test_auroc_equals_all_pairs_exactly():
    rng = np.random.default_rng(3)
    for trial in range(100):
        n = int(rng.integers(2, 201))
        nk = int(rng.integers(1, n))
        s = random_scores(rng, n, ties=trial % 3 == 0)
        assert auroc(s[:nk], s[nk:]) == auroc_pairs(s[:nk], s[nk:])


def test_roc_curve_endpoints():
    fpr, tpr = roc_curve([0.9, 0.4], [0.5, 0.1])
    assert (fpr[0], tpr[0]) == (0, 0) and (fpr[-1], tpr[-1]) == (1, 1)
    assert np.isclose(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2), 0.75)


def test_oscr_examples():
    assert oscr([0.9, 0.7, 0.4], [True, False, True], [0.8, 0.3]) == 0.5
    assert oscr([0.9, 0.8], [True, True], [0.1, 0.2]) == 1.0
    assert oscr([0.9, 0.8], [False, False], [0.1, 0.95]) == 0.0
    with pytest.raises(ValueError):
        oscr([0.5], [True], [])


def test_oscr_equals_threshold_enumeration():
    rng = np.random.default_rng(4)
    for trial in range(100):
        n = int(rng.integers(2, 51))
        nk = int(rng.integers(1, n))
        s = random_scores(rng, n, ties=trial % 2 == 0)
        correct = rng.random(nk) < 0.7
        a = oscr(s[:nk], correct, s[nk:])
        b = oscr_enumerate(list(s[:nk]), list(correct), list(s[nk:]))
        assert abs(a - b) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    k, u = rng.standard_normal(12), rng.standard_normal(9)
    correct = rng.random(12) < 0.6
    f = lambda x: np.exp(0.5 * x) + 3.0  # strictly increasing
    assert auroc(k, u) == auroc(f(k), f(u))
    assert abs(oscr(k, correct, u) - oscr(f(k), correct, f(u))) < 1e-12
    logits = rng.standard_normal((10, 4))
    theta = 0.3
    kept = logits.max(axis=1) >= theta
    assert np.array_equal(predict_all(logits, theta)[kept], predict_all(f(logits), f(theta))[kept])


def test_macro_f1_examples():
    labels = np.array([0, 1, 2, 3])
    assert macro_f1(labels, labels, 3) == 1.0
    # two classes plus unknown=2 absent: TP=FP=FN=1 each side
    assert macro_f1([0, 1, 1, 0], [0, 0, 1, 1], 2) == 0.5
    res = macro_f1_table([0, 1, 2], [0, 1, 2], 3)
    assert res.macro_f1 == 1.0 and res.excluded == [3]


def test_macro_f1_empty_known_class_scores_zero():
    res = macro_f1_table([0, 0, 2], [0, 0, 2], 2)
    assert dict((c, f) for c, _, _, f in res.per_class)[1] == 0.0
    assert np.isclose(res.macro_f1, 2 / 3)


def test_macro_f1_confusion_oracle_and_relabeling():
    rng = np.random.default_rng(5)
    for _ in range(30):
        c = int(rng.integers(2, 6))
        labels, pred = rng.integers(0, c + 1, 40), rng.integers(0, c + 1, 40)
        f1s = []
        for k in range(c + 1):
            tp = np.sum((pred == k) & (labels == k))
            fp = np.sum((pred == k) & (labels != k))
            fn = np.sum((pred != k) & (labels == k))
            if k == c and tp + fp + fn == 0:
                continue
            f1s.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
        assert np.isclose(macro_f1(pred, labels, c), np.mean(f1s))
        perm = np.append(rng.permutation(c), c)
        assert np.isclose(macro_f1(perm[pred], perm[labels], c), macro_f1(pred, labels, c))


def test_evaluate_logits_report():
    rng = np.random.default_rng(6)
    val = rng.standard_normal((20, 3)) + 2 * np.eye(3)[rng.integers(0, 3, 20)]
    test = rng.standard_normal((30, 3))
    labels = rng.integers(0, 3, 30)
    known = np.arange(30) < 20
    rep = evaluate_logits(test, labels, known, val)
    for v in rep.metrics().values():
        assert v is not None
    for name in ("acc", "auroc", "oscr", "macro_f1"):
        assert 0 <= getattr(rep, name) <= 1
    csv = rep.to_csv()
    assert csv.startswith("metric,value\nacc,") and "\nfpr,ccr\n" in csv and "\nclass,precision,recall,f1\n" in csv
    again = evaluate_logits(test, labels, known, val)
    assert again.to_csv() == csv


def test_evaluate_logits_without_unknowns():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((10, 2))
    rep = evaluate_logits(logits, logits.argmax(axis=1), np.ones(10, bool), logits)
    assert rep.auroc is None and rep.oscr is None and rep.acc == 1.0
    assert any("disabled" in n for n in rep.notes)
