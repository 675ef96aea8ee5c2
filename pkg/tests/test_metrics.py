import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score, cohen_kappa_score

from triplet_watershed.data import TEST, TRAIN
from triplet_watershed.metrics import (average_precisions, compute_metrics, confusion_scores,
                                       default_map_subsample, mean_average_precision)


def pr_integration_map(X, y):
    """Independent oracle: area under the step PR curve, query by query."""
    aps = []
    n = len(X)
    for q in range(n):
        scored = [(math.exp(-math.dist(X[q], X[i])), -i, i) for i in range(n) if i != q]
        scored.sort(reverse=True)
        rel = [y[i] == y[q] for _, _, i in scored]
        total = sum(rel)
        if total == 0:
            continue
        area, prev_recall, hits = 0.0, 0.0, 0
        for k, r in enumerate(rel, 1):
            hits += r
            recall = hits / total
            area += (recall - prev_recall) * (hits / k)
            prev_recall = recall
        aps.append(area)
    return sum(aps) / len(aps)


class TestConfusion:
    def test_hand_fixture(self):
        oa, aa, kappa, defined, recalls = confusion_scores([[4, 1], [2, 3]])
        assert (oa, aa, kappa, defined) == (0.7, 0.7, 0.4, True)
        assert recalls == {0: 0.8, 1: 0.6}

    def test_perfect(self):
        truth = np.array([1, 2, 3, 3, 2])
        r = compute_metrics(truth, truth)
        assert r.oa == r.aa == r.kappa == 1.0

    def test_kappa_undefined(self):
        oa, _, kappa, defined, _ = confusion_scores([[5, 0], [0, 0]])
        assert oa == 1.0 and math.isnan(kappa) and not defined
        r = compute_metrics(np.ones(5, int), np.ones(5, int), n_classes=2)
        assert r.to_dict()["kappa"] is None

    def test_mask_and_unlabeled(self):
        truth = np.array([1, 1, 2, 2, 0])
        pred = np.array([1, 0, 2, 1, 2])
        mask = np.array([TEST, TEST, TEST, TRAIN, 0])
        r = compute_metrics(pred, truth, mask)
        assert r.n_total == 3 and r.n_unlabeled == 1
        assert r.oa == pytest.approx(2 / 3)
        assert r.confusion == [[1, 0], [0, 1]]

    def test_matches_sklearn_kappa(self, rng):
        for _ in range(20):
            t = rng.integers(1, 5, 200)
            p = np.where(rng.random(200) < 0.7, t, rng.integers(1, 5, 200))
            r = compute_metrics(p, t, n_classes=4)
            assert r.kappa == pytest.approx(cohen_kappa_score(t, p), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=9, max_size=9))
def test_metric_invariants(cells):
    cm = np.array(cells).reshape(3, 3)
    if cm.sum() == 0:
        return
    oa, aa, kappa, defined, recalls = confusion_scores(cm)
    n = cm.sum()
    assert math.isclose(oa * n, np.trace(cm), rel_tol=1e-12)
    rows = cm.sum(1)
    ref_aa = np.mean([cm[i, i] / rows[i] for i in range(3) if rows[i]])
    assert math.isclose(aa, ref_aa, rel_tol=1e-12)
    pe = (rows * cm.sum(0)).sum() / n ** 2
    if defined:
        assert math.isclose(kappa, (oa - pe) / (1 - pe), rel_tol=1e-9, abs_tol=1e-12)
    else:
        assert pe == 1


class TestMap:
    def test_single_class(self, rng):
        assert mean_average_precision(rng.normal(size=(6, 2)), np.zeros(6))[0] == 1.0

    def test_half(self):
        X = np.array([[0.0], [1.0], [2.0]])
        y = np.array([0, 1, 0])
        assert average_precisions(X, y, [0])[0] == 0.5

    def test_matches_pr_oracle(self, rng):
        X = rng.normal(size=(30, 4))
        y = rng.integers(0, 3, 30)
        value, n, skipped = mean_average_precision(X, y)
        assert n == 30 and skipped == 0
        assert abs(value - pr_integration_map(X, y)) < 1e-12
        ap = average_precisions(X, y)
        for q in range(30):
            others = np.delete(np.arange(30), q)
            d = np.linalg.norm(X[others] - X[q], axis=1)
            ref = average_precision_score(y[others] == y[q], -d)
            assert abs(ap[q] - ref) < 1e-12

    def test_monotone_invariance(self, rng):
        X = rng.normal(size=(25, 3))
        y = rng.integers(0, 3, 25)
        a = mean_average_precision(X, y)[0]
        assert mean_average_precision(3 * X + 1, y)[0] == a

    def test_skipped_singleton(self):
        X = np.arange(4.0)[:, None]
        value, n, skipped = mean_average_precision(X, np.array([0, 0, 1, 2]))
        assert skipped == 2 and value == 1.0

    def test_subsample(self, rng):
        X = rng.normal(size=(40, 2))
        y = rng.integers(0, 2, 40)
        a = mean_average_precision(X, y, subsample=10, rng=3)
        assert a == mean_average_precision(X, y, subsample=10, rng=3) and a[1] == 10
        assert default_map_subsample(4999) is None and default_map_subsample(5000) == 2000
