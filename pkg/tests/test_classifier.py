import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from triplet_watershed.classifier import (EnsembleConfig, TripletBatch, classify_ensemble,
                                          classify_single, mine_triplets, stratified_sample,
                                          votes_to_csv)
from triplet_watershed.graph import UNLABELED, Graph, GraphError
from triplet_watershed.graph_build import edge_weights

from conftest import random_connected_graph


def embedded_graph(rng, n=40, d=6):
    g = random_connected_graph(rng, n, extra=0.15)
    emb = rng.normal(size=(n, d))
    g = g.with_weights(edge_weights(np.stack([g.u, g.v], 1), emb))
    seeds = np.full(n, UNLABELED)
    seeds[rng.choice(n, 9, replace=False)] = np.arange(9) % 3
    return g, emb, seeds


class TestSingle:
    def test_seeds_everywhere(self, rng):
        g = random_connected_graph(rng, 6)
        seeds = np.array([2, 0, 1, 1, 0, 2])
        np.testing.assert_array_equal(classify_single(g, seeds), seeds)

    def test_path(self):
        g = Graph.from_edges(3, [(0, 1, 1.0), (1, 2, 2.0)])
        assert classify_single(g, {0: 0, 2: 1}).tolist() == [0, 0, 1]

    def test_one_class_floods(self, rng):
        g = random_connected_graph(rng, 12)
        assert set(classify_single(g, {3: 4}).tolist()) == {4}


class TestEnsemble:
    def test_degenerate_equals_single(self, rng):
        for _ in range(10):
            g, emb, seeds = embedded_graph(rng)
            labels, votes = classify_ensemble(g, emb, seeds, EnsembleConfig(1, 1.0, 1.0, 7))
            np.testing.assert_array_equal(labels, classify_single(g, seeds))
            assert np.all(votes.sum(1) == 1)

    def test_agreeing_estimators(self, rng):
        g, emb, seeds = embedded_graph(rng)
        seeds[:] = UNLABELED
        seeds[:3] = [0, 1, 1]
        seeds[3:6] = [0, 0, 1]
        # every seed and every dimension kept: all estimators identical
        cfg = EnsembleConfig(5, 1.0, 1.0, 0)
        labels, votes = classify_ensemble(g, emb, seeds, cfg)
        assert set(votes.max(1).tolist()) == {5}
        assert np.all(votes.sum(1) == 5)

    def test_thread_count_and_order_invariance(self, rng):
        g, emb, seeds = embedded_graph(rng)
        cfg = EnsembleConfig(12, 0.5, 0.5, 3)
        a = classify_ensemble(g, emb, seeds, cfg, n_jobs=1)
        b = classify_ensemble(g, emb, seeds, cfg, n_jobs=4)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_tie_goes_to_lowest_class(self, rng):
        seen_tie = False
        for _ in range(20):
            g, emb, seeds = embedded_graph(rng)
            labels, votes = classify_ensemble(g, emb, seeds, EnsembleConfig(2, 0.5, 0.5, 1))
            top = votes.max(1, keepdims=True)
            first = np.argmax(votes == top, axis=1)
            np.testing.assert_array_equal(labels, first)
            seen_tie |= bool(((votes == top).sum(1) > 1).any())
        assert seen_tie

    def test_missing_class(self, rng):
        g, emb, seeds = embedded_graph(rng)
        with pytest.raises(GraphError):
            classify_ensemble(g, emb, seeds, n_classes=4)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            EnsembleConfig(0)
        with pytest.raises(ValueError):
            EnsembleConfig(feature_fraction=0.0)

    def test_votes_csv(self, tmp_path):
        import io
        buf = io.StringIO()
        votes_to_csv(np.array([[1, 0], [0, 2]]), buf)
        assert buf.getvalue() == "vertex,class0,class1\n0,1,0\n1,0,2\n"


def test_stratified_sample_keeps_every_class(rng):
    seeds = np.array([0] * 7 + [1] + [2] * 3 + [UNLABELED] * 5)
    out = stratified_sample(seeds, 0.4, rng)
    assert ((out == 0).sum(), (out == 1).sum(), (out == 2).sum()) == (3, 1, 2)
    assert np.all((out == UNLABELED) | (out == seeds))


class TestMining:
    def test_enumeration(self, rng):
        labels = np.array([5, 5, 7])
        b = mine_triplets(labels, 200, rng)
        assert len(b) == 200
        assert set(b.anchors.tolist()) == {0, 1}
        assert set(b.negatives.tolist()) == {2}
        np.testing.assert_array_equal(b.positives, 1 - b.anchors)

    def test_empty_batch(self, rng):
        assert len(mine_triplets(np.array([0, 0, 1]), 0, rng)) == 0

    def test_needs_two_classes(self, rng):
        with pytest.raises(ValueError):
            mine_triplets(np.array([1, 1, 1]), 4, rng)
        with pytest.raises(ValueError):
            mine_triplets(np.array([0, 1, 2]), 4, rng)

    def test_anchor_uniformity(self, rng):
        labels = np.repeat(np.arange(4), [10, 20, 30, 40])
        labels = rng.permutation(labels)
        b = mine_triplets(labels, 10_000, rng)
        counts = np.bincount(b.anchors, minlength=100)
        assert chisquare(counts).pvalue > 0.001
        pos_counts = np.bincount(b.positives[labels[b.anchors] == 3], minlength=100)[labels == 3]
        assert chisquare(pos_counts).pvalue > 0.001

    def test_check_rejects_bad_batch(self):
        bad = TripletBatch(np.array([0]), np.array([0]), np.array([1]))
        with pytest.raises(AssertionError):
            bad.check(np.array([0, 1]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mined_triplets_valid(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(-1, 4, 30)
    labels[:4] = [0, 0, 1, 1]
    b = mine_triplets(labels, 64, rng)
    b.check(labels)
    assert np.all(labels[b.anchors] != UNLABELED)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_monotone_reweight_property(seed):
    rng = np.random.default_rng(seed)
    g, _, seeds = embedded_graph(rng, n=15)
    a = classify_single(g, seeds)
    w = g.weights
    b = classify_single(g.with_weights(w ** 3 + w), seeds)
    np.testing.assert_array_equal(a, b)


def test_ensemble_beats_single_on_trained_embedding():
    from triplet_watershed import TripletWatershed, make_synthetic
    from triplet_watershed.data import split
    from triplet_watershed.graph_build import reweight

    ds = make_synthetic(48, 48, 8, 4, 0.9, rng=2)
    sp = split(ds.labels, fraction=0.1, rng=0)
    est = TripletWatershed(patch_size=3, epochs=5, random_state=0)
    est.fit(ds.cube, sp.training_target(ds.labels))
    coords = est.edge_set_.coords
    emb = est.transform(ds.cube)[coords[:, 0], coords[:, 1]]
    truth = ds.labels[coords[:, 0], coords[:, 1]] - 1
    test = sp.test[coords[:, 0], coords[:, 1]]
    g = est.graph_.with_weights(np.ones(est.graph_.n_edges))
    reweight(g, emb)
    single = np.mean(classify_single(g, est.seed_labels_)[test] == truth[test])
    ens = [np.mean(classify_ensemble(g, emb, est.seed_labels_,
                                     EnsembleConfig(random_state=s))[0][test] == truth[test])
           for s in range(5)]
    assert np.mean(ens) >= single
