"""Watershed classification on a built graph and triplet mining from its labels."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .graph import UNLABELED, Graph, GraphError, as_seed_array, label_orphans, watershed_label
from .graph_build import edge_weights


def classify_single(g: Graph, seeds) -> np.ndarray:
    """Watershed labels for every vertex, orphans resolved by pass value."""
    labels, _ = watershed_label(g, seeds)
    if np.any(labels == UNLABELED):
        labels = label_orphans(g, labels, seeds)
    return labels


@dataclass
class EnsembleConfig:
    n_estimators: int = 25
    seed_fraction: float = 0.5
    feature_fraction: float = 0.5
    random_state: int = 0
    voting: str = "uniform"

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        for name in ("seed_fraction", "feature_fraction"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {value}")

    def to_dict(self):
        return asdict(self)


def _ceil_frac(frac, n):
    return max(1, min(n, math.ceil(round(frac * n, 9))))


def stratified_sample(seed_arr, fraction, rng):
    """Keep ``ceil(fraction * n_c)`` (at least one) seeds of every class ``c``."""
    out = np.full_like(seed_arr, UNLABELED)
    for c in np.unique(seed_arr[seed_arr != UNLABELED]).tolist():
        members = np.flatnonzero(seed_arr == c)
        keep = rng.permutation(members)[:_ceil_frac(fraction, len(members))]
        out[keep] = c
    return out


def _one_estimator(g, emb, seed_arr, cfg, n_classes, child_seed):
    rng = np.random.default_rng(child_seed)
    d = emb.shape[1]
    sub_seeds = stratified_sample(seed_arr, cfg.seed_fraction, rng)
    dims = np.sort(rng.permutation(d)[:_ceil_frac(cfg.feature_fraction, d)])
    weights = edge_weights(np.stack([g.u, g.v], axis=1), emb[:, dims])
    labels = classify_single(g.with_weights(weights), sub_seeds)
    votes = np.zeros((g.n_vertices, n_classes), dtype=np.int64)
    ok = labels != UNLABELED
    votes[np.flatnonzero(ok), labels[ok]] = 1
    return votes


def classify_ensemble(g: Graph, embeddings, seeds, cfg: EnsembleConfig = None,
                      n_classes=None, n_jobs=1):
    """Majority vote of watersheds on random seed and feature subsets.

    Each estimator keeps a stratified ``seed_fraction`` of the seeds and a
    ``feature_fraction`` of the embedding dimensions, recomputes edge weights
    from those dimensions alone and runs :func:`classify_single`. Votes are
    summed in estimator order; ties go to the lowest class id. Estimator ``t``
    draws from its own child seed, so the result does not depend on
    ``n_jobs``.

    Returns
    -------
    labels : ndarray (n_vertices,)
    votes : ndarray (n_vertices, n_classes)
    """
    cfg = cfg or EnsembleConfig()
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or len(emb) != g.n_vertices:
        raise ValueError(f"embeddings must be ({g.n_vertices}, d), got {emb.shape}")
    seed_arr = as_seed_array(seeds, g.n_vertices)
    present = np.unique(seed_arr[seed_arr != UNLABELED])
    if n_classes is None:
        n_classes = int(present.max()) + 1 if len(present) else 0
    missing = sorted(set(range(n_classes)) - set(present.tolist()))
    if missing:
        raise GraphError(f"classes without seeds: {missing}")
    children = np.random.SeedSequence(cfg.random_state).spawn(cfg.n_estimators)
    args = [(g, emb, seed_arr, cfg, n_classes, child) for child in children]
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(lambda a: _one_estimator(*a), args))
    else:
        results = [_one_estimator(*a) for a in args]
    votes = np.zeros((g.n_vertices, n_classes), dtype=np.int64)
    for v in results:
        votes += v
    labels = np.argmax(votes, axis=1).astype(np.int64)
    labels[votes.sum(axis=1) == 0] = UNLABELED
    return labels, votes


def votes_to_csv(votes, fh):
    n_classes = votes.shape[1]
    fh.write("vertex," + ",".join(f"class{c}" for c in range(n_classes)) + "\n")
    for i, row in enumerate(votes.tolist()):
        fh.write(f"{i}," + ",".join(str(x) for x in row) + "\n")


@dataclass
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self):
        return len(self.anchors)

    def check(self, labels):
        la, lp, ln = labels[self.anchors], labels[self.positives], labels[self.negatives]
        if np.any(la == UNLABELED) or np.any(ln == UNLABELED):
            raise AssertionError("triplet contains an unlabeled vertex")
        if np.any(la != lp) or np.any(la == ln) or np.any(self.anchors == self.positives):
            raise AssertionError("triplet label constraints violated")


def mine_triplets(labels, batch_size, rng, max_retries=10) -> TripletBatch:
    """Uniform random triplets from a vertex labeling.

    Anchors are uniform over labeled vertices, positives uniform over the
    other members of the anchor's class, negatives uniform over labeled
    vertices of other classes. Anchors from singleton classes are redrawn up
    to ``max_retries`` times and then dropped.
    """
    labels = np.asarray(labels)
    empty = np.zeros(0, dtype=np.int64)
    if batch_size == 0:
        return TripletBatch(empty, empty, empty)
    pool = np.flatnonzero(labels != UNLABELED)
    pool_labels = labels[pool]
    classes, counts = np.unique(pool_labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("triplet mining needs at least two classes")
    if counts.max() < 2:
        raise ValueError("every class is a singleton; no positive pairs exist")
    order = np.argsort(pool_labels, kind="stable")
    grouped = pool[order]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    cls_index = np.searchsorted(classes, pool_labels[order])
    # position of each grouped vertex inside its class block
    within = np.arange(len(grouped)) - starts[cls_index]

    slot = rng.integers(0, len(grouped), batch_size)
    for _ in range(max_retries):
        bad = counts[cls_index[slot]] < 2
        if not bad.any():
            break
        slot[bad] = rng.integers(0, len(grouped), int(bad.sum()))
    slot = slot[counts[cls_index[slot]] >= 2]

    ci = cls_index[slot]
    size = counts[ci]
    start = starts[ci]
    r = rng.integers(0, size - 1)
    r = r + (r >= within[slot])
    positives = grouped[start + r]
    r = rng.integers(0, len(grouped) - size)
    r = r + (r >= start) * size
    negatives = grouped[r]
    batch = TripletBatch(grouped[slot], positives, negatives)
    batch.check(labels)
    return batch
