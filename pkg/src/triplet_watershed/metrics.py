"""Classification metrics (OA, AA, kappa) and retrieval MAP on embeddings."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .data import TEST


@dataclass
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    kappa_defined: bool
    per_class: dict
    confusion: list
    classes: list
    n_total: int
    n_unlabeled: int
    map: float = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        if not self.kappa_defined:
            d["kappa"] = None
        return d


def confusion_scores(confusion, unlabeled=None):
    """OA, AA and kappa from an integer confusion matrix (rows = truth).

    ``unlabeled[i]`` counts truth-class-``i`` samples that got no prediction;
    they are wrong for every class, so they enter the row totals and ``N``
    but no column. Kappa is ``(N*trace - sum(row*col)) / (N**2 - sum(row*col))``
    and NaN when chance agreement is one. Everything is computed with exact
    fractions and rounded once.

    Returns ``(oa, aa, kappa, kappa_defined, recalls)`` with ``recalls`` keyed
    by row index for classes present in the truth.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    if unlabeled is None:
        unlabeled = np.zeros(len(cm), dtype=np.int64)
    rows = [int(r) + int(u) for r, u in zip(cm.sum(axis=1), unlabeled)]
    cols = [int(c) for c in cm.sum(axis=0)]
    n = sum(rows)
    if n == 0:
        raise ValueError("no samples to score")
    trace = int(np.trace(cm))
    recalls = {i: Fraction(int(cm[i, i]), rows[i]) for i in range(len(cm)) if rows[i] > 0}
    aa = sum(recalls.values(), Fraction(0)) / len(recalls)
    chance = sum(r * c for r, c in zip(rows, cols))
    denom = n * n - chance
    if denom == 0:
        kappa, defined = float("nan"), False
    else:
        kappa, defined = float(Fraction(n * trace - chance, denom)), True
    recalls = {i: float(r) for i, r in recalls.items()}
    return float(Fraction(trace, n)), float(aa), kappa, defined, recalls


def compute_metrics(pred, truth, mask=None, n_classes=None):
    """Score a predicted label map against the ground truth.

    Labels are ``1..C`` with 0 meaning "no label". Only pixels with nonzero
    truth are scored, restricted to ``TEST`` pixels when a split mask (or its
    ``.mask`` array) is given. A zero prediction on a scored pixel counts as
    an error and is tallied in ``n_unlabeled``.
    """
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction has {pred.size} entries, truth {truth.size}")
    scored = truth != 0
    if mask is not None:
        m = getattr(mask, "mask", mask)
        scored &= np.asarray(m).reshape(-1) == TEST
    if n_classes is None:
        n_classes = int(max(truth.max(), pred.max()))
    t = truth[scored] - 1
    p = pred[scored] - 1
    if np.any(p >= n_classes):
        raise ValueError("prediction contains a class id above n_classes")
    labeled = p >= 0
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t[labeled], p[labeled]), 1)
    unl = np.bincount(t[~labeled], minlength=n_classes)
    oa, aa, kappa, defined, recalls = confusion_scores(cm, unl)
    return MetricsReport(
        oa=oa, aa=aa, kappa=kappa, kappa_defined=defined,
        per_class={i + 1: r for i, r in recalls.items()},
        confusion=cm.tolist(), classes=list(range(1, n_classes + 1)),
        n_total=int(scored.sum()), n_unlabeled=int((~labeled).sum()))


def average_precisions(embeddings, labels, queries=None):
    """Average precision of same-class retrieval for each query point.

    Other points are ranked by increasing Euclidean distance (the order
    ``exp(-d)`` induces), ties by index. AP is the mean of precision@rank
    over the ranks holding a same-class point. Queries whose class has no
    other member get NaN.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    n = len(X)
    if n < 2:
        raise ValueError("MAP needs at least 2 points")
    queries = np.arange(n) if queries is None else np.asarray(queries, dtype=np.int64)
    out = np.full(len(queries), np.nan)
    for j, q in enumerate(queries.tolist()):
        d = np.sqrt(((X - X[q]) ** 2).sum(axis=1))
        others = np.delete(np.arange(n), q)
        order = others[np.argsort(d[others], kind="stable")]
        rel = y[order] == y[q]
        n_rel = int(rel.sum())
        if n_rel == 0:
            continue
        hits = np.cumsum(rel)
        ranks = np.flatnonzero(rel) + 1
        out[j] = float(np.mean(hits[rel] / ranks))
    return out


def mean_average_precision(embeddings, labels, subsample=None, rng=None):
    """MAP over all points, or over ``subsample`` random queries.

    Returns ``(map, n_queries, n_skipped)``; skipped queries are those
    whose class has no other member.
    """
    n = len(embeddings)
    queries = None
    if subsample is not None and subsample < n:
        queries = np.sort(np.random.default_rng(rng).choice(n, subsample, replace=False))
    ap = average_precisions(embeddings, labels, queries)
    skipped = int(np.isnan(ap).sum())
    value = float(np.nanmean(ap)) if skipped < len(ap) else float("nan")
    return value, len(ap), skipped


def default_map_subsample(n):
    """Full MAP below 5000 points, otherwise 2000 sampled queries."""
    return None if n < 5000 else 2000
