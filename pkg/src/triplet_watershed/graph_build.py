"""Graph construction over labeled pixels: PCA, 4-adjacency and the EMST."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .graph import Graph

WEIGHT_FLOOR = 1e-12

ADJACENCY = 1
EMST = 2


class PcaBasis(BaseEstimator, TransformerMixin):
    """Principal components from the eigendecomposition of the covariance.

    Each component is flipped so its largest-magnitude coordinate is
    positive. ``n_components=None`` keeps every band.

    Attributes
    ----------
    mean_ : ndarray (n_features,)
    components_ : ndarray (n_features, n_components)
        Orthonormal columns.
    eigenvalues_ : ndarray (n_components,)
        Descending, non-negative.
    """

    def __init__(self, n_components=None):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"expected a 2-D pixel matrix, got shape {X.shape}")
        n, b = X.shape
        k = b if self.n_components is None else int(self.n_components)
        if not 1 <= k <= b:
            raise ValueError(f"n_components must be in [1, {b}], got {k}")
        if n < 2:
            raise ValueError("PCA needs at least 2 samples")
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        cov = Xc.T @ Xc / (n - 1)
        evals, evecs = np.linalg.eigh(cov)
        if evals[-1] <= 0:
            raise ValueError("data has zero variance")
        order = np.argsort(evals, kind="stable")[::-1][:k]
        evals = np.clip(evals[order], 0.0, None)
        evecs = evecs[:, order]
        pivot = np.argmax(np.abs(evecs), axis=0)
        signs = np.sign(evecs[pivot, np.arange(k)])
        signs[signs == 0] = 1.0
        self.components_ = evecs * signs
        self.eigenvalues_ = evals
        self.n_features_in_ = b
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = np.asarray(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        return np.asarray(Z) @ self.components_.T + self.mean_

    def to_dict(self):
        check_is_fitted(self, "components_")
        return {"n_components": int(self.components_.shape[1]),
                "mean": self.mean_.tolist(),
                "components": self.components_.tolist(),
                "eigenvalues": self.eigenvalues_.tolist()}

    @classmethod
    def from_dict(cls, d):
        pca = cls(n_components=d["n_components"])
        pca.mean_ = np.asarray(d["mean"], dtype=np.float64)
        pca.components_ = np.asarray(d["components"], dtype=np.float64).reshape(
            len(pca.mean_), d["n_components"])
        pca.eigenvalues_ = np.asarray(d["eigenvalues"], dtype=np.float64)
        pca.n_features_in_ = len(pca.mean_)
        return pca


def fit_pca(cube, k=None):
    """Fit a :class:`PcaBasis` on every pixel spectrum of an (H, W, B) cube."""
    cube = np.asarray(cube)
    return PcaBasis(k).fit(cube.reshape(-1, cube.shape[-1]))


def _row_distances(X, x):
    return np.sqrt(((X - x) ** 2).sum(axis=1))


def euclidean_mst(X):
    """Exact Euclidean minimum spanning tree by dense Prim, O(n^2 d).

    Ties in distance go to the smallest ``(min(u, v), max(u, v))`` pair.

    Returns
    -------
    edges : ndarray (n - 1, 2) of int64
        ``(tree vertex, new vertex)`` in insertion order.
    weights : ndarray (n - 1,)
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = len(X)
    if n <= 1:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    idx = np.arange(n)
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    key = _row_distances(X, X[0])
    key[0] = np.inf
    parent = np.zeros(n, dtype=np.int64)
    edges = np.empty((n - 1, 2), dtype=np.int64)
    weights = np.empty(n - 1)
    for t in range(n - 1):
        m = key.min()
        ties = np.flatnonzero(key == m)
        if len(ties) == 1:
            v = int(ties[0])
        else:
            lo = np.minimum(parent[ties], ties)
            hi = np.maximum(parent[ties], ties)
            v = int(ties[np.lexsort((hi, lo))[0]])
        edges[t] = parent[v], v
        weights[t] = m
        in_tree[v] = True
        key[v] = np.inf
        d = _row_distances(X, X[v])
        better = d < key
        eq = (d == key) & ~in_tree
        if eq.any():
            cand = (np.minimum(idx, v), np.maximum(idx, v))
            cur = (np.minimum(idx, parent), np.maximum(idx, parent))
            better |= eq & ((cand[0] < cur[0]) | ((cand[0] == cur[0]) & (cand[1] < cur[1])))
        better &= ~in_tree
        key[better] = d[better]
        parent[better] = v
    return edges, weights


@dataclass
class EdgeSet:
    """Fixed edge set over the labeled pixels of an image.

    ``coords[i]`` is the (row, col) of vertex ``i``; vertices are numbered in
    row-major pixel order. ``provenance`` flags each combined edge with
    ``ADJACENCY``, ``EMST`` or both (bitwise or).
    """

    shape: tuple
    coords: np.ndarray
    adjacency_edges: np.ndarray
    emst_edges: np.ndarray
    edges: np.ndarray
    provenance: np.ndarray

    @property
    def n_vertices(self):
        return len(self.coords)

    def vertex_map(self):
        """(H, W) array of vertex ids, -1 for pixels outside the graph."""
        out = np.full(self.shape, -1, dtype=np.int64)
        out[self.coords[:, 0], self.coords[:, 1]] = np.arange(self.n_vertices)
        return out

    def to_graph(self, features=None):
        """Graph over this edge set; weights are feature distances if given."""
        u, v = self.edges[:, 0], self.edges[:, 1]
        if features is None:
            w = np.ones(len(u))
        else:
            w = edge_weights(self.edges, features)
        return Graph(self.n_vertices, u, v, w, check=False)


def build_edge_set(labels, features, emst_dims=32):
    """Union of 4-adjacency and EMST edges over pixels with label != 0.

    Parameters
    ----------
    labels : (H, W) int array
        Ground truth; 0 marks pixels left out of the graph.
    features : (H, W, k) array
        PCA-projected cube; the first ``emst_dims`` components feed the EMST.
    """
    labels = np.asarray(labels)
    features = np.asarray(features)
    if features.shape[:2] != labels.shape:
        raise ValueError(f"features {features.shape[:2]} and labels {labels.shape} disagree")
    if emst_dims > features.shape[2]:
        raise ValueError(f"emst_dims={emst_dims} exceeds {features.shape[2]} components")
    mask = labels != 0
    coords = np.argwhere(mask)
    n = len(coords)
    if n == 0:
        raise ValueError("no labeled pixels: the graph would be empty")
    vid = np.full(labels.shape, -1, dtype=np.int64)
    vid[mask] = np.arange(n)

    adj = []
    for a, b in ((vid[:, :-1], vid[:, 1:]), (vid[:-1, :], vid[1:, :])):
        ok = (a >= 0) & (b >= 0)
        adj.append(np.stack([a[ok], b[ok]], axis=1))
    adjacency = np.concatenate(adj)
    adjacency = adjacency[np.lexsort((adjacency[:, 1], adjacency[:, 0]))]

    emst, _ = euclidean_mst(features[mask][:, :emst_dims])
    emst = np.sort(emst, axis=1)

    keys = {}
    for a, b in adjacency.tolist():
        keys[(a, b)] = ADJACENCY
    for a, b in emst.tolist():
        keys[(a, b)] = keys.get((a, b), 0) | EMST
    edges = np.array(list(keys), dtype=np.int64).reshape(-1, 2)
    provenance = np.array(list(keys.values()), dtype=np.int8)
    return EdgeSet(labels.shape, coords, adjacency, emst, edges, provenance)


def edge_weights(edges, embeddings):
    """Euclidean distance between endpoint embeddings, floored at ``WEIGHT_FLOOR``."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if not np.all(np.isfinite(emb)):
        raise ValueError("embeddings contain non-finite values")
    diff = emb[edges[:, 0]] - emb[edges[:, 1]]
    return np.maximum(np.sqrt((diff * diff).sum(axis=1)), WEIGHT_FLOOR)


def reweight(g: Graph, embeddings):
    """Set every edge weight of ``g`` in place from vertex embeddings."""
    embeddings = np.asarray(embeddings)
    if len(embeddings) != g.n_vertices:
        raise ValueError(f"{len(embeddings)} embeddings for {g.n_vertices} vertices")
    g.weights[...] = edge_weights(np.stack([g.u, g.v], axis=1), embeddings)
