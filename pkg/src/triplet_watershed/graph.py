"""Edge-weighted graphs, union-find and the seeded watershed.

Labels are dense ``int64`` arrays indexed by vertex; ``UNLABELED`` (-1)
marks vertices without a class. Seeds are accepted either as a mapping
``{vertex: class}`` or as a dense array with ``UNLABELED`` for non-seeds.
"""
from __future__ import annotations

import heapq
import itertools
import sys
from typing import Mapping, NamedTuple, Union

import numpy as np

UNLABELED = -1
# Returned instead of +inf for pairs with no connecting path; never used in
# arithmetic. Callers test with ``value == DISCONNECTED``.
DISCONNECTED = sys.float_info.max

SeedLike = Union[Mapping[int, int], np.ndarray]


class GraphError(ValueError):
    pass


class Graph:
    """Undirected graph with positive edge weights.

    Parameters
    ----------
    n_vertices : int
    u, v : array-like of int
        Edge endpoints, one entry per edge.
    weights : array-like of float, optional
        Defaults to all ones.
    check : bool
        Validate endpoint ranges, self loops, positivity and duplicates.
    """

    def __init__(self, n_vertices, u, v, weights=None, check=True):
        self.n_vertices = int(n_vertices)
        self.u = np.ascontiguousarray(u, dtype=np.int64).reshape(-1)
        self.v = np.ascontiguousarray(v, dtype=np.int64).reshape(-1)
        if weights is None:
            weights = np.ones(len(self.u))
        self.weights = np.array(weights, dtype=np.float64).reshape(-1)
        self._adjacency = None
        if check:
            self.validate()

    @classmethod
    def from_edges(cls, n_vertices, edges):
        """Build from an iterable of ``(u, v, w)`` triples."""
        edges = list(edges)
        if not edges:
            return cls(n_vertices, [], [], [])
        u, v, w = zip(*edges)
        return cls(n_vertices, u, v, w)

    def validate(self):
        n = self.n_vertices
        if n < 0:
            raise GraphError("negative vertex count")
        if not (len(self.u) == len(self.v) == len(self.weights)):
            raise GraphError("edge arrays have different lengths")
        if len(self.u) == 0:
            return
        if self.u.min() < 0 or self.v.min() < 0 or self.u.max() >= n or self.v.max() >= n:
            raise GraphError(f"edge endpoint outside [0, {n})")
        if np.any(self.u == self.v):
            raise GraphError("self loops are not allowed")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights <= 0):
            raise GraphError("edge weights must be finite and strictly positive")
        lo = np.minimum(self.u, self.v)
        hi = np.maximum(self.u, self.v)
        keys = lo * n + hi
        if len(np.unique(keys)) != len(keys):
            raise GraphError("duplicate undirected edge")

    @property
    def n_edges(self):
        return len(self.u)

    def edges(self):
        """Iterate over ``(u, v, w)`` triples in insertion order."""
        return zip(self.u.tolist(), self.v.tolist(), self.weights.tolist())

    def with_weights(self, weights):
        """Copy sharing the edge list, with a different weight vector."""
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != self.weights.shape:
            raise GraphError(
                f"expected {self.weights.shape[0]} weights, got {weights.shape}")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise GraphError("edge weights must be finite and strictly positive")
        g = Graph(self.n_vertices, self.u, self.v, weights.copy(), check=False)
        g._adjacency = self._adjacency
        return g

    def neighbors(self, x):
        """Return ``(neighbor, weight)`` pairs of vertex ``x``."""
        adj = self.adjacency()
        return [(y, self.weights[e]) for y, e in adj[x]]

    def adjacency(self):
        """Per-vertex lists of ``(neighbor, edge index)``; cached."""
        if self._adjacency is None:
            adj = [[] for _ in range(self.n_vertices)]
            for e, (a, b) in enumerate(zip(self.u.tolist(), self.v.tolist())):
                adj[a].append((b, e))
                adj[b].append((a, e))
            self._adjacency = adj
        return self._adjacency

    def connected_components(self):
        """Per-vertex component id, numbered by first appearance."""
        uf = UnionFind(self.n_vertices)
        for a, b in zip(self.u.tolist(), self.v.tolist()):
            uf.union(a, b)
        return uf.component_ids()

    def to_text(self):
        """Debug dump: ``# vertices N`` header then one ``u v w`` line per edge."""
        lines = [f"# vertices {self.n_vertices}"]
        lines += [f"{a} {b} {w!r}" for a, b, w in self.edges()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        n = None
        edges = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "vertices":
                    n = int(parts[1])
                continue
            a, b, w = line.split()
            edges.append((int(a), int(b), float(w)))
        if n is None:
            raise GraphError("missing '# vertices N' header")
        return cls.from_edges(n, edges)

    def __repr__(self):
        return f"Graph(n_vertices={self.n_vertices}, n_edges={self.n_edges})"


class UnionFind:
    """Disjoint sets with union by rank, path compression and root labels.

    ``root_label[r]`` is only meaningful when ``r`` is a root. A union of
    two roots carrying different labels is refused.
    """

    def __init__(self, n, labels=None):
        self.parent = list(range(n))
        self.rank = [0] * n
        if labels is None:
            self.root_label = [UNLABELED] * n
        else:
            self.root_label = [int(x) for x in labels]

    def find(self, x):
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, x, y):
        """Merge the sets of ``x`` and ``y``; return the new root."""
        rx, ry = self.find(x), self.find(y)
        if rx == ry:
            return rx
        lx, ly = self.root_label[rx], self.root_label[ry]
        if lx != UNLABELED and ly != UNLABELED and lx != ly:
            raise GraphError("refusing to merge components with different labels")
        if self.rank[rx] < self.rank[ry]:
            rx, ry = ry, rx
        self.parent[ry] = rx
        if self.rank[rx] == self.rank[ry]:
            self.rank[rx] += 1
        self.root_label[rx] = lx if lx != UNLABELED else ly
        return rx

    def label_of(self, x):
        return self.root_label[self.find(x)]

    def component_ids(self):
        ids = {}
        out = np.empty(len(self.parent), dtype=np.int64)
        for x in range(len(self.parent)):
            out[x] = ids.setdefault(self.find(x), len(ids))
        return out


def as_seed_array(seeds: SeedLike, n_vertices: int) -> np.ndarray:
    """Dense seed labels (``UNLABELED`` for non-seeds) from a mapping or array."""
    if isinstance(seeds, Mapping):
        arr = np.full(n_vertices, UNLABELED, dtype=np.int64)
        for vertex, cls in seeds.items():
            vertex = int(vertex)
            if not 0 <= vertex < n_vertices:
                raise GraphError(f"seed vertex {vertex} outside [0, {n_vertices})")
            if int(cls) < 0:
                raise GraphError(f"seed class must be non-negative, got {cls}")
            arr[vertex] = int(cls)
        return arr
    arr = np.asarray(seeds, dtype=np.int64)
    if arr.shape != (n_vertices,):
        raise GraphError(f"dense seed array must have shape ({n_vertices},), got {arr.shape}")
    if np.any(arr < UNLABELED):
        raise GraphError("seed classes must be non-negative (or UNLABELED)")
    return arr.copy()


def edge_order(g: Graph) -> np.ndarray:
    """Edge indices sorted by ascending (weight, insertion index)."""
    return np.argsort(g.weights, kind="stable")


def watershed_label(g: Graph, seeds: SeedLike):
    """Seeded watershed by ordered union-find.

    Edges are visited by increasing weight (ties by insertion order). An edge
    whose two endpoint components both already carry a label is skipped,
    every other edge merges its endpoints. Each vertex then takes the label
    of its component; components without a seed stay ``UNLABELED``.

    Returns
    -------
    labels : ndarray of int64, shape (n_vertices,)
    components : ndarray of int64, shape (n_vertices,)
    """
    seed_arr = as_seed_array(seeds, g.n_vertices)
    if not np.any(seed_arr != UNLABELED):
        raise GraphError("watershed needs at least one seed")
    uf = UnionFind(g.n_vertices, seed_arr.tolist())
    root_label = uf.root_label
    find = uf.find
    us = g.u.tolist()
    vs = g.v.tolist()
    for e in edge_order(g).tolist():
        rx = find(us[e])
        ry = find(vs[e])
        if rx == ry:
            continue
        if root_label[rx] != UNLABELED and root_label[ry] != UNLABELED:
            continue
        uf.union(rx, ry)
    labels = np.fromiter((root_label[find(x)] for x in range(g.n_vertices)),
                         dtype=np.int64, count=g.n_vertices)
    return labels, uf.component_ids()


def minimum_spanning_forest(g: Graph) -> np.ndarray:
    """Kruskal; returns the indices of the forest edges in processing order."""
    uf = UnionFind(g.n_vertices)
    us = g.u.tolist()
    vs = g.v.tolist()
    keep = []
    for e in edge_order(g).tolist():
        rx, ry = uf.find(us[e]), uf.find(vs[e])
        if rx != ry:
            uf.union(rx, ry)
            keep.append(e)
    return np.asarray(keep, dtype=np.int64)


def _forest_adjacency(g: Graph):
    adj = [[] for _ in range(g.n_vertices)]
    w = g.weights
    for e in minimum_spanning_forest(g).tolist():
        a, b = int(g.u[e]), int(g.v[e])
        adj[a].append((b, w[e]))
        adj[b].append((a, w[e]))
    return adj


def pass_values_from(g: Graph, sources, forest=None) -> np.ndarray:
    """Pass value from the nearest of ``sources`` to every vertex.

    Computed as the largest edge on the minimum spanning forest path;
    unreachable vertices get ``DISCONNECTED``.
    """
    if forest is None:
        forest = _forest_adjacency(g)
    out = np.full(g.n_vertices, DISCONNECTED)
    heap = []
    for s in sources:
        s = int(s)
        if not 0 <= s < g.n_vertices:
            raise GraphError(f"vertex {s} outside [0, {g.n_vertices})")
        out[s] = 0.0
        heap.append((0.0, s))
    heapq.heapify(heap)
    done = np.zeros(g.n_vertices, dtype=bool)
    while heap:
        d, x = heapq.heappop(heap)
        if done[x]:
            continue
        done[x] = True
        for y, w in forest[x]:
            nd = d if d >= w else w
            if nd < out[y]:
                out[y] = nd
                heapq.heappush(heap, (nd, y))
    return out


def pass_value(g: Graph, u: int, v: int) -> float:
    """Minimum over u-v paths of the maximum edge weight.

    Zero for ``u == v``; ``DISCONNECTED`` when no path exists.
    """
    for x in (u, v):
        if not 0 <= x < g.n_vertices:
            raise GraphError(f"vertex {x} outside [0, {g.n_vertices})")
    if u == v:
        return 0.0
    return float(pass_values_from(g, [u])[v])


def set_dissimilarity(g: Graph, X, Y, forest=None) -> float:
    """Smallest pass value between a vertex of ``X`` and a vertex of ``Y``."""
    X = [int(x) for x in X]
    Y = np.asarray(list(Y), dtype=np.int64)
    if not X or len(Y) == 0:
        raise GraphError("set dissimilarity needs two non-empty vertex sets")
    return float(pass_values_from(g, X, forest)[Y].min())


class Margin(NamedTuple):
    margin: float
    labels: np.ndarray
    disconnected: bool


def partition_margin(g: Graph, seeds: SeedLike, labels, forest=None) -> float:
    """Min over classes c of the dissimilarity between seeds of c and the
    vertices labeled otherwise. ``DISCONNECTED`` if no such pair is connected."""
    seed_arr = as_seed_array(seeds, g.n_vertices)
    labels = np.asarray(labels)
    if forest is None:
        forest = _forest_adjacency(g)
    best = DISCONNECTED
    for c in np.unique(seed_arr[seed_arr != UNLABELED]).tolist():
        others = np.flatnonzero(labels != c)
        if len(others) == 0:
            continue
        d = set_dissimilarity(g, np.flatnonzero(seed_arr == c), others, forest)
        best = min(best, d)
    return best


def _minimax_matrix(g: Graph) -> np.ndarray:
    """All-pairs pass values by a Floyd-Warshall style closure (max, min)."""
    n = g.n_vertices
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for a, b, w in g.edges():
        d[a, b] = d[b, a] = min(d[a, b], w)
    for k in range(n):
        d = np.minimum(d, np.maximum(d[:, k:k + 1], d[k:k + 1, :]))
    return d


def brute_force_max_margin(g: Graph, seeds: SeedLike, max_vertices=16) -> Margin:
    """Exhaustive search for a seed-respecting partition of maximum margin.

    Every non-seed vertex is tried with every seed class, so the cost is
    ``C ** (n - n_seeds)``. Pass values come from an all-pairs closure that
    does not use spanning trees. Intended as a test oracle.
    """
    n = g.n_vertices
    if n > max_vertices:
        raise GraphError(f"brute force limited to {max_vertices} vertices, got {n}")
    seed_arr = as_seed_array(seeds, n)
    classes = np.unique(seed_arr[seed_arr != UNLABELED]).tolist()
    if not classes:
        raise GraphError("need at least one seed")
    rho = _minimax_matrix(g)
    free = np.flatnonzero(seed_arr == UNLABELED)
    best_margin, best_labels = -np.inf, None
    labels = seed_arr.copy()
    for assignment in itertools.product(classes, repeat=len(free)):
        labels[free] = assignment
        margin = np.inf
        for c in classes:
            src = seed_arr == c
            dst = labels != c
            if dst.any():
                margin = min(margin, rho[np.ix_(src, dst)].min())
        if margin > best_margin:
            best_margin, best_labels = margin, labels.copy()
    disconnected = bool(np.isinf(best_margin))
    value = DISCONNECTED if disconnected else float(best_margin)
    return Margin(value, best_labels, disconnected)


def label_orphans(g: Graph, labels, seeds: SeedLike) -> np.ndarray:
    """Give each unlabeled vertex the label of the seed with smallest pass value.

    Ties go to the lowest class id, then the lowest seed vertex. Vertices that
    no seed can reach stay ``UNLABELED``.
    """
    seed_arr = as_seed_array(seeds, g.n_vertices)
    seed_ids = np.flatnonzero(seed_arr != UNLABELED)
    if len(seed_ids) == 0:
        raise GraphError("graph has no seeds")
    out = np.array(labels, dtype=np.int64, copy=True)
    orphans = np.flatnonzero(out == UNLABELED)
    if len(orphans) == 0:
        return out
    forest = _forest_adjacency(g)
    seed_cls = seed_arr[seed_ids]
    for x in orphans.tolist():
        rho = pass_values_from(g, [x], forest)[seed_ids]
        if np.all(rho == DISCONNECTED):
            continue
        best = np.lexsort((seed_ids, seed_cls, rho))[0]
        out[x] = seed_cls[best]
    return out
