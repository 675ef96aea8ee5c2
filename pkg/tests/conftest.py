import itertools

import numpy as np
import pytest

from triplet_watershed.graph import Graph


def random_connected_graph(rng, n, extra=0.4, integer_weights=False):
    """Random spanning tree plus each remaining pair with probability ``extra``."""
    edges = {}
    order = rng.permutation(n)
    for i in range(1, n):
        a, b = int(order[i]), int(order[rng.integers(0, i)])
        edges[(min(a, b), max(a, b))] = None
    for a, b in itertools.combinations(range(n), 2):
        if (a, b) not in edges and rng.random() < extra:
            edges[(a, b)] = None
    keys = list(edges)
    if integer_weights:
        w = rng.integers(1, 4, len(keys)).astype(float)
    else:
        w = rng.uniform(0.1, 10.0, len(keys))
    u = [k[0] for k in keys]
    v = [k[1] for k in keys]
    return Graph(n, u, v, w)


def brute_pass_value(g, s, t):
    """Min over simple paths of the max edge, by exhaustive DFS."""
    if s == t:
        return 0.0
    adj = {x: [] for x in range(g.n_vertices)}
    for a, b, w in g.edges():
        adj[a].append((b, w))
        adj[b].append((a, w))
    best = [np.inf]

    def dfs(x, seen, worst):
        if x == t:
            best[0] = min(best[0], worst)
            return
        for y, w in adj[x]:
            if y not in seen:
                dfs(y, seen | {y}, max(worst, w))

    dfs(s, {s}, -np.inf)
    return best[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
