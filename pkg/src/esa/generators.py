"""Seeded synthetic graph generators."""

from __future__ import annotations

import numpy as np
from scipy import sparse

from . import kernels
from .graph import Graph, undirected


def erdos_renyi_pairs(num_nodes: int, edge_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Undirected G(n, p) edge list as sorted ``(i, j)`` rows with ``i < j``.

    The edge count is drawn from the exact binomial, then that many distinct
    pairs are sampled uniformly.
    """
    total = num_nodes * (num_nodes - 1) // 2
    m = int(rng.binomial(total, edge_prob))
    keys = np.zeros(0, dtype=np.int64)
    while keys.size < m:
        need = m - keys.size
        i = rng.integers(0, num_nodes, size=2 * need + 16)
        j = rng.integers(0, num_nodes, size=2 * need + 16)
        ok = i != j
        lo, hi = np.minimum(i, j)[ok], np.maximum(i, j)[ok]
        new = lo * num_nodes + hi
        # keep first-drawn order so the result depends only on the seed
        merged = np.concatenate([keys, new])
        _, first = np.unique(merged, return_index=True)
        keys = merged[np.sort(first)][:m]
    keys = np.sort(keys)
    return np.stack([keys // num_nodes, keys % num_nodes], axis=1)


def infected_labels(g: Graph, sources, max_path_len: int) -> np.ndarray:
    """Hop distance to the nearest source; beyond `max_path_len` -> `max_path_len + 1`."""
    indptr, nbrs = g.csr()
    return kernels.multi_source_bfs(indptr, nbrs, np.asarray(sources), max_path_len + 1)


def generate_infected_er(
    num_nodes: int,
    num_infected: int,
    max_path_len: int,
    edge_prob: float,
    seed: int,
) -> Graph:
    """Erdős–Rényi graph with node-level shortest-path-to-infection labels.

    Node features are ``[healthy, infected]`` one-hots. Labels are classes
    ``0..max_path_len`` plus ``max_path_len + 1`` for far/unreachable nodes.
    """
    if min(num_nodes, num_infected, max_path_len) <= 0:
        raise ValueError("num_nodes, num_infected and max_path_len must be positive")
    if not 0 < edge_prob < 1:
        raise ValueError(f"edge_prob must lie in (0, 1), got {edge_prob}")
    if num_infected > num_nodes:
        raise ValueError("more infected nodes than nodes")
    rng = np.random.default_rng(seed)
    pairs = erdos_renyi_pairs(num_nodes, edge_prob, rng)
    sources = np.sort(rng.choice(num_nodes, size=num_infected, replace=False))
    x = np.zeros((num_nodes, 2))
    x[:, 0] = 1.0
    x[sources] = [0.0, 1.0]
    g = undirected(num_nodes, pairs, x)
    return g.with_target(infected_labels(g, sources, max_path_len).astype(np.float64))


def generate_ba(num_nodes: int, attach_m: int, seed: int, num_features: int = 1) -> Graph:
    """Barabási–Albert preferential attachment, both orientations stored.

    Starts from `attach_m` isolated nodes; node ``attach_m`` links to all
    of them, and every later node links to `attach_m` distinct targets
    drawn proportionally to degree. Yields ``attach_m * (num_nodes -
    attach_m)`` undirected edges.
    """
    if attach_m < 1 or num_nodes <= attach_m:
        raise ValueError("need attach_m >= 1 and num_nodes > attach_m")
    rng = np.random.default_rng(seed)
    pairs = np.empty((attach_m * (num_nodes - attach_m), 2), dtype=np.int64)
    # endpoint pool: each node appears once per incident edge
    pool = np.empty(2 * len(pairs), dtype=np.int64)
    pool_len = 0
    targets = np.arange(attach_m)
    k = 0
    for source in range(attach_m, num_nodes):
        pairs[k:k + attach_m, 0] = targets
        pairs[k:k + attach_m, 1] = source
        k += attach_m
        pool[pool_len:pool_len + attach_m] = targets
        pool[pool_len + attach_m:pool_len + 2 * attach_m] = source
        pool_len += 2 * attach_m
        chosen: list[int] = []
        while len(chosen) < attach_m:
            for t in pool[rng.integers(0, pool_len, size=attach_m)]:
                if t not in chosen:
                    chosen.append(int(t))
                    if len(chosen) == attach_m:
                        break
        targets = np.array(chosen, dtype=np.int64)
    x = np.ones((num_nodes, num_features))
    return undirected(num_nodes, pairs, x)


def triangle_density(g: Graph) -> float:
    """Triangles per node of an undirected graph stored with both orientations."""
    a = sparse.csr_matrix((np.ones(g.num_edges), g.edge_index), shape=(g.num_nodes, g.num_nodes))
    a.data[:] = 1.0  # collapse duplicate edges
    return float((a @ a).multiply(a).sum() / 6.0 / g.num_nodes)


def ba_for_edges(directed_edges: int, attach_m: int, seed: int) -> Graph:
    """BA graph whose directed edge count is as close as possible to the request."""
    n = max(attach_m + 1, int(round(directed_edges / (2 * attach_m))) + attach_m)
    return generate_ba(n, attach_m, seed)
