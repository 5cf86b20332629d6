"""Pure numpy implementations of the hot kernels.

Signatures and results match the compiled `_kernels` extension exactly;
`esa.kernels` picks whichever is importable.
"""

import numpy as np


def segment_offsets(indptr):
    """Per-entry 0-based position inside its CSR segment."""
    indptr = np.asarray(indptr, dtype=np.int64)
    sizes = np.diff(indptr)
    n = int(indptr[-1] - indptr[0])
    return np.arange(n, dtype=np.int64) - np.repeat(indptr[:-1] - indptr[0], sizes)


def edge_adjacency_coo(src, trg, num_nodes):
    """Allowed (p, q) pairs of edges sharing an endpoint, sorted row-major.

    The diagonal is included. Returns two int64 arrays.
    """
    src = np.asarray(src, dtype=np.int64)
    trg = np.asarray(trg, dtype=np.int64)
    n_e = src.shape[0]
    if n_e == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy()
    eid = np.arange(n_e, dtype=np.int64)
    loop = src == trg
    nodes = np.concatenate([src, trg[~loop]])
    edges = np.concatenate([eid, eid[~loop]])
    order = np.lexsort((edges, nodes))
    nodes, edges = nodes[order], edges[order]

    counts = np.bincount(nodes, minlength=num_nodes)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rep = counts[nodes]
    rows = np.repeat(edges, rep)
    base = np.repeat(starts[nodes], rep)
    ptr = np.concatenate([[0], np.cumsum(rep)])
    cols = edges[base + segment_offsets(ptr)]

    keys = np.unique(rows * n_e + cols)
    return keys // n_e, keys % n_e


def multi_source_bfs(indptr, indices, sources, cap):
    """Hop distance to the nearest source, saturating at `cap`.

    Nodes farther than `cap - 1` hops (or unreachable) get `cap`.
    """
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    n = indptr.shape[0] - 1
    dist = np.full(n, cap, dtype=np.int64)
    frontier = np.unique(np.asarray(sources, dtype=np.int64))
    level = 0
    while frontier.size and level < cap:
        dist[frontier] = level
        sizes = indptr[frontier + 1] - indptr[frontier]
        starts = np.repeat(indptr[frontier], sizes)
        ptr = np.concatenate([[0], np.cumsum(sizes)])
        nbrs = indices[starts + segment_offsets(ptr)]
        frontier = np.unique(nbrs[dist[nbrs] == cap])
        frontier = frontier[dist[frontier] == cap]
        level += 1
    return dist


def segment_softmax(scores, indptr):
    """Softmax within each CSR row segment; empty rows contribute nothing."""
    scores = np.asarray(scores)
    sizes = np.diff(indptr)
    if scores.size == 0:
        return scores.copy()
    nonempty = sizes > 0
    starts = np.asarray(indptr[:-1])[nonempty]
    row_max = np.maximum.reduceat(scores, starts)
    rep = sizes[nonempty]
    e = np.exp(scores - np.repeat(row_max, rep))
    z = np.add.reduceat(e, starts)
    return e / np.repeat(z, rep)


def segment_softmax_backward(p, dp, indptr):
    """Gradient of `segment_softmax` wrt its scores, given output grads."""
    p = np.asarray(p)
    if p.size == 0:
        return p.copy()
    sizes = np.diff(indptr)
    nonempty = sizes > 0
    starts = np.asarray(indptr[:-1])[nonempty]
    dot = np.add.reduceat(p * dp, starts)
    return p * (dp - np.repeat(dot, sizes[nonempty]))
