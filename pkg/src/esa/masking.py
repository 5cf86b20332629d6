"""Edge- and node-adjacency attention masks for batched graphs.

Convention throughout: a mask entry that is True means attention is
BLOCKED. Dense masks are ``B x L x L`` boolean arrays; sparse masks list
the *allowed* ``(b, i, j)`` coordinates sorted row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .graph import BatchedGraph, Graph
from .tensor import ContractError, mask_floor

COORD_BYTES = 16  # one allowed entry = (row, col) as two int64 values


@dataclass(frozen=True, eq=False)
class AttnMask:
    B: int
    L: int
    dense: np.ndarray | None = None  # B x L x L, True = blocked
    allowed: np.ndarray | None = None  # n x 3 int64 (b, i, j), sorted

    def __post_init__(self):
        if (self.dense is None) == (self.allowed is None):
            raise ValueError("AttnMask needs exactly one of dense / allowed")

    @property
    def layout(self) -> str:
        return "dense" if self.dense is not None else "sparse"

    def to_dense(self) -> "AttnMask":
        if self.dense is not None:
            return self
        blocked = np.ones((self.B, self.L, self.L), dtype=bool)
        b, i, j = self.allowed.T
        blocked[b, i, j] = False
        return AttnMask(self.B, self.L, dense=blocked)

    def to_sparse(self) -> "AttnMask":
        if self.allowed is not None:
            return self
        return AttnMask(self.B, self.L, allowed=np.argwhere(~self.dense).astype(np.int64))

    def blocked_array(self) -> np.ndarray:
        return self.to_dense().dense

    def num_allowed(self) -> int:
        if self.allowed is not None:
            return len(self.allowed)
        return int((~self.dense).sum())

    def equals(self, other: "AttnMask") -> bool:
        return (self.B, self.L) == (other.B, other.L) and np.array_equal(
            self.blocked_array(), other.blocked_array()
        )


def consecutive(starts, total: int) -> np.ndarray:
    """0-based counters restarting at each start; the last run ends at `total`.

    >>> consecutive([1, 4, 6], 10).tolist()
    [0, 1, 2, 0, 1, 0, 1, 2, 3]
    """
    starts = np.asarray(starts, dtype=np.int64)
    if starts.ndim != 1 or starts.size == 0:
        raise ContractError("consecutive needs a non-empty 1-D list of starts")
    if starts[0] < 0 or np.any(np.diff(starts) <= 0):
        raise ContractError(f"starts must be strictly increasing and non-negative: {starts.tolist()}")
    if total < starts[-1]:
        raise ContractError(f"total {total} is below the last start {starts[-1]}")
    return kernels.segment_offsets(np.append(starts, total))


def first_unique_index(xs) -> np.ndarray:
    """Index of the first occurrence of each unique value, values ascending."""
    _, idx = np.unique(np.asarray(xs), return_index=True)
    return idx.astype(np.int64)


def edge_adjacency(edge_index) -> np.ndarray:
    """Dense ``N_e x N_e`` boolean matrix, True where two edges share an endpoint."""
    ei = np.asarray(edge_index)
    src = ei[0][:, None]
    trg = ei[1][:, None]
    src_adj = src == src.T
    trg_adj = trg == trg.T
    cross = (src == trg.T) | (trg == src.T)
    return src_adj | trg_adj | cross


def _check_size(counts: np.ndarray, L: int, what: str) -> None:
    if counts.size and L < counts.max():
        raise ContractError(f"mask size {L} is smaller than the largest per-graph {what} count {counts.max()}")


def edge_mask(batched_edge_index, batch_map, B: int, L: int, layout: str = "dense") -> AttnMask:
    """Edge-adjacency mask over padded edge slots (True = blocked).

    Edges must be grouped by graph, as produced by `esa.graph.batch`.
    """
    bei = np.asarray(batched_edge_index, dtype=np.int64).reshape(2, -1)
    batch_map = np.asarray(batch_map, dtype=np.int64)
    n_e = bei.shape[1]
    edge_to_graph = batch_map[bei[0]]
    _check_size(np.bincount(edge_to_graph, minlength=B), L, "edge")
    if n_e == 0:
        empty = AttnMask(B, L, allowed=np.zeros((0, 3), dtype=np.int64))
        return empty if layout == "sparse" else empty.to_dense()
    ei_to_original = consecutive(first_unique_index(edge_to_graph), n_e)

    if layout == "dense":
        mask = np.zeros((B, L, L), dtype=bool)
        rows, cols = np.nonzero(edge_adjacency(bei))
        graph_index = edge_to_graph[rows]
        mask[graph_index, ei_to_original[rows], ei_to_original[cols]] = True
        return AttnMask(B, L, dense=~mask)
    if layout == "sparse":
        rows, cols = kernels.edge_adjacency_coo(bei[0], bei[1], batch_map.size)
        coords = np.stack(
            [edge_to_graph[rows], ei_to_original[rows], ei_to_original[cols]], axis=1
        )
        return AttnMask(B, L, allowed=coords)
    raise ValueError(f"unknown layout {layout!r}")


def node_mask(batched_edge_index, batch_map, B: int, M: int, layout: str = "dense") -> AttnMask:
    """Node-adjacency mask: (b, i, j) allowed iff edge (i, j) is in graph b.

    No implicit diagonal: a node attends to itself only through a self-loop.
    """
    bei = np.asarray(batched_edge_index, dtype=np.int64).reshape(2, -1)
    batch_map = np.asarray(batch_map, dtype=np.int64)
    _check_size(np.bincount(batch_map, minlength=B), M, "node")
    graph_idx = batch_map[bei[0]]
    node_offset = np.zeros(B, dtype=np.int64)
    present = np.unique(batch_map)
    node_offset[present] = first_unique_index(batch_map)
    local = bei - node_offset[graph_idx]
    if layout == "dense":
        mask = np.zeros((B, M, M), dtype=bool)
        mask[graph_idx, local[0], local[1]] = True
        return AttnMask(B, M, dense=~mask)
    if layout == "sparse":
        key = (graph_idx * M + local[0]) * M + local[1]
        key = np.unique(key)
        coords = np.stack([key // (M * M), (key // M) % M, key % M], axis=1)
        return AttnMask(B, M, allowed=coords.astype(np.int64))
    raise ValueError(f"unknown layout {layout!r}")


def edge_mask_for(bg: BatchedGraph, L: int | None = None, layout: str = "dense") -> AttnMask:
    L = int(bg.edge_counts().max()) if L is None else L
    return edge_mask(bg.edge_index, bg.batch_map, bg.B, L, layout)


def node_mask_for(bg: BatchedGraph, L: int | None = None, layout: str = "dense") -> AttnMask:
    L = int(bg.node_counts().max()) if L is None else L
    return node_mask(bg.edge_index, bg.batch_map, bg.B, L, layout)


def padding_mask(pad_mask: np.ndarray, layout: str = "dense") -> AttnMask:
    """All real-to-real pairs allowed, anything touching a padded slot blocked."""
    pad_mask = np.asarray(pad_mask, dtype=bool)
    B, L = pad_mask.shape
    allowed = pad_mask[:, :, None] & pad_mask[:, None, :]
    mask = AttnMask(B, L, dense=~allowed)
    return mask if layout == "dense" else mask.to_sparse()


def to_additive(mask: AttnMask, floor: float | None = None, dtype=np.float64) -> np.ndarray:
    """Allowed entries -> 0, blocked entries -> `floor` (large negative)."""
    if floor is None:
        floor = mask_floor(dtype)
    blocked = mask.blocked_array()
    return np.where(blocked, floor, 0.0).astype(dtype)


def mask_storage_report(g: Graph, L: int | None = None) -> dict:
    """Bytes needed to hold the edge mask of `g` densely vs as coordinates."""
    if L is None:
        L = g.num_edges
    rows, _ = kernels.edge_adjacency_coo(g.edge_index[0], g.edge_index[1], g.num_nodes)
    entries = int(rows.size)
    return {
        "edges": g.num_edges,
        "dense_bytes": int(L) * int(L),
        "sparse_entries": entries,
        "sparse_bytes": entries * COORD_BYTES,
    }


# -- file output ------------------------------------------------------------


def format_mask_dense(mask: AttnMask) -> str:
    """``esa-mask dense B L`` header, then B*L rows of L chars ('1' = blocked)."""
    blocked = mask.blocked_array()
    lines = [f"esa-mask dense {mask.B} {mask.L}"]
    for b in range(mask.B):
        lines += ["".join("1" if v else "0" for v in row) for row in blocked[b]]
    return "\n".join(lines) + "\n"


def format_mask_sparse(mask: AttnMask) -> str:
    """``esa-mask sparse B L count`` header, then one ``b i j`` allowed entry per line."""
    coords = mask.to_sparse().allowed
    lines = [f"esa-mask sparse {mask.B} {mask.L} {len(coords)}"]
    lines += [f"{b} {i} {j}" for b, i, j in coords]
    return "\n".join(lines) + "\n"


def parse_mask(text: str) -> AttnMask:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if head[:2] == ["esa-mask", "dense"]:
        B, L = int(head[2]), int(head[3])
        rows = np.array([[c == "1" for c in ln.strip()] for ln in lines[1:]], dtype=bool)
        return AttnMask(B, L, dense=rows.reshape(B, L, L))
    if head[:2] == ["esa-mask", "sparse"]:
        B, L = int(head[2]), int(head[3])
        coords = np.array([ln.split() for ln in lines[1:]], dtype=np.int64).reshape(-1, 3)
        return AttnMask(B, L, allowed=coords)
    raise ValueError("not an esa-mask file")
