"""Graph containers, batching, tokenisation, line graphs and 1-WL hashing."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels


class GraphError(ValueError):
    """Malformed or inconsistent graph input."""


def _as_matrix(x, rows: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1 and rows == 0 and arr.size == 0:
        arr = arr.reshape(0, 0)
    if arr.ndim != 2 or arr.shape[0] != rows:
        raise GraphError(f"{name} must have {rows} rows, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    edge_index: np.ndarray
    node_features: np.ndarray
    edge_features: np.ndarray = None
    target: np.ndarray | None = None

    def __post_init__(self):
        ei = np.asarray(self.edge_index, dtype=np.int64)
        if ei.size == 0:
            ei = ei.reshape(2, 0)
        if ei.ndim != 2 or ei.shape[0] != 2:
            raise GraphError(f"edge_index must be 2 x N_e, got shape {ei.shape}")
        if ei.size and (ei.min() < 0 or ei.max() >= self.num_nodes):
            raise GraphError(f"edge ids must lie in [0, {self.num_nodes})")
        n_e = ei.shape[1]
        nf = _as_matrix(self.node_features, self.num_nodes, "node_features")
        ef = self.edge_features
        ef = np.zeros((n_e, 0)) if ef is None else _as_matrix(ef, n_e, "edge_features")
        if ef.shape[1] == 0:
            ef = ef.reshape(n_e, 0)
        object.__setattr__(self, "edge_index", ei)
        object.__setattr__(self, "node_features", nf)
        object.__setattr__(self, "edge_features", ef)
        if self.target is not None:
            object.__setattr__(self, "target", np.atleast_1d(np.asarray(self.target, dtype=np.float64)))

    @property
    def num_edges(self) -> int:
        return self.edge_index.shape[1]

    @property
    def d_n(self) -> int:
        return self.node_features.shape[1]

    @property
    def d_e(self) -> int:
        return self.edge_features.shape[1]

    def csr(self):
        """Out-neighbour CSR (indptr, indices), neighbours in edge order."""
        src, trg = self.edge_index
        order = np.argsort(src, kind="stable")
        indptr = np.concatenate([[0], np.cumsum(np.bincount(src, minlength=self.num_nodes))])
        return indptr, trg[order]

    def relabel(self, perm) -> "Graph":
        """Graph with node `i` renamed to `perm[i]` (features moved along)."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return Graph(
            self.num_nodes,
            perm[self.edge_index],
            self.node_features[inv],
            self.edge_features,
            self.target if self.target is None or self.target.size != self.num_nodes
            else self.target[inv],
        )

    def with_target(self, target) -> "Graph":
        return Graph(self.num_nodes, self.edge_index, self.node_features, self.edge_features, target)


def undirected(num_nodes: int, pairs, node_features, edge_features=None, target=None) -> Graph:
    """Build a graph storing both orientations of every undirected pair.

    Edge order is all (i, j) pairs as given, followed by their reverses.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    ei = np.concatenate([pairs.T, pairs[:, ::-1].T], axis=1)
    ef = None
    if edge_features is not None:
        ef = np.asarray(edge_features, dtype=np.float64).reshape(len(pairs), -1)
        ef = np.concatenate([ef, ef])
    return Graph(num_nodes, ei, node_features, ef, target)


def degree_one_hot(g: Graph, max_degree: int = 16) -> Graph:
    """Replace node features with a one-hot in-degree capped at `max_degree`."""
    deg = np.minimum(np.bincount(g.edge_index[1], minlength=g.num_nodes), max_degree)
    x = np.zeros((g.num_nodes, max_degree + 1))
    x[np.arange(g.num_nodes), deg] = 1.0
    return Graph(g.num_nodes, g.edge_index, x, g.edge_features, g.target)


@dataclass(frozen=True, eq=False)
class BatchedGraph:
    """Disjoint union of graphs with node ids offset by running sums."""

    edge_index: np.ndarray
    node_features: np.ndarray
    edge_features: np.ndarray
    batch_map: np.ndarray
    node_ptr: np.ndarray
    edge_ptr: np.ndarray
    targets: tuple = field(default=())

    @property
    def B(self) -> int:
        return len(self.node_ptr) - 1

    @property
    def num_nodes(self) -> int:
        return int(self.node_ptr[-1])

    @property
    def num_edges(self) -> int:
        return int(self.edge_ptr[-1])

    def node_counts(self) -> np.ndarray:
        return np.diff(self.node_ptr)

    def edge_counts(self) -> np.ndarray:
        return np.diff(self.edge_ptr)

    def unbatch(self) -> list[Graph]:
        out = []
        for b in range(self.B):
            n0, n1 = self.node_ptr[b], self.node_ptr[b + 1]
            e0, e1 = self.edge_ptr[b], self.edge_ptr[b + 1]
            out.append(
                Graph(
                    int(n1 - n0),
                    self.edge_index[:, e0:e1] - n0,
                    self.node_features[n0:n1],
                    self.edge_features[e0:e1],
                    self.targets[b] if self.targets else None,
                )
            )
        return out


def batch(graphs) -> BatchedGraph:
    graphs = list(graphs)
    if not graphs:
        raise GraphError("cannot batch an empty list of graphs")
    d_n, d_e = graphs[0].d_n, graphs[0].d_e
    for g in graphs[1:]:
        if (g.d_n, g.d_e) != (d_n, d_e):
            raise GraphError(
                f"inconsistent feature dims: ({d_n}, {d_e}) vs ({g.d_n}, {g.d_e})"
            )
    node_ptr = np.concatenate([[0], np.cumsum([g.num_nodes for g in graphs])]).astype(np.int64)
    edge_ptr = np.concatenate([[0], np.cumsum([g.num_edges for g in graphs])]).astype(np.int64)
    ei = np.concatenate(
        [g.edge_index + off for g, off in zip(graphs, node_ptr[:-1])], axis=1
    ).astype(np.int64)
    return BatchedGraph(
        edge_index=ei,
        node_features=np.concatenate([g.node_features for g in graphs]),
        edge_features=np.concatenate([g.edge_features for g in graphs]),
        batch_map=np.repeat(np.arange(len(graphs)), np.diff(node_ptr)),
        node_ptr=node_ptr,
        edge_ptr=edge_ptr,
        targets=tuple(g.target for g in graphs) if all(g.target is not None for g in graphs) else (),
    )


@dataclass(frozen=True, eq=False)
class TokenSet:
    tokens: np.ndarray  # B x L x d_tok, zero on padded rows
    pad_mask: np.ndarray  # B x L, True = real token
    kind: str  # "edge" or "node"

    @property
    def L(self) -> int:
        return self.tokens.shape[1]

    @property
    def B(self) -> int:
        return self.tokens.shape[0]


def _pad(rows: np.ndarray, ptr: np.ndarray, L: int | None, kind: str) -> TokenSet:
    counts = np.diff(ptr)
    need = int(counts.max()) if counts.size else 0
    if L is None:
        L = need
    elif L < need:
        raise GraphError(f"L={L} is smaller than the largest {kind} count {need}")
    B = counts.size
    tokens = np.zeros((B, L, rows.shape[1]), dtype=rows.dtype)
    pad_mask = np.zeros((B, L), dtype=bool)
    b = np.repeat(np.arange(B), counts)
    pos = kernels.segment_offsets(ptr)
    tokens[b, pos] = rows
    pad_mask[b, pos] = True
    return TokenSet(tokens, pad_mask, kind)


def build_edge_tokens(bg: BatchedGraph, L: int | None = None) -> TokenSet:
    """Edge tokens ``[n_src, n_trg, e]`` padded to the batch (or given) max."""
    if bg.node_features.shape[1] == 0:
        raise GraphError("graphs without node features are rejected; add degree features")
    src, trg = bg.edge_index
    rows = np.concatenate(
        [bg.node_features[src], bg.node_features[trg], bg.edge_features], axis=1
    )
    return _pad(rows, bg.edge_ptr, L, "edge")


def build_node_tokens(bg: BatchedGraph, L: int | None = None) -> TokenSet:
    if bg.node_features.shape[1] == 0:
        raise GraphError("graphs without node features are rejected; add degree features")
    return _pad(bg.node_features, bg.node_ptr, L, "node")


def line_graph(g: Graph) -> Graph:
    """Graph over the directed edges of `g`; adjacency = shared endpoint.

    Node features of the result are the edge tokens of `g`.
    """
    rows, cols = kernels.edge_adjacency_coo(g.edge_index[0], g.edge_index[1], g.num_nodes)
    off = rows != cols
    src, trg = g.edge_index
    feats = np.concatenate([g.node_features[src], g.node_features[trg], g.edge_features], axis=1)
    return Graph(g.num_edges, np.stack([rows[off], cols[off]]), feats)


def _digest(text: str) -> str:
    return hashlib.blake2b(text.encode(), digest_size=16).hexdigest()


def wl1_hash(g: Graph, iterations: int | None = None, use_features: bool = False) -> str:
    """1-WL colour-refinement hash, invariant under node relabelling.

    Initial colours are out-degrees (or node feature rows). Each round
    recolours a node by its colour and the sorted multiset of its
    out-neighbours' colours; the hash covers the colour histogram of
    every round.
    """
    if iterations is None:
        iterations = max(g.num_nodes, 1)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    indptr, nbrs = g.csr()
    if use_features:
        colors = [_digest(",".join(map(repr, row.tolist()))) for row in g.node_features]
    else:
        colors = [str(int(d)) for d in np.diff(indptr)]
    history = [sorted(Counter(colors).items())]
    for _ in range(iterations):
        colors = [
            _digest(colors[u] + "|" + ",".join(sorted(colors[v] for v in nbrs[indptr[u]:indptr[u + 1]])))
            for u in range(g.num_nodes)
        ]
        history.append(sorted(Counter(colors).items()))
    return _digest(repr(history))


# -- text format -----------------------------------------------------------


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def format_graph(g: Graph) -> str:
    lines = [f"graph {g.num_nodes} {g.num_edges} {g.d_n} {g.d_e}"]
    if g.d_n:
        lines += [" ".join(map(_fmt, row)) for row in g.node_features]
    for (s, t), feats in zip(g.edge_index.T, g.edge_features):
        lines.append(" ".join([str(s), str(t)] + [_fmt(v) for v in feats]))
    if g.target is not None:
        lines.append("target " + " ".join(map(_fmt, g.target)))
    return "\n".join(lines) + "\n"


def write_graphs(path, graphs) -> None:
    Path(path).write_text("---\n".join(format_graph(g) for g in graphs))


def parse_graphs(text: str, source: str = "<string>") -> list[Graph]:
    """Parse the line-oriented graph format (``---`` separates graphs).

    When ``d_n`` is 0 the node-feature block is absent.
    """
    graphs = []
    lines = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append((lineno, line))
    i = 0
    while i < len(lines):
        lineno, line = lines[i]
        if line == "---":
            i += 1
            continue
        parts = line.split()
        if parts[0] != "graph" or len(parts) != 5:
            raise GraphError(f"{source}:{lineno}: expected 'graph N_n N_e d_n d_e', got {line!r}")
        try:
            n_n, n_e, d_n, d_e = map(int, parts[1:])
        except ValueError:
            raise GraphError(f"{source}:{lineno}: non-integer header field") from None
        i += 1

        def take(count, width, what):
            nonlocal i
            rows = []
            for _ in range(count):
                if i >= len(lines) or lines[i][1] == "---":
                    raise GraphError(f"{source}:{lineno}: graph truncated while reading {what}")
                ln, body = lines[i]
                vals = body.split()
                if len(vals) != width:
                    raise GraphError(f"{source}:{ln}: expected {width} values for {what}, got {len(vals)}")
                rows.append(vals)
                i += 1
            return rows

        try:
            nf = np.array(take(n_n, d_n, "node features"), dtype=np.float64).reshape(n_n, d_n) if d_n else np.zeros((n_n, 0))
            er = take(n_e, 2 + d_e, "edges")
            ei = np.array([[int(r[0]), int(r[1])] for r in er], dtype=np.int64).reshape(-1, 2).T
            ef = np.array([r[2:] for r in er], dtype=np.float64).reshape(n_e, d_e)
        except GraphError:
            raise
        except ValueError as exc:
            raise GraphError(f"{source}:{lineno}: bad number ({exc})") from None
        target = None
        if i < len(lines) and lines[i][1].startswith("target"):
            target = np.array(lines[i][1].split()[1:], dtype=np.float64)
            i += 1
        graphs.append(Graph(n_n, ei, nf, ef, target))
    return graphs


def read_graphs(path) -> list[Graph]:
    path = Path(path)
    if path.is_dir():
        out = []
        for p in sorted(path.glob("*.graph")):
            out.extend(parse_graphs(p.read_text(), str(p)))
        return out
    return parse_graphs(path.read_text(), str(path))
