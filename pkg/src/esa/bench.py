"""Wall-clock comparison of the compiled kernels against the numpy fallback."""

from __future__ import annotations

import timeit

import numpy as np

from . import generators, kernels


def _cases(scale: int, seed: int):
    rng = np.random.default_rng(seed)
    g = generators.generate_ba(scale, 3, seed)
    src, trg = g.edge_index
    indptr, nbrs = g.csr()
    sources = rng.choice(g.num_nodes, size=4, replace=False)
    rows, _ = kernels.edge_adjacency_coo(src, trg, g.num_nodes)
    ptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=g.num_edges))])
    scores = rng.normal(size=rows.size)
    p = kernels.segment_softmax(scores, ptr)
    dp = rng.normal(size=rows.size)
    sizes = rng.integers(1, 64, size=scale)
    seg_ptr = np.concatenate([[0], np.cumsum(sizes)])
    return {
        "edge_adjacency_coo": lambda be: be.edge_adjacency_coo(src, trg, g.num_nodes),
        "multi_source_bfs": lambda be: be.multi_source_bfs(indptr, nbrs, sources, 21),
        "segment_softmax": lambda be: be.segment_softmax(scores, ptr),
        "segment_softmax_backward": lambda be: be.segment_softmax_backward(p, dp, ptr),
        "segment_offsets": lambda be: be.segment_offsets(seg_ptr),
    }


def kernel_benchmark(scale: int = 4000, repeat: int = 5, seed: int = 0) -> list[dict]:
    """Best-of-`repeat` seconds per kernel for each available backend."""
    backends = {"python": kernels.python_backend}
    if kernels.compiled_backend is not None:
        backends["cython"] = kernels.compiled_backend
    rows = []
    for name, fn in _cases(scale, seed).items():
        row = {"kernel": name}
        for label, be in backends.items():
            row[label] = min(timeit.repeat(lambda: fn(be), number=1, repeat=repeat))
        if "cython" in row:
            row["speedup"] = row["python"] / row["cython"]
        rows.append(row)
    return rows


def format_rows(rows: list[dict]) -> str:
    cols = ["kernel", "python", "cython", "speedup"]
    out = [",".join(cols)]
    for r in rows:
        out.append(",".join(
            r["kernel"] if c == "kernel" else (f"{r[c]:.6g}" if c in r else "") for c in cols
        ))
    return "\n".join(out) + "\n"
