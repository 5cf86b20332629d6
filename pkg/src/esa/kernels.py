"""Hot-kernel dispatch: compiled extension when built, numpy otherwise.

Set ``ESA_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _kernels_py as python_backend

try:
    if os.environ.get("ESA_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _kernels as compiled_backend
except ImportError:
    compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND_NAME = "cython" if compiled_backend is not None else "python"

segment_offsets = backend.segment_offsets
edge_adjacency_coo = backend.edge_adjacency_coo
multi_source_bfs = backend.multi_source_bfs
segment_softmax = backend.segment_softmax
segment_softmax_backward = backend.segment_softmax_backward

__all__ = [
    "BACKEND_NAME",
    "backend",
    "compiled_backend",
    "python_backend",
    "segment_offsets",
    "edge_adjacency_coo",
    "multi_source_bfs",
    "segment_softmax",
    "segment_softmax_backward",
]
