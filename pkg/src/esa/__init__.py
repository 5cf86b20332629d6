"""Edge-set attention for graphs, on a small numpy autodiff engine."""

from .graph import BatchedGraph, Graph, batch, line_graph, read_graphs, undirected, wl1_hash, write_graphs
from .kernels import BACKEND_NAME
from .masking import AttnMask, edge_mask, node_mask
from .model import ESA, ModelConfig, esa_forward
from .training import Dataset, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND_NAME",
    "AttnMask",
    "BatchedGraph",
    "Dataset",
    "ESA",
    "Graph",
    "ModelConfig",
    "TrainConfig",
    "batch",
    "edge_mask",
    "esa_forward",
    "evaluate",
    "line_graph",
    "node_mask",
    "read_graphs",
    "train",
    "undirected",
    "wl1_hash",
    "write_graphs",
]
