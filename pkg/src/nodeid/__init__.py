"""Compact discrete node identifiers for graphs.

Train a message-passing encoder jointly with per-layer residual vector
quantizers, then use the resulting small integer code tuples (node IDs) for
fast classification, link prediction, clustering and retrieval.
"""

from .graph import (EdgeSplit, Graph, NormAdj, SparseMatrix, SplitMasks, graph_from_edges,
                    load_graph, mean_adjacency, message_graph, normalize_adjacency, save_graph,
                    split_edges, split_nodes)
from .idtable import NodeIdTable
from .quantize import Codebook, CodebookSet, QuantizeResult, nearest_code, rvq_quantize
from .training import (TrainConfig, TrainLog, TrainResult, generate_ids, train_mae,
                       train_supervised_graph, train_supervised_link, train_supervised_node)
from .downstream import (HeadConfig, IdEmbedder, cluster_ids, embed_ids, ged_1hop,
                         graph_readout, hamming_retrieve, train_graph_head, train_link_head,
                         train_node_head)
from .modelio import read_ids, read_model, write_ids, write_model

__version__ = "0.1.0"

__all__ = [
    "Graph", "NormAdj", "SparseMatrix", "SplitMasks", "EdgeSplit", "NodeIdTable",
    "Codebook", "CodebookSet", "QuantizeResult", "TrainConfig", "TrainLog", "TrainResult",
    "HeadConfig", "IdEmbedder",
    "load_graph", "save_graph", "graph_from_edges", "normalize_adjacency", "mean_adjacency",
    "split_nodes", "split_edges", "message_graph", "nearest_code", "rvq_quantize",
    "train_supervised_node", "train_supervised_link", "train_supervised_graph", "train_mae",
    "generate_ids", "train_node_head", "train_link_head", "train_graph_head", "embed_ids",
    "cluster_ids", "hamming_retrieve", "graph_readout", "ged_1hop",
    "read_ids", "write_ids", "read_model", "write_model",
]
