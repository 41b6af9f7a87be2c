"""Unsupervised node embeddings via node-wise contrastive learning.

Pipeline: random-walk views -> two-layer GCN encoder with a
sigmoid(mean+max) readout -> per-anchor contrast sets with class-collision
filtering and determinantal-point-process negative sampling -> weighted
contrastive loss -> linear-probe evaluation.
"""

from ._kernels import BACKEND as kernel_backend
from .graphs import (Graph, SbmParams, SubgraphView, generate_sbm,
                     induced_subgraph, k_hop_neighbors, load_citation_bundle,
                     normalize_adjacency)
from .pipeline import TrainConfig, linear_evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Graph", "SbmParams", "SubgraphView", "TrainConfig", "generate_sbm",
    "induced_subgraph", "k_hop_neighbors", "kernel_backend",
    "linear_evaluate", "load_citation_bundle", "normalize_adjacency", "train",
]
