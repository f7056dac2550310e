"""Deterministic synthetic graphs for tests, demos and desk-scale benchmarks.

No dataset downloading happens anywhere in this library.  When a real
citation graph is not available on disk, :func:`synthetic_citation` builds a
stand-in with the same shape as the classic 2708-node citation benchmark
(7 classes, 5278 undirected edges, 1433 binary bag-of-words features,
homophilous links) so the end-to-end pipeline and its efficiency arithmetic
can run unchanged.  It is clearly a generator, not the published dataset.
"""

from __future__ import annotations

import numpy as np

from . import rng as rngmod
from .graph import Graph, graph_from_edges

CITATION_NUM_NODES = 2708
CITATION_NUM_EDGES = 5278
CITATION_FEAT_DIM = 1433
CITATION_CLASS_SIZES = (818, 426, 418, 351, 298, 217, 180)


def sbm_graph(sizes, p_in: float, p_out: float, seed: int = 0, feat_dim: int = 16,
              feature_noise: float = 1.0, feature_scale: float = 1.0) -> Graph:
    """Stochastic block model with Gaussian class features.

    Each block b gets a random unit mean vector mu_b; node features are
    feature_scale * mu_b + feature_noise * N(0, I).
    """
    sizes = [int(s) for s in sizes]
    n = sum(sizes)
    labels = np.repeat(np.arange(len(sizes), dtype=np.int64), sizes)
    gen = rngmod.make_rng(seed, rngmod.DATASET)

    blocks = np.cumsum([0] + sizes)
    edges = []
    for a in range(len(sizes)):
        for b in range(a, len(sizes)):
            p = p_in if a == b else p_out
            if p <= 0:
                continue
            rows = np.arange(blocks[a], blocks[a + 1])
            cols = np.arange(blocks[b], blocks[b + 1])
            mask = gen.random((len(rows), len(cols))) < p
            if a == b:
                mask = np.triu(mask, k=1)
            uu, vv = np.nonzero(mask)
            if len(uu):
                edges.append(np.column_stack([rows[uu], cols[vv]]))
    edge_arr = np.concatenate(edges, axis=0) if edges else np.zeros((0, 2), dtype=np.int64)

    means = gen.standard_normal((len(sizes), feat_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    feats = feature_scale * means[labels] + feature_noise * gen.standard_normal((n, feat_dim))
    return graph_from_edges(n, edge_arr, feats.astype(np.float32), labels, len(sizes))


def synthetic_citation(seed: int = 0,
                       num_nodes: int = CITATION_NUM_NODES,
                       num_edges: int = CITATION_NUM_EDGES,
                       feat_dim: int = CITATION_FEAT_DIM,
                       class_sizes=CITATION_CLASS_SIZES,
                       intra_edge_fraction: float = 0.81,
                       topic_words_per_class: int = 150,
                       p_topic: float = 0.06,
                       p_offtopic: float = 0.006,
                       p_background: float = 0.01) -> Graph:
    """Citation-benchmark-shaped graph: sparse binary features, homophilous edges.

    Feature rows are bag-of-words style: every class owns a block of topic
    words switched on with probability ``p_topic``; other classes' topic
    words and the background vocabulary fire at much lower rates, so raw
    features are informative but noisy and neighborhood aggregation pays off.
    """
    class_sizes = [int(s) for s in class_sizes]
    if sum(class_sizes) != num_nodes:
        raise ValueError(f"class sizes sum to {sum(class_sizes)}, expected {num_nodes}")
    num_classes = len(class_sizes)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), class_sizes)
    gen = rngmod.make_rng(seed, rngmod.DATASET)
    perm = gen.permutation(num_nodes)
    labels = labels[perm]

    probs = np.full((num_classes, feat_dim), p_background)
    for c in range(num_classes):
        lo = c * topic_words_per_class
        hi = lo + topic_words_per_class
        probs[:, lo:hi] = p_offtopic
        probs[c, lo:hi] = p_topic
    feats = (gen.random((num_nodes, feat_dim)) < probs[labels]).astype(np.float32)
    empty = feats.sum(axis=1) == 0
    for v in np.flatnonzero(empty):
        lo = labels[v] * topic_words_per_class
        feats[v, lo + int(gen.integers(0, topic_words_per_class))] = 1.0

    by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    class_probs = np.array([len(ix) ** 2 for ix in by_class], dtype=np.float64)
    class_probs /= class_probs.sum()
    seen: set[int] = set()
    edges = np.zeros((num_edges, 2), dtype=np.int64)
    got = 0
    while got < num_edges:
        if gen.random() < intra_edge_fraction:
            c = int(gen.choice(num_classes, p=class_probs))
            pool = by_class[c]
            u = int(pool[gen.integers(0, len(pool))])
            v = int(pool[gen.integers(0, len(pool))])
        else:
            u = int(gen.integers(0, num_nodes))
            v = int(gen.integers(0, num_nodes))
            if labels[u] == labels[v]:
                continue
        if u == v:
            continue
        if u > v:
            u, v = v, u
        key = u * num_nodes + v
        if key in seen:
            continue
        seen.add(key)
        edges[got] = (u, v)
        got += 1

    return graph_from_edges(num_nodes, edges, feats, labels, num_classes)


def star_graph(num_nodes: int, feat_dim: int = 4) -> Graph:
    edges = np.column_stack([np.zeros(num_nodes - 1, dtype=np.int64),
                             np.arange(1, num_nodes, dtype=np.int64)])
    feats = np.ones((num_nodes, feat_dim), dtype=np.float32)
    return graph_from_edges(num_nodes, edges, feats)


def path_graph(num_nodes: int, feat_dim: int = 4) -> Graph:
    edges = np.column_stack([np.arange(num_nodes - 1, dtype=np.int64),
                             np.arange(1, num_nodes, dtype=np.int64)])
    feats = np.ones((num_nodes, feat_dim), dtype=np.float32)
    return graph_from_edges(num_nodes, edges, feats)


def stars_and_paths(n_each: int = 20, num_nodes: int = 10, feat_dim: int = 4):
    """Toy graph-classification set: label 0 = star, label 1 = path."""
    graphs = [star_graph(num_nodes, feat_dim) for _ in range(n_each)]
    graphs += [path_graph(num_nodes, feat_dim) for _ in range(n_each)]
    labels = np.array([0] * n_each + [1] * n_each, dtype=np.int64)
    return graphs, labels
