"""Everything that consumes node-ID tables: heads, clustering, retrieval, GED.

The default ID embedder is one-hot and parameter-free: position p with code c
lights up column p*K + c, so distinct tuples map to distinct rows and every
codeword gets an orthogonal slice of the input space.  A learned embedder
(one K x d_e table per position) is available behind the same interface.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import quantize as vqmod
from . import rng as rngmod
from .autodiff import AdamState, Tape, Tensor, adam_step, backward, zero_grads
from .graph import EdgeSplit, Graph
from .idtable import NodeIdTable
from .metrics import accuracy, hits_at_k, matched_macro_f1, nmi as nmi_score, pairwise_f1, roc_auc_binary
from .nn import Mlp

log = logging.getLogger(__name__)


@dataclass
class IdEmbedder:
    """Maps code tuples to dense rows; one-hot by default."""

    mode: str = "one-hot"
    k: int = 16
    width: int = 1                       # number of codeword positions (L*M)
    embed_dim: int = 16                  # d_e, learned mode only
    tables: list[Tensor] = field(default_factory=list)

    @classmethod
    def create(cls, tbl: NodeIdTable, mode: str = "one-hot", embed_dim: int = 16,
               seed: int = 0) -> "IdEmbedder":
        if mode not in ("one-hot", "learned"):
            raise ValueError(f"unknown embedder mode {mode!r}")
        emb = cls(mode, tbl.k, tbl.width, embed_dim)
        if mode == "learned":
            gen = rngmod.make_rng(seed, rngmod.HEAD + 9999)
            emb.tables = [ad.parameter(0.1 * gen.standard_normal((tbl.k, embed_dim)).astype(np.float32))
                          for _ in range(tbl.width)]
        return emb

    @property
    def output_width(self) -> int:
        return self.width * (self.k if self.mode == "one-hot" else self.embed_dim)

    def params(self) -> list[Tensor]:
        return list(self.tables)

    def one_hot(self, codes: np.ndarray) -> np.ndarray:
        n = codes.shape[0]
        out = np.zeros((n, self.width * self.k), dtype=np.float32)
        cols = (np.arange(self.width) * self.k)[None, :] + codes.astype(np.int64)
        out[np.arange(n)[:, None], cols] = 1.0
        return out


def embed_ids(tape: Tape, tbl: NodeIdTable, emb: IdEmbedder,
              nodes: np.ndarray | None = None) -> Tensor:
    """Embedded ID rows for the given nodes (all nodes when omitted)."""
    if nodes is None:
        codes = tbl.codes
    else:
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(nodes) and (nodes.min() < 0 or nodes.max() >= tbl.num_nodes):
            raise IndexError(f"node index out of range for {tbl.num_nodes} nodes")
        codes = tbl.codes[nodes]
    if emb.mode == "one-hot":
        return ad.tensor(emb.one_hot(codes))
    parts = [ad.embedding_lookup(tape, emb.tables[p], codes[:, p].astype(np.int64))
             for p in range(emb.width)]
    return ad.concat_cols(tape, parts)


@dataclass
class HeadConfig:
    hidden: tuple = (256, 256)
    dropout_p: float = 0.5
    lr: float = 1e-2
    epochs: int = 1000
    patience: int = 100
    seed: int = 0
    metric: str = "accuracy"             # accuracy | auc (binary only)
    embed_mode: str = "one-hot"
    embed_dim: int = 16
    hits_k: int = 10
    negatives_per_positive: int = 1


# alias matching the table-of-contents name for the downstream classifier
MlpHead = Mlp


def _fit_classifier(features_fn, params_extra, labels, train_mask, valid_mask, cfg: HeadConfig,
                    num_classes: int):
    """Shared loop: full-batch Adam with early stopping on validation accuracy."""
    drop_rng = rngmod.make_rng(cfg.seed, rngmod.HEAD + 1)
    probe_tape = Tape()
    input_width = features_fn(probe_tape).shape[1]
    head = Mlp.create([input_width, *cfg.hidden, num_classes],
                      dropout_p=cfg.dropout_p, seed=cfg.seed, stream_offset=2)
    params = head.params() + params_extra
    adam = AdamState(params, lr=cfg.lr)
    best = (-np.inf, -1, None)
    for epoch in range(1, cfg.epochs + 1):
        tape = Tape()
        feats = features_fn(tape)
        logits = head.forward(tape, feats, training=True, rng=drop_rng)
        loss = ad.softmax_cross_entropy(tape, logits, labels, train_mask)
        zero_grads(params)
        backward(tape, loss)
        adam_step(adam)
        tape_eval = Tape()
        logits_eval = head.forward(tape_eval, features_fn(tape_eval)).values
        val = accuracy(logits_eval[valid_mask].argmax(axis=1), labels[valid_mask])
        if val > best[0]:
            best = (val, epoch, [p.values.copy() for p in params])
        elif cfg.patience and epoch - best[1] >= cfg.patience:
            break
    if best[2] is not None:
        for p, v in zip(params, best[2]):
            p.values = v.copy()
    return head


def train_node_head(tbl: NodeIdTable, labels: np.ndarray, splits, head_cfg: HeadConfig | None = None):
    """Train the downstream classifier on embedded IDs; returns (head, test metric)."""
    cfg = head_cfg or HeadConfig()
    labels = np.asarray(labels, dtype=np.int64)
    train_labels = labels[splits.train]
    if len(np.unique(train_labels)) < 2:
        raise ValueError("training set contains a single class")
    num_classes = int(labels[labels >= 0].max()) + 1
    emb = IdEmbedder.create(tbl, cfg.embed_mode, cfg.embed_dim, cfg.seed)

    def features(tape):
        return embed_ids(tape, tbl, emb)

    head = _fit_classifier(features, emb.params(), labels, splits.train, splits.valid,
                           cfg, num_classes)
    tape = Tape()
    logits = head.forward(tape, features(tape)).values
    if cfg.metric == "auc":
        if num_classes != 2:
            raise ValueError("auc metric needs a binary task")
        scores = logits[:, 1] - logits[:, 0]
        test_metric = roc_auc_binary(scores[splits.test], labels[splits.test])
    else:
        test_metric = accuracy(logits[splits.test].argmax(axis=1), labels[splits.test])
    return head, float(test_metric)


def train_link_head(tbl: NodeIdTable, edges: EdgeSplit, head_cfg: HeadConfig | None = None):
    """Binary head on Hadamard-combined ID embeddings; returns (head, test hits@k)."""
    cfg = head_cfg or HeadConfig(hidden=(64,), epochs=200, patience=50)
    emb = IdEmbedder.create(tbl, cfg.embed_mode, cfg.embed_dim, cfg.seed)
    all_pos = edges.all_positives()
    pos_keys = set(map(int, all_pos[:, 0] * tbl.num_nodes + all_pos[:, 1]))
    neg_rng = rngmod.make_rng(cfg.seed, rngmod.NEGATIVES + 1)

    def pair_features(tape, pairs):
        fu = embed_ids(tape, tbl, emb, pairs[:, 0])
        fv = embed_ids(tape, tbl, emb, pairs[:, 1])
        return ad.mul(tape, fu, fv)

    def sample_negs(count):
        out = np.zeros((count, 2), dtype=np.int64)
        got, attempts = 0, 0
        while got < count:
            if attempts > 200 * count + 1000:
                raise RuntimeError("non-edge sampling stalled; graph too dense")
            u = int(neg_rng.integers(0, tbl.num_nodes))
            v = int(neg_rng.integers(0, tbl.num_nodes))
            attempts += 1
            if u == v:
                continue
            if u > v:
                u, v = v, u
            if u * tbl.num_nodes + v in pos_keys:
                continue
            out[got] = (u, v)
            got += 1
        return out

    probe_tape = Tape()
    width = pair_features(probe_tape, all_pos[:1]).shape[1]
    head = Mlp.create([width, *cfg.hidden, 1], dropout_p=cfg.dropout_p, seed=cfg.seed,
                      stream_offset=3)
    params = head.params() + emb.params()
    adam = AdamState(params, lr=cfg.lr)
    drop_rng = rngmod.make_rng(cfg.seed, rngmod.HEAD + 4)

    def scores(pairs):
        tape = Tape()
        return head.forward(tape, pair_features(tape, pairs)).values[:, 0]

    best = (-np.inf, -1, None)
    for epoch in range(1, cfg.epochs + 1):
        negs = sample_negs(cfg.negatives_per_positive * len(edges.train_pos))
        pairs = np.concatenate([edges.train_pos, negs], axis=0)
        targets = np.concatenate([np.ones(len(edges.train_pos)), np.zeros(len(negs))])
        tape = Tape()
        logits = head.forward(tape, pair_features(tape, pairs), training=True, rng=drop_rng)
        loss = ad.binary_cross_entropy_logits(tape, logits, targets)
        zero_grads(params)
        backward(tape, loss)
        adam_step(adam)
        val = hits_at_k(scores(edges.valid_pos), scores(edges.valid_neg), cfg.hits_k)
        if val > best[0]:
            best = (val, epoch, [p.values.copy() for p in params])
        elif cfg.patience and epoch - best[1] >= cfg.patience:
            break
    if best[2] is not None:
        for p, v in zip(params, best[2]):
            p.values = v.copy()
    test_hits = hits_at_k(scores(edges.test_pos), scores(edges.test_neg), cfg.hits_k)
    return head, float(test_hits)


# --------------------------------------------------------------------------
# graph-level readout
# --------------------------------------------------------------------------


def graph_readout(tbl: NodeIdTable, emb: IdEmbedder, mode: str = "mean") -> np.ndarray:
    """Pool one graph's embedded IDs into a single vector."""
    if tbl.num_nodes == 0:
        raise ValueError("readout of an empty graph")
    rows = emb.one_hot(tbl.codes) if emb.mode == "one-hot" else _learned_rows(tbl, emb)
    if mode == "mean":
        return rows.mean(axis=0)
    if mode == "sum":
        return rows.sum(axis=0)
    if mode == "max":
        return rows.max(axis=0)
    raise ValueError(f"unknown readout {mode!r}")


def _learned_rows(tbl: NodeIdTable, emb: IdEmbedder) -> np.ndarray:
    tape = Tape()
    return embed_ids(tape, tbl, emb).values


def train_graph_head(tables: list[NodeIdTable], labels: np.ndarray,
                     head_cfg: HeadConfig | None = None, splits=None, readout: str = "mean"):
    """Classify graphs from pooled ID embeddings; returns (head, test accuracy)."""
    cfg = head_cfg or HeadConfig(hidden=(64,), epochs=300, patience=100)
    labels = np.asarray(labels, dtype=np.int64)
    shapes = {(t.num_layers, t.num_levels, t.k) for t in tables}
    if len(shapes) != 1:
        raise ValueError(f"tables disagree on (L, M, K): {sorted(shapes)}")
    emb = IdEmbedder.create(tables[0], cfg.embed_mode, cfg.embed_dim, cfg.seed)
    feats = np.stack([graph_readout(t, emb, readout) for t in tables]).astype(np.float32)
    if splits is None:
        from .training import split_indices_stratified
        splits = split_indices_stratified(labels, seed=cfg.seed)
    train_idx, valid_idx, test_idx = splits
    train_mask = np.zeros(len(tables), dtype=bool)
    train_mask[train_idx] = True
    valid_mask = np.zeros(len(tables), dtype=bool)
    valid_mask[valid_idx] = True

    def features(tape):
        return ad.tensor(feats)

    head = _fit_classifier(features, [], labels, train_mask, valid_mask, cfg,
                           int(labels.max()) + 1)
    tape = Tape()
    logits = head.forward(tape, ad.tensor(feats)).values
    test_acc = accuracy(logits[test_idx].argmax(axis=1), labels[test_idx])
    return head, float(test_acc)


# --------------------------------------------------------------------------
# clustering
# --------------------------------------------------------------------------


@dataclass
class ClusterResult:
    assignments: np.ndarray
    nmi: float
    pairwise_f1: float
    matched_f1: float
    objective: float


def cluster_ids(tbl: NodeIdTable, emb: IdEmbedder, k: int, labels: np.ndarray,
                seed: int = 0, restarts: int = 10, iters: int = 100) -> ClusterResult:
    """k-means over embedded IDs, best of ``restarts`` by objective."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rows = emb.one_hot(tbl.codes) if emb.mode == "one-hot" else None
    if rows is None:
        tape = Tape()
        rows = embed_ids(tape, tbl, emb).values
    distinct = np.unique(tbl.codes, axis=0).shape[0]
    if k > distinct:
        log.warning("requested %d clusters but only %d distinct IDs; duplicates expected", k, distinct)
    best_obj, best_assign = np.inf, None
    for r in range(restarts):
        gen = rngmod.make_rng(seed, rngmod.CLUSTER + 13 * (r + 1))
        if k == 1:
            assign = np.zeros(rows.shape[0], dtype=np.int64)
            centroids = rows.mean(axis=0, keepdims=True)
        else:
            centroids, assign = vqmod.kmeans(rows, k, iters, gen, metric="l2")
        diff = rows - centroids[assign]
        obj = float((diff * diff).sum())
        if obj < best_obj:
            best_obj, best_assign = obj, assign
    labels = np.asarray(labels, dtype=np.int64)
    return ClusterResult(best_assign,
                         nmi_score(best_assign, labels),
                         pairwise_f1(best_assign, labels),
                         matched_macro_f1(best_assign, labels),
                         best_obj)


# --------------------------------------------------------------------------
# Hamming retrieval
# --------------------------------------------------------------------------


def hamming_distances(tbl: NodeIdTable, query: int) -> np.ndarray:
    """Count of differing codeword positions between the query and every node."""
    if not 0 <= query < tbl.num_nodes:
        raise IndexError(f"query {query} out of range")
    return (tbl.codes != tbl.codes[query]).sum(axis=1).astype(np.int64)


def hamming_retrieve(tbl: NodeIdTable, query: int, top_n: int = 5) -> np.ndarray:
    """Nearest nodes by ID Hamming distance; ties break by node index."""
    dist = hamming_distances(tbl, query)
    order = np.lexsort((np.arange(tbl.num_nodes), dist))
    order = order[order != query]
    return order[:top_n]


# --------------------------------------------------------------------------
# 1-hop subgraph edit distance
# --------------------------------------------------------------------------


def ego_adjacency(g: Graph, u: int) -> np.ndarray:
    """Dense adjacency of the induced subgraph on u and its neighbors."""
    nodes = np.unique(np.concatenate([[u], g.neighbors(u)]))
    index = {int(a): i for i, a in enumerate(nodes)}
    adj = np.zeros((len(nodes), len(nodes)), dtype=bool)
    for i, a in enumerate(nodes):
        for b in g.neighbors(int(a)):
            j = index.get(int(b))
            if j is not None:
                adj[i, j] = True
    return adj


def _edge_count(adj: np.ndarray) -> int:
    return int(adj.sum()) // 2


def exact_ged(adj1: np.ndarray, adj2: np.ndarray) -> int:
    """Unit-cost graph edit distance by branch-and-bound over node mappings."""
    n1, n2 = len(adj1), len(adj2)
    if n1 > n2:
        adj1, adj2, n1, n2 = adj2, adj1, n2, n1
    e1, e2 = _edge_count(adj1), _edge_count(adj2)
    if n1 == 0:
        return n2 + e2

    order = np.argsort(-adj1.sum(axis=1), kind="stable")
    a1 = adj1[np.ix_(order, order)]
    # suffix counts of G1 edges with an endpoint still undecided at depth d
    e1_rem = np.zeros(n1 + 1, dtype=np.int64)
    for d in range(n1 + 1):
        decided = a1[:d, :d]
        e1_rem[d] = e1 - _edge_count(decided)

    best = n1 + n2 + e1 + e2  # delete everything, insert everything
    mapping = np.full(n1, -2, dtype=np.int64)  # -2 undecided, -1 epsilon
    used = np.zeros(n2, dtype=bool)

    def e2_remaining() -> int:
        live = ~used
        both_used = np.ix_(used, used)
        return e2 - _edge_count(adj2[both_used]) if used.any() else e2

    def recurse(depth: int, deletions: int, matched: int):
        nonlocal best
        avail = n2 - int(used.sum())
        r1 = n1 - depth
        lb_nodes = deletions + max(r1 - avail, 0) + max(avail - r1, 0)
        lb_edges = e1 + e2 - 2 * (matched + min(int(e1_rem[depth]), e2_remaining()))
        if depth == n1:
            total = deletions + avail + e1 + e2 - 2 * matched
            if total < best:
                best = total
            return
        if lb_nodes + lb_edges >= best:
            return
        i = depth
        for w in range(n2):
            if used[w]:
                continue
            gained = 0
            for j in range(depth):
                fj = mapping[j]
                if fj >= 0 and a1[i, j] and adj2[w, fj]:
                    gained += 1
            mapping[i] = w
            used[w] = True
            recurse(depth + 1, deletions, matched + gained)
            used[w] = False
            mapping[i] = -2
        mapping[i] = -1
        recurse(depth + 1, deletions + 1, matched)
        mapping[i] = -2

    recurse(0, 0, 0)
    return int(best)


def degree_sequence_bound(adj1: np.ndarray, adj2: np.ndarray) -> int:
    """Cheap lower bound used when egos are too large for exact search."""
    n1, n2 = len(adj1), len(adj2)
    d1 = np.sort(adj1.sum(axis=1))[::-1]
    d2 = np.sort(adj2.sum(axis=1))[::-1]
    width = max(n1, n2)
    d1 = np.pad(d1, (0, width - n1))
    d2 = np.pad(d2, (0, width - n2))
    deg_bound = int(np.ceil(np.abs(d1 - d2).sum() / 2.0))
    count_bound = abs(n1 - n2) + abs(_edge_count(adj1) - _edge_count(adj2))
    return max(deg_bound, count_bound)


def ged_1hop(g: Graph, u: int, v: int, exact_limit: int = 12) -> int:
    """Edit distance between the 1-hop ego subgraphs of u and v.

    Exact for egos up to ``exact_limit`` nodes; beyond that a degree-sequence
    lower bound is returned and flagged in the log.
    """
    if u == v:
        return 0
    adj_u = ego_adjacency(g, u)
    adj_v = ego_adjacency(g, v)
    if max(len(adj_u), len(adj_v)) > exact_limit:
        log.warning("ego sizes (%d, %d) exceed exact limit %d; returning degree-sequence lower bound",
                    len(adj_u), len(adj_v), exact_limit)
        return degree_sequence_bound(adj_u, adj_v)
    return exact_ged(adj_u, adj_v)
