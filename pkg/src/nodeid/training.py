"""Joint training of the encoder and codebooks; node-ID generation.

The total objective per epoch is L_total = L_task + L_quant, where L_task is
the task loss (masked cross-entropy, scaled cosine reconstruction error, or
binary cross-entropy over node pairs) and L_quant sums the per-node
quantization terms over every layer and level, normalized by the number of
contributing nodes so the commitment weight keeps the same meaning across
graph sizes.

The quantizer sits outside the tape: its commitment gradient with respect to
each layer's embedding matrix is computed in closed form and injected into
the reverse sweep.  Code vectors move either by EMA (default) or, in
codebook-loss mode, by Adam on the codebook term's gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import quantize as vq
from . import rng as rngmod
from .autodiff import AdamState, Tape, adam_step, backward, zero_grads
from .encoders import Decoder, EncoderStack, build_propagation, decoder_forward, encode_all_layers
from .graph import EdgeSplit, Graph, SparseMatrix, SplitMasks, graph_from_edges, message_graph
from .idtable import NodeIdTable
from .metrics import accuracy, hits_at_k
from .nn import Mlp

log = logging.getLogger(__name__)

K_GRID = (4, 6, 8, 16, 32)
OBJECTIVES = ("supervised-node", "supervised-link", "supervised-graph", "mae")


class TrainingDiverged(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    ``levels=0`` disables quantization entirely (the plain-encoder baseline
    path); otherwise each of the ``layers`` encoder layers gets ``levels``
    residual codebooks of size ``codebook_size``.
    """

    encoder: str = "gcn"
    layers: int = 2
    hidden_dim: int = 64
    levels: int = 3                      # M
    codebook_size: int = 16              # K
    beta: float = 1.0
    objective: str = "supervised-node"
    mask_rate: float = 0.5
    gamma: float = 2.0
    cosine_power: bool = True            # (1-cos)^gamma; False = 1 - cos*gamma
    lr: float = 0.01
    epochs: int = 200
    dropout_p: float = 0.5
    seed: int = 0
    vq_mode: str = "ema"                 # ema | codebook-loss
    metric: str = "cosine"
    ema_decay: float = 0.99
    squared_vq: bool = True
    warmup_epochs: int = 10
    kmeans_iters: int = 25
    quantize_preactivation: bool = False
    vq_train_nodes_only: bool = False
    decoder_kind: str = "gcn"
    head_hidden: int = 64
    hits_k: int = 10
    negatives_per_positive: int = 1
    dead_code_reset: bool = False
    dead_code_interval: int = 50
    dead_code_threshold: float = 1.0
    patience: int = 0                    # epochs without val improvement; 0 = off
    allow_any_k: bool = False

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.encoder not in ("gcn", "sage"):
            raise ConfigError(f"encoder must be gcn or sage, got {self.encoder!r}")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.levels < 0:
            raise ConfigError("levels must be >= 0 (0 disables quantization)")
        if self.levels > 0 and not self.allow_any_k and self.codebook_size not in K_GRID:
            raise ConfigError(f"codebook_size must be in {K_GRID} (or set allow_any_k)")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.objective == "mae" and not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must be in (0, 1), got {self.mask_rate}")
        if self.gamma < 1.0:
            raise ConfigError("gamma must be >= 1")
        if self.vq_mode not in ("ema", "codebook-loss"):
            raise ConfigError(f"vq_mode must be ema or codebook-loss, got {self.vq_mode!r}")
        if self.metric not in ("cosine", "l2"):
            raise ConfigError(f"metric must be cosine or l2, got {self.metric!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        return self

    @property
    def vq_enabled(self) -> bool:
        return self.levels > 0


@dataclass
class TrainLog:
    """Per-epoch task loss, quantization loss, their exact sum, usage, val metric."""

    loss_task: list[float] = field(default_factory=list)
    loss_vq: list[float] = field(default_factory=list)
    loss_total: list[float] = field(default_factory=list)
    usage: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)

    def append(self, task: float, vq_loss: float, usage: float, val: float):
        self.loss_task.append(float(task))
        self.loss_vq.append(float(vq_loss))
        self.loss_total.append(float(task) + float(vq_loss))
        self.usage.append(float(usage))
        self.val_metric.append(float(val))

    @property
    def epochs(self) -> int:
        return len(self.loss_total)


@dataclass
class TrainResult:
    encoder: EncoderStack
    codebooks: vq.CodebookSet | None
    log: TrainLog
    config: TrainConfig
    head: Mlp | None = None
    decoder: Decoder | None = None
    mask_vector: ad.Tensor | None = None
    best_epoch: int = -1
    best_val: float = float("nan")

    def __iter__(self):
        # allows `encoder, codebooks, log = result`
        return iter((self.encoder, self.codebooks, self.log))


# --------------------------------------------------------------------------
# shared pieces
# --------------------------------------------------------------------------


class _Quantizer:
    """Epoch-level bridge between the tape and the codebooks."""

    def __init__(self, cfg: TrainConfig, dim: int):
        self.cfg = cfg
        self.cbset = vq.CodebookSet.create(cfg.layers, cfg.levels, cfg.codebook_size,
                                           dim, cfg.metric, cfg.beta, cfg.seed) if cfg.vq_enabled else None
        self.initialized = False
        self._cb_adam: AdamState | None = None
        self._cb_params: list[ad.Tensor] | None = None

    def kmeans_init(self, layer_embeddings: list[np.ndarray]):
        cfg = self.cfg
        for l, H in enumerate(layer_embeddings, start=1):
            r = H
            for m in range(1, cfg.levels + 1):
                cb = self.cbset.codebook(l, m)
                vq.kmeans_init(cb, r, cfg.kmeans_iters, cfg.seed,
                               stream_offset=(l - 1) * cfg.levels + (m - 1))
                batch = vq.nearest_codes(cb, r)
                r = r - cb.vectors[batch]
        self.initialized = True
        if cfg.vq_mode == "codebook-loss":
            self._cb_params = [ad.Tensor(cb.vectors, requires_grad=True)
                               for row in self.cbset.grid for cb in row]
            self._cb_adam = AdamState(self._cb_params, lr=cfg.lr)

    def epoch_terms(self, layer_values: list[np.ndarray], row_mask: np.ndarray | None):
        """Quantize every layer; return (loss, grads per layer, batches)."""
        cfg = self.cfg
        n_active = int(row_mask.sum()) if row_mask is not None else layer_values[0].shape[0]
        n_active = max(n_active, 1)
        total = 0.0
        grads, batches = [], []
        for l, H in enumerate(layer_values, start=1):
            batch = vq.rvq_quantize_batch(self.cbset, l, H)
            vq.record_usage(self.cbset, l, batch.codes)
            loss, grad = vq.vq_batch_loss(self.cbset, l, batch, cfg.vq_mode,
                                          cfg.squared_vq, row_mask)
            total += loss
            grads.append(grad / n_active)
            batches.append(batch)
        return total / n_active, grads, batches

    def update_codebooks(self, batches, row_mask: np.ndarray | None, epoch: int,
                         donor: np.ndarray | None = None):
        cfg = self.cfg
        n = batches[0].residuals[0].shape[0]
        active = np.arange(n) if row_mask is None else np.flatnonzero(row_mask)
        n_active = max(len(active), 1)
        if cfg.vq_mode == "ema":
            for l, batch in enumerate(batches, start=1):
                for m in range(1, cfg.levels + 1):
                    cb = self.cbset.codebook(l, m)
                    vq.ema_update(cb, batch.codes[active, m - 1],
                                  batch.residuals[m - 1][active], cfg.ema_decay)
        else:
            zero_grads(self._cb_params)
            i = 0
            for l, batch in enumerate(batches, start=1):
                grads = vq.codebook_grads(self.cbset, l, batch, row_mask, cfg.squared_vq)
                for g in grads:
                    self._cb_params[i].grad = g / n_active
                    i += 1
            adam_step(self._cb_adam)
            if cfg.metric == "cosine":
                for p in self._cb_params:
                    norms = np.linalg.norm(p.values, axis=1, keepdims=True)
                    np.divide(p.values, np.where(norms > 1e-12, norms, 1.0), out=p.values)
        if cfg.dead_code_reset and donor is not None and epoch % cfg.dead_code_interval == 0:
            for row in self.cbset.grid:
                for cb in row:
                    vq.reset_dead_codes(cb, donor, cfg.dead_code_threshold, cfg.seed)

    def usage(self) -> float:
        try:
            _, aggregate = vq.usage_rate(self.cbset)
        except RuntimeError:
            return 0.0
        return aggregate


def _values(tensors) -> list[np.ndarray]:
    return [t.values for t in tensors]


def _extra_grads(layer_tensors, grads):
    return {id(t): (t, g) for t, g in zip(layer_tensors, grads)}


def _check_finite(loss: float, epoch: int):
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss diverged (non-finite) at epoch {epoch}")


# --------------------------------------------------------------------------
# supervised node classification
# --------------------------------------------------------------------------


def train_supervised_node(g: Graph, splits: SplitMasks, cfg: TrainConfig) -> TrainResult:
    """Full-batch joint training with a linear head on the last layer."""
    cfg = replace(cfg, objective="supervised-node").validate()
    if g.labels is None or g.num_classes is None:
        raise ConfigError("supervised-node training requires labels and num_classes")
    prop = build_propagation(cfg.encoder, g)
    dims = [g.feat_dim] + [cfg.hidden_dim] * cfg.layers
    encoder = EncoderStack.create(cfg.encoder, dims, cfg.dropout_p, cfg.seed)
    head = Mlp.create([cfg.hidden_dim, g.num_classes], seed=cfg.seed)
    params = encoder.params() + head.params()
    adam = AdamState(params, lr=cfg.lr)
    drop_rng = rngmod.make_rng(cfg.seed, rngmod.DROPOUT)
    quant = _Quantizer(cfg, cfg.hidden_dim)
    x = ad.tensor(g.features)
    logl = TrainLog()
    best = (-np.inf, -1, None)

    def eval_forward():
        tape = Tape()
        hs = encode_all_layers(tape, encoder, prop, x, training=False,
                               preactivation=cfg.quantize_preactivation)
        logits = head.forward(tape, hs[-1])
        return hs, logits.values

    for epoch in range(1, cfg.epochs + 1):
        if quant.cbset is not None and not quant.initialized and epoch == cfg.warmup_epochs + 1:
            hs, _ = eval_forward()
            quant.kmeans_init(_values(hs))
        tape = Tape()
        hs = encode_all_layers(tape, encoder, prop, x, training=True, rng=drop_rng,
                               preactivation=cfg.quantize_preactivation)
        logits = head.forward(tape, hs[-1])
        task = ad.softmax_cross_entropy(tape, logits, g.labels, splits.train)
        vq_active = quant.cbset is not None and quant.initialized
        if vq_active:
            row_mask = splits.train if cfg.vq_train_nodes_only else None
            quant.cbset.reset_usage()
            vq_loss_val, vq_grads, batches = quant.epoch_terms(_values(hs), row_mask)
            extra = _extra_grads(hs, vq_grads)
        else:
            vq_loss_val, extra, batches, row_mask = 0.0, None, None, None
        task_val = task.item()
        _check_finite(task_val + vq_loss_val, epoch)
        zero_grads(params)
        backward(tape, task, extra_grads=extra)
        adam_step(adam)
        if vq_active:
            quant.update_codebooks(batches, row_mask, epoch, donor=hs[-1].values)
        hs_eval, logits_eval = eval_forward()
        val_acc = accuracy(logits_eval[splits.valid].argmax(axis=1), g.labels[splits.valid])
        logl.append(task_val, vq_loss_val, quant.usage() if vq_active else 0.0, val_acc)
        if val_acc > best[0]:
            best = (val_acc, epoch, _snapshot(encoder, head, quant.cbset))
        elif cfg.patience and epoch - best[1] >= cfg.patience and best[1] > 0:
            break

    _restore(best[2], encoder, head, quant)
    return TrainResult(encoder, quant.cbset, logl, cfg, head=head,
                       best_epoch=best[1], best_val=best[0])


def _snapshot(encoder, head_or_decoder, cbset, mask_vector=None):
    return {
        "encoder": encoder.state(),
        "head": head_or_decoder.state() if head_or_decoder is not None else None,
        "codebooks": cbset.copy() if cbset is not None else None,
        "mask_vector": mask_vector.values.copy() if mask_vector is not None else None,
    }


def _restore(snap, encoder, head_or_decoder, quant, mask_vector=None):
    if snap is None:
        return
    encoder.load_state(snap["encoder"])
    if head_or_decoder is not None and snap["head"] is not None:
        head_or_decoder.load_state(snap["head"])
    if quant is not None and quant.cbset is not None and snap["codebooks"] is not None:
        quant.cbset = snap["codebooks"]
    if mask_vector is not None and snap["mask_vector"] is not None:
        mask_vector.values = snap["mask_vector"].copy()


def evaluate_node(result: TrainResult, g: Graph, splits: SplitMasks) -> dict:
    prop = build_propagation(result.config.encoder, g)
    tape = Tape()
    hs = encode_all_layers(tape, result.encoder, prop, ad.tensor(g.features), training=False,
                           preactivation=result.config.quantize_preactivation)
    logits = result.head.forward(tape, hs[-1]).values
    pred = logits.argmax(axis=1)
    return {name: accuracy(pred[mask], g.labels[mask])
            for name, mask in (("train", splits.train), ("valid", splits.valid), ("test", splits.test))}


# --------------------------------------------------------------------------
# masked feature reconstruction
# --------------------------------------------------------------------------


def train_mae(g: Graph, cfg: TrainConfig) -> TrainResult:
    """Masked-feature autoencoding: re-sample masked nodes every epoch."""
    cfg = replace(cfg, objective="mae").validate()
    prop = build_propagation(cfg.encoder, g)
    dims = [g.feat_dim] + [cfg.hidden_dim] * cfg.layers
    encoder = EncoderStack.create(cfg.encoder, dims, cfg.dropout_p, cfg.seed)
    decoder = Decoder.create(cfg.decoder_kind, cfg.hidden_dim, g.feat_dim, cfg.seed)
    mask_vector = ad.parameter(np.zeros((1, g.feat_dim), dtype=np.float32))
    params = encoder.params() + decoder.params() + [mask_vector]
    adam = AdamState(params, lr=cfg.lr)
    drop_rng = rngmod.make_rng(cfg.seed, rngmod.DROPOUT)
    mask_rng = rngmod.make_rng(cfg.seed, rngmod.MAE_MASK)
    probe_rng = rngmod.make_rng(cfg.seed, rngmod.MAE_PROBE)
    n_masked = max(1, int(np.floor(cfg.mask_rate * g.num_nodes + 0.5)))
    probe_idx = np.sort(probe_rng.choice(g.num_nodes, size=n_masked, replace=False))
    quant = _Quantizer(cfg, cfg.hidden_dim)
    logl = TrainLog()
    best = (np.inf, -1, None)

    def recon_loss(idx, training, rng):
        tape = Tape()
        x_masked = ad.row_blend(tape, g.features, mask_vector, idx)
        hs = encode_all_layers(tape, encoder, prop, x_masked, training=training, rng=rng,
                               preactivation=cfg.quantize_preactivation)
        z = decoder_forward(tape, decoder, prop, hs[-1])
        row_mask = np.zeros(g.num_nodes, dtype=bool)
        row_mask[idx] = True
        loss = ad.scaled_cosine_error(tape, z, g.features, cfg.gamma, row_mask,
                                      power=cfg.cosine_power)
        return tape, hs, loss, row_mask

    for epoch in range(1, cfg.epochs + 1):
        if quant.cbset is not None and not quant.initialized and epoch == cfg.warmup_epochs + 1:
            tape = Tape()
            hs = encode_all_layers(tape, encoder, prop, ad.tensor(g.features), training=False,
                                   preactivation=cfg.quantize_preactivation)
            quant.kmeans_init(_values(hs))
        idx = np.sort(mask_rng.choice(g.num_nodes, size=n_masked, replace=False))
        tape, hs, task, row_mask = recon_loss(idx, True, drop_rng)
        vq_active = quant.cbset is not None and quant.initialized
        if vq_active:
            quant.cbset.reset_usage()
            vq_loss_val, vq_grads, batches = quant.epoch_terms(_values(hs), row_mask)
            extra = _extra_grads(hs, vq_grads)
        else:
            vq_loss_val, extra, batches = 0.0, None, None
        task_val = task.item()
        _check_finite(task_val + vq_loss_val, epoch)
        zero_grads(params)
        backward(tape, task, extra_grads=extra)
        adam_step(adam)
        if vq_active:
            quant.update_codebooks(batches, row_mask, epoch, donor=hs[-1].values)
        _, _, probe_loss, _ = recon_loss(probe_idx, False, None)
        val = probe_loss.item()
        logl.append(task_val, vq_loss_val, quant.usage() if vq_active else 0.0, val)
        if val < best[0]:
            best = (val, epoch, _snapshot(encoder, decoder, quant.cbset, mask_vector))
        elif cfg.patience and epoch - best[1] >= cfg.patience and best[1] > 0:
            break

    _restore(best[2], encoder, decoder, quant, mask_vector)
    return TrainResult(encoder, quant.cbset, logl, cfg, decoder=decoder,
                       mask_vector=mask_vector, best_epoch=best[1], best_val=best[0])


# --------------------------------------------------------------------------
# supervised link prediction
# --------------------------------------------------------------------------


def _sample_nonedges(g: Graph, count: int, gen: np.random.Generator) -> np.ndarray:
    """Uniform non-edges (u < v). Rejection sampling against the full edge set."""
    out = np.zeros((count, 2), dtype=np.int64)
    got = 0
    attempts = 0
    limit = 200 * count + 1000
    while got < count:
        if attempts >= limit:
            raise RuntimeError(f"failed to sample {count} non-edges after {attempts} attempts")
        u = int(gen.integers(0, g.num_nodes))
        v = int(gen.integers(0, g.num_nodes))
        attempts += 1
        if u == v:
            continue
        if u > v:
            u, v = v, u
        if g.has_edge(u, v):
            continue
        out[got] = (u, v)
        got += 1
    return out


def train_supervised_link(g: Graph, edges: EdgeSplit, cfg: TrainConfig) -> TrainResult:
    """Link training: pair features are the Hadamard product of embeddings."""
    cfg = replace(cfg, objective="supervised-link").validate()
    msg_graph = message_graph(g, edges)
    prop = build_propagation(cfg.encoder, msg_graph)
    dims = [g.feat_dim] + [cfg.hidden_dim] * cfg.layers
    encoder = EncoderStack.create(cfg.encoder, dims, cfg.dropout_p, cfg.seed)
    head = Mlp.create([cfg.hidden_dim, cfg.head_hidden, 1], seed=cfg.seed)
    params = encoder.params() + head.params()
    adam = AdamState(params, lr=cfg.lr)
    drop_rng = rngmod.make_rng(cfg.seed, rngmod.DROPOUT)
    neg_rng = rngmod.make_rng(cfg.seed, rngmod.NEGATIVES)
    quant = _Quantizer(cfg, cfg.hidden_dim)
    x = ad.tensor(g.features)
    logl = TrainLog()
    best = (-np.inf, -1, None)

    def pair_logits(tape, h_last, pairs):
        hu = ad.gather_rows(tape, h_last, pairs[:, 0])
        hv = ad.gather_rows(tape, h_last, pairs[:, 1])
        return head.forward(tape, ad.mul(tape, hu, hv))

    def validate():
        tape = Tape()
        hs = encode_all_layers(tape, encoder, prop, x, training=False,
                               preactivation=cfg.quantize_preactivation)
        pos = pair_logits(tape, hs[-1], edges.valid_pos).values[:, 0]
        neg = pair_logits(tape, hs[-1], edges.valid_neg).values[:, 0]
        return hits_at_k(pos, neg, cfg.hits_k), hs

    for epoch in range(1, cfg.epochs + 1):
        if quant.cbset is not None and not quant.initialized and epoch == cfg.warmup_epochs + 1:
            _, hs = validate()
            quant.kmeans_init(_values(hs))
        negs = _sample_nonedges(g, cfg.negatives_per_positive * len(edges.train_pos), neg_rng)
        pairs = np.concatenate([edges.train_pos, negs], axis=0)
        targets = np.concatenate([np.ones(len(edges.train_pos)), np.zeros(len(negs))])
        tape = Tape()
        hs = encode_all_layers(tape, encoder, prop, x, training=True, rng=drop_rng,
                               preactivation=cfg.quantize_preactivation)
        logits = pair_logits(tape, hs[-1], pairs)
        task = ad.binary_cross_entropy_logits(tape, logits, targets)
        vq_active = quant.cbset is not None and quant.initialized
        if vq_active:
            quant.cbset.reset_usage()
            vq_loss_val, vq_grads, batches = quant.epoch_terms(_values(hs), None)
            extra = _extra_grads(hs, vq_grads)
        else:
            vq_loss_val, extra, batches = 0.0, None, None
        task_val = task.item()
        _check_finite(task_val + vq_loss_val, epoch)
        zero_grads(params)
        backward(tape, task, extra_grads=extra)
        adam_step(adam)
        if vq_active:
            quant.update_codebooks(batches, None, epoch, donor=hs[-1].values)
        val_hits, _ = validate()
        logl.append(task_val, vq_loss_val, quant.usage() if vq_active else 0.0, val_hits)
        if val_hits > best[0]:
            best = (val_hits, epoch, _snapshot(encoder, head, quant.cbset))
        elif cfg.patience and epoch - best[1] >= cfg.patience and best[1] > 0:
            break

    _restore(best[2], encoder, head, quant)
    return TrainResult(encoder, quant.cbset, logl, cfg, head=head,
                       best_epoch=best[1], best_val=best[0])


def evaluate_link(result: TrainResult, g: Graph, edges: EdgeSplit) -> dict:
    cfg = result.config
    prop = build_propagation(cfg.encoder, message_graph(g, edges))
    tape = Tape()
    hs = encode_all_layers(tape, result.encoder, prop, ad.tensor(g.features), training=False,
                           preactivation=cfg.quantize_preactivation)

    def score(pairs):
        hu = ad.gather_rows(tape, hs[-1], pairs[:, 0])
        hv = ad.gather_rows(tape, hs[-1], pairs[:, 1])
        return result.head.forward(tape, ad.mul(tape, hu, hv)).values[:, 0]

    return {
        "valid_hits": hits_at_k(score(edges.valid_pos), score(edges.valid_neg), cfg.hits_k),
        "test_hits": hits_at_k(score(edges.test_pos), score(edges.test_neg), cfg.hits_k),
    }


# --------------------------------------------------------------------------
# supervised graph classification
# --------------------------------------------------------------------------


@dataclass
class GraphBatch:
    """Disjoint union of graphs plus a per-graph mean-pooling operator."""

    union: Graph
    pool: SparseMatrix
    sizes: np.ndarray

    @classmethod
    def create(cls, graphs: list[Graph]) -> "GraphBatch":
        sizes = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        total = int(offsets[-1])
        edge_parts = []
        for g, off in zip(graphs, offsets[:-1]):
            e = g.edge_list()
            if len(e):
                edge_parts.append(e + off)
        edges = np.concatenate(edge_parts, axis=0) if edge_parts else np.zeros((0, 2), dtype=np.int64)
        feats = np.concatenate([g.features for g in graphs], axis=0)
        union = graph_from_edges(total, edges, feats)
        pool_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        pool_cols = np.arange(total, dtype=np.int64)
        pool_weights = np.concatenate([np.full(s, 1.0 / s, dtype=np.float32) for s in sizes])
        pool = SparseMatrix(len(graphs), total, pool_offsets, pool_cols, pool_weights)
        return cls(union, pool, sizes)


def split_indices_stratified(labels: np.ndarray, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Stratified train/valid/test index split over items (graphs)."""
    gen = rngmod.make_rng(seed, rngmod.NODE_SPLIT + 500)
    train, valid, test = [], [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[gen.permutation(len(idx))]
        n_tr = int(np.floor(ratios[0] * len(idx) + 0.5))
        n_va = int(np.floor(ratios[1] * len(idx) + 0.5))
        n_tr = max(1, min(n_tr, len(idx) - 2))
        n_va = max(1, min(n_va, len(idx) - n_tr - 1))
        train.extend(idx[:n_tr])
        valid.extend(idx[n_tr:n_tr + n_va])
        test.extend(idx[n_tr + n_va:])
    return (np.sort(np.array(train, dtype=np.int64)),
            np.sort(np.array(valid, dtype=np.int64)),
            np.sort(np.array(test, dtype=np.int64)))


def train_supervised_graph(graphs: list[Graph], labels: np.ndarray, cfg: TrainConfig,
                           splits=None) -> TrainResult:
    """Graph classification over a full batch of small graphs (mean readout)."""
    cfg = replace(cfg, objective="supervised-graph").validate()
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(graphs):
        raise ConfigError(f"{len(graphs)} graphs but {len(labels)} labels")
    num_classes = int(labels.max()) + 1
    batch = GraphBatch.create(graphs)
    if splits is None:
        splits = split_indices_stratified(labels, seed=cfg.seed)
    train_idx, valid_idx, test_idx = splits
    train_mask = np.zeros(len(graphs), dtype=bool)
    train_mask[train_idx] = True
    prop = build_propagation(cfg.encoder, batch.union)
    dims = [batch.union.feat_dim] + [cfg.hidden_dim] * cfg.layers
    encoder = EncoderStack.create(cfg.encoder, dims, cfg.dropout_p, cfg.seed)
    head = Mlp.create([cfg.hidden_dim, cfg.head_hidden, num_classes], seed=cfg.seed)
    params = encoder.params() + head.params()
    adam = AdamState(params, lr=cfg.lr)
    drop_rng = rngmod.make_rng(cfg.seed, rngmod.DROPOUT)
    quant = _Quantizer(cfg, cfg.hidden_dim)
    x = ad.tensor(batch.union.features)
    logl = TrainLog()
    best = (-np.inf, -1, None)

    def forward(training, rng):
        tape = Tape()
        hs = encode_all_layers(tape, encoder, prop, x, training=training, rng=rng,
                               preactivation=cfg.quantize_preactivation)
        pooled = ad.spmm(tape, batch.pool, hs[-1])
        logits = head.forward(tape, pooled)
        return tape, hs, logits

    for epoch in range(1, cfg.epochs + 1):
        if quant.cbset is not None and not quant.initialized and epoch == cfg.warmup_epochs + 1:
            _, hs, _ = forward(False, None)
            quant.kmeans_init(_values(hs))
        tape, hs, logits = forward(True, drop_rng)
        task = ad.softmax_cross_entropy(tape, logits, labels, train_mask)
        vq_active = quant.cbset is not None and quant.initialized
        if vq_active:
            quant.cbset.reset_usage()
            vq_loss_val, vq_grads, batches = quant.epoch_terms(_values(hs), None)
            extra = _extra_grads(hs, vq_grads)
        else:
            vq_loss_val, extra, batches = 0.0, None, None
        task_val = task.item()
        _check_finite(task_val + vq_loss_val, epoch)
        zero_grads(params)
        backward(tape, task, extra_grads=extra)
        adam_step(adam)
        if vq_active:
            quant.update_codebooks(batches, None, epoch, donor=hs[-1].values)
        _, _, logits_eval = forward(False, None)
        val_acc = accuracy(logits_eval.values[valid_idx].argmax(axis=1), labels[valid_idx])
        logl.append(task_val, vq_loss_val, quant.usage() if vq_active else 0.0, val_acc)
        if val_acc > best[0]:
            best = (val_acc, epoch, _snapshot(encoder, head, quant.cbset))
        elif cfg.patience and epoch - best[1] >= cfg.patience and best[1] > 0:
            break

    _restore(best[2], encoder, head, quant)
    return TrainResult(encoder, quant.cbset, logl, cfg, head=head,
                       best_epoch=best[1], best_val=best[0])


# --------------------------------------------------------------------------
# ID generation
# --------------------------------------------------------------------------


def generate_ids(encoder: EncoderStack, cbset: vq.CodebookSet, g: Graph,
                 quantize_preactivation: bool = False) -> NodeIdTable:
    """Quantize a graph's embeddings into the per-node codeword table.

    Runs the encoder in inference mode on the unmasked features; output is
    layer-major, level-minor and deterministic.
    """
    if cbset is None:
        raise ValueError("generate_ids requires trained codebooks")
    if g.feat_dim != encoder.input_dim:
        raise ad.ShapeMismatchError(
            f"graph feature dim {g.feat_dim} != encoder input dim {encoder.input_dim}")
    prop = build_propagation(encoder.kind, g)
    tape = Tape()
    hs = encode_all_layers(tape, encoder, prop, ad.tensor(g.features), training=False,
                           preactivation=quantize_preactivation)
    L, M = cbset.num_layers, cbset.num_levels
    codes = np.zeros((g.num_nodes, L * M), dtype=np.uint8)
    for l in range(1, L + 1):
        batch = vq.rvq_quantize_batch(cbset, l, hs[l - 1].values)
        codes[:, (l - 1) * M:l * M] = batch.codes.astype(np.uint8)
    return NodeIdTable(g.num_nodes, L, M, cbset.k, codes)


def generate_ids_for_graphs(encoder: EncoderStack, cbset: vq.CodebookSet,
                            graphs: list[Graph], quantize_preactivation: bool = False):
    return [generate_ids(encoder, cbset, g, quantize_preactivation) for g in graphs]
