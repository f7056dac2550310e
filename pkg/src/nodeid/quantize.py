"""Codebooks and per-layer residual vector quantization.

Each encoder layer l owns M codebooks.  Level 1 quantizes the layer's node
embedding; level m > 1 quantizes the residual left by level m-1, so the
residual recursion r_{m+1} = r_m - e_{c_m} holds exactly by construction.

Under the cosine metric, code vectors are kept unit-norm and queries are
unit-normalized *for the distance computation only*; residuals live in the
original embedding space.  A zero query vector compares as cosine distance 1
to every code and resolves to index 0 by the lowest-index tie rule.

The quantization loss follows the standard two-term form: a codebook term
pulling the selected code toward the (stop-gradient) embedding, and a
beta-weighted commitment term pulling the embedding toward the (stop-
gradient) code.  In EMA mode the codebook term is replaced by exponential
moving averages of the assigned vectors.  Norms are squared by default; the
unsquared form is available via ``squared=False``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod

log = logging.getLogger(__name__)

EMA_DECAY_DEFAULT = 0.99
LAPLACE_EPS = 1e-5


def _unit_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(norms > eps, x / np.where(norms > eps, norms, 1.0), x)


@dataclass
class Codebook:
    """K code vectors with EMA statistics and per-epoch usage counters."""

    vectors: np.ndarray
    ema_count: np.ndarray
    ema_sum: np.ndarray
    usage: np.ndarray
    metric: str = "cosine"

    @classmethod
    def create(cls, k: int, dim: int, metric: str = "cosine", seed: int = 0, stream_offset: int = 0) -> "Codebook":
        if k < 2:
            raise ValueError(f"codebook size must be >= 2, got {k}")
        if metric not in ("cosine", "l2"):
            raise ValueError(f"unknown metric {metric!r}")
        gen = rngmod.make_rng(seed, rngmod.KMEANS + 7919 * (stream_offset + 1))
        vecs = gen.standard_normal((k, dim)).astype(np.float32)
        if metric == "cosine":
            vecs = _unit_rows(vecs).astype(np.float32)
        return cls(vectors=vecs,
                   ema_count=np.ones(k, dtype=np.float32),
                   ema_sum=vecs.copy(),
                   usage=np.zeros(k, dtype=np.int64),
                   metric=metric)

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.vectors.copy(), self.ema_count.copy(),
                        self.ema_sum.copy(), self.usage.copy(), self.metric)


@dataclass
class CodebookSet:
    """L x M grid of codebooks plus the commitment weight beta."""

    grid: list[list[Codebook]]
    beta: float = 1.0

    @classmethod
    def create(cls, num_layers: int, num_levels: int, k: int, dim: int,
               metric: str = "cosine", beta: float = 1.0, seed: int = 0) -> "CodebookSet":
        grid = [[Codebook.create(k, dim, metric, seed, stream_offset=l * num_levels + m)
                 for m in range(num_levels)] for l in range(num_layers)]
        return cls(grid, beta)

    @property
    def num_layers(self) -> int:
        return len(self.grid)

    @property
    def num_levels(self) -> int:
        return len(self.grid[0]) if self.grid else 0

    @property
    def k(self) -> int:
        return self.grid[0][0].k

    @property
    def metric(self) -> str:
        return self.grid[0][0].metric

    def codebook(self, layer: int, level: int) -> Codebook:
        """1-based layer/level lookup, matching the c_{lm} indexing."""
        return self.grid[layer - 1][level - 1]

    def copy(self) -> "CodebookSet":
        return CodebookSet([[cb.copy() for cb in row] for row in self.grid], self.beta)

    def reset_usage(self):
        for row in self.grid:
            for cb in row:
                cb.usage[:] = 0


@dataclass
class QuantizeResult:
    """Codewords, selected code vectors and the full residual chain."""

    codewords: np.ndarray            # (M,) integer indices
    selected: list[np.ndarray]       # M code vectors
    residuals: list[np.ndarray]      # M+1 vectors; residuals[0] is the input

    def reconstruction(self) -> np.ndarray:
        out = np.zeros_like(self.residuals[0])
        for vec in self.selected:
            out = out + vec
        return out


# --------------------------------------------------------------------------
# assignment
# --------------------------------------------------------------------------


def nearest_codes(cb: Codebook, queries: np.ndarray) -> np.ndarray:
    """Nearest code index per query row; ties resolve to the lowest index."""
    queries = np.asarray(queries)
    if queries.ndim != 2 or queries.shape[1] != cb.dim:
        raise ValueError(f"queries must be (n, {cb.dim}), got {queries.shape}")
    if not np.all(np.isfinite(queries)):
        raise ValueError("non-finite query vector")
    if cb.metric == "cosine":
        sims = _unit_rows(queries) @ cb.vectors.T
        return np.argmax(sims, axis=1)
    diff = queries[:, None, :] - cb.vectors[None, :, :]
    d2 = np.einsum("nkd,nkd->nk", diff, diff)
    return np.argmin(d2, axis=1)


def nearest_code(cb: Codebook, v: np.ndarray) -> int:
    return int(nearest_codes(cb, np.asarray(v).reshape(1, -1))[0])


def rvq_quantize(cbset: CodebookSet, layer: int, h: np.ndarray) -> QuantizeResult:
    """Residual quantization of one embedding against layer ``layer`` (1-based)."""
    if not 1 <= layer <= cbset.num_layers:
        raise ValueError(f"layer {layer} outside [1, {cbset.num_layers}]")
    h = np.asarray(h, dtype=np.float32).reshape(-1)
    codewords = np.zeros(cbset.num_levels, dtype=np.int64)
    selected = []
    residuals = [h]
    r = h
    for m in range(1, cbset.num_levels + 1):
        cb = cbset.codebook(layer, m)
        idx = nearest_code(cb, r)
        codewords[m - 1] = idx
        e = cb.vectors[idx]
        selected.append(e)
        r = r - e
        residuals.append(r)
    return QuantizeResult(codewords, selected, residuals)


@dataclass
class BatchQuantization:
    """Vectorized quantization of all rows of one layer's embedding matrix."""

    codes: np.ndarray                # (n, M)
    selected: list[np.ndarray]       # per level, (n, d) selected code vectors
    residuals: list[np.ndarray]      # per level m=0..M, (n, d)


def rvq_quantize_batch(cbset: CodebookSet, layer: int, h: np.ndarray) -> BatchQuantization:
    if not 1 <= layer <= cbset.num_layers:
        raise ValueError(f"layer {layer} outside [1, {cbset.num_layers}]")
    h = np.asarray(h, dtype=np.float32)
    n = h.shape[0]
    codes = np.zeros((n, cbset.num_levels), dtype=np.int64)
    selected = []
    residuals = [h]
    r = h
    for m in range(1, cbset.num_levels + 1):
        cb = cbset.codebook(layer, m)
        idx = nearest_codes(cb, r)
        codes[:, m - 1] = idx
        e = cb.vectors[idx]
        selected.append(e)
        r = r - e
        residuals.append(r)
    return BatchQuantization(codes, selected, residuals)


def record_usage(cbset: CodebookSet, layer: int, codes: np.ndarray):
    """Fold one epoch's assignments into the usage counters (training only)."""
    for m in range(1, cbset.num_levels + 1):
        cb = cbset.codebook(layer, m)
        cb.usage += np.bincount(codes[:, m - 1], minlength=cb.k)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def vq_loss(cbset: CodebookSet, layer: int, result: QuantizeResult, mode: str = "ema",
            squared: bool = True) -> tuple[float, np.ndarray]:
    """Two-term quantization loss for one node; returns (loss, grad wrt h).

    The commitment gradient flows only to the embedding (codes are treated
    as constants); in EMA mode the codebook term contributes zero loss since
    codebooks update via moving averages instead.
    """
    if mode not in ("ema", "codebook-loss"):
        raise ValueError(f"unknown vq mode {mode!r}")
    beta = cbset.beta
    loss = 0.0
    grad = np.zeros_like(result.residuals[0], dtype=np.float64)
    for m in range(1, len(result.selected) + 1):
        err = result.residuals[m].astype(np.float64)      # r_m - e_{c_m}
        if squared:
            term = float(err @ err)
            gterm = 2.0 * err
        else:
            norm = float(np.linalg.norm(err))
            term = norm
            gterm = err / norm if norm > 1e-12 else np.zeros_like(err)
        if mode == "codebook-loss":
            loss += term
        loss += beta * term
        grad += beta * gterm
    return loss, grad.astype(np.float32)


def vq_batch_loss(cbset: CodebookSet, layer: int, batch: BatchQuantization,
                  mode: str = "ema", squared: bool = True,
                  row_mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Summed quantization loss over rows; returns (loss, grad wrt H).

    ``row_mask`` restricts both terms to a subset of rows (used by the
    masked-autoencoder objective, which sums over masked nodes only).
    """
    if mode not in ("ema", "codebook-loss"):
        raise ValueError(f"unknown vq mode {mode!r}")
    beta = cbset.beta
    n = batch.residuals[0].shape[0]
    active = np.ones(n, dtype=bool) if row_mask is None else np.asarray(row_mask, dtype=bool)
    loss = 0.0
    grad = np.zeros_like(batch.residuals[0], dtype=np.float64)
    for m in range(1, len(batch.selected) + 1):
        err = batch.residuals[m].astype(np.float64)
        err = np.where(active[:, None], err, 0.0)
        if squared:
            term = float((err * err).sum())
            gterm = 2.0 * err
        else:
            norms = np.linalg.norm(err, axis=1)
            term = float(norms.sum())
            safe = np.where(norms > 1e-12, norms, 1.0)
            gterm = np.where((norms > 1e-12)[:, None], err / safe[:, None], 0.0)
        if mode == "codebook-loss":
            loss += term
        loss += beta * term
        grad += beta * gterm
    return loss, grad.astype(np.float32)


def codebook_grads(cbset: CodebookSet, layer: int, batch: BatchQuantization,
                   row_mask: np.ndarray | None = None, squared: bool = True) -> list[np.ndarray]:
    """Gradient of the codebook term w.r.t. each level's code vectors."""
    n = batch.residuals[0].shape[0]
    active = np.ones(n, dtype=bool) if row_mask is None else np.asarray(row_mask, dtype=bool)
    grads = []
    for m in range(1, len(batch.selected) + 1):
        cb = cbset.codebook(layer, m)
        g = np.zeros_like(cb.vectors, dtype=np.float64)
        err = batch.residuals[m].astype(np.float64)       # r_m - e; d/d e = -(...)
        err = np.where(active[:, None], err, 0.0)
        if squared:
            contrib = -2.0 * err
        else:
            norms = np.linalg.norm(err, axis=1)
            safe = np.where(norms > 1e-12, norms, 1.0)
            contrib = -np.where((norms > 1e-12)[:, None], err / safe[:, None], 0.0)
        np.add.at(g, batch.codes[:, m - 1], contrib)
        grads.append(g.astype(np.float32))
    return grads


# --------------------------------------------------------------------------
# codebook updates
# --------------------------------------------------------------------------


def ema_update(cb: Codebook, assigned_idx: np.ndarray, assigned_vecs: np.ndarray,
               decay: float = EMA_DECAY_DEFAULT):
    """Fold one batch of assignments into the moving averages.

    count_k <- decay * count_k + n_k, sum_k <- decay * sum_k + sum of
    assigned vectors; vectors become sum / (count + eps) with eps a small
    fraction of the total count (Laplace smoothing), re-normalized under the
    cosine metric.
    """
    if not 0.0 < decay < 1.0:
        raise ValueError(f"decay must be in (0, 1), got {decay}")
    assigned_idx = np.asarray(assigned_idx, dtype=np.int64)
    assigned_vecs = np.asarray(assigned_vecs, dtype=np.float32)
    if assigned_vecs.shape[1] != cb.dim:
        raise ValueError(f"assigned vectors have dim {assigned_vecs.shape[1]}, codebook dim {cb.dim}")
    counts = np.bincount(assigned_idx, minlength=cb.k).astype(np.float32)
    sums = np.zeros_like(cb.ema_sum)
    np.add.at(sums, assigned_idx, assigned_vecs)
    cb.ema_count = decay * cb.ema_count + counts
    cb.ema_sum = decay * cb.ema_sum + sums
    total = float(cb.ema_count.sum())
    eps = LAPLACE_EPS * total if total > 0 else 1e-12
    vecs = cb.ema_sum / (cb.ema_count + eps)[:, None]
    if cb.metric == "cosine":
        vecs = _unit_rows(vecs)
    cb.vectors = vecs.astype(np.float32)


def kmeans(points: np.ndarray, k: int, iters: int, rng: np.random.Generator,
           metric: str = "l2") -> tuple[np.ndarray, np.ndarray]:
    """k-means++ seeding followed by Lloyd iterations.

    Under the cosine metric this is spherical k-means: points and centroids
    are unit-normalized and means are re-normalized after every step.
    Returns (centroids, assignments).
    """
    pts = np.asarray(points, dtype=np.float64)
    if metric == "cosine":
        pts = _unit_rows(pts)
    n = pts.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} sample rows, got {n}")

    centroids = np.zeros((k, pts.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centroids[0] = pts[first]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 1e-18:
            centroids[j] = pts[int(rng.integers(0, n))]
        else:
            probs = d2 / total
            pick = int(rng.choice(n, p=probs))
            centroids[j] = pts[pick]
        d2 = np.minimum(d2, ((pts - centroids[j]) ** 2).sum(axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max(iters, 1)):
        if metric == "cosine":
            assign = np.argmax(pts @ _unit_rows(centroids).T, axis=1)
        else:
            diff = pts[:, None, :] - centroids[None, :, :]
            assign = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
        new_centroids = centroids.copy()
        for j in range(k):
            members = pts[assign == j]
            if len(members):
                mean = members.mean(axis=0)
                new_centroids[j] = _unit_rows(mean[None])[0] if metric == "cosine" else mean
        if np.allclose(new_centroids, centroids, rtol=0.0, atol=1e-12):
            centroids = new_centroids
            break
        centroids = new_centroids
    if metric == "cosine":
        assign = np.argmax(pts @ _unit_rows(centroids).T, axis=1)
    else:
        diff = pts[:, None, :] - centroids[None, :, :]
        assign = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return centroids, assign


def kmeans_init(cb: Codebook, sample: np.ndarray, iters: int = 25, seed: int = 0,
                stream_offset: int = 0):
    """Initialize code vectors by k-means on a sample of embeddings.

    Fewer distinct sample rows than K are padded with jittered duplicates
    (logged).  EMA statistics are seeded from the resulting cluster sizes.
    """
    sample = np.asarray(sample, dtype=np.float32)
    if sample.shape[0] < cb.k:
        raise ValueError(f"sample has {sample.shape[0]} rows; need >= {cb.k}")
    gen = rngmod.make_rng(seed, rngmod.KMEANS + 104729 * (stream_offset + 1))
    distinct = np.unique(sample, axis=0)
    if distinct.shape[0] < cb.k:
        log.warning("kmeans_init: only %d distinct rows for %d codes; padding with jittered duplicates",
                    distinct.shape[0], cb.k)
        extra_idx = gen.integers(0, sample.shape[0], size=sample.shape[0])
        jitter = 1e-4 * gen.standard_normal((sample.shape[0], cb.dim)).astype(np.float32)
        sample = np.concatenate([sample, sample[extra_idx] + jitter], axis=0)
    centroids, assign = kmeans(sample, cb.k, iters, gen, metric=cb.metric)
    vecs = centroids.astype(np.float32)
    if cb.metric == "cosine":
        vecs = _unit_rows(vecs).astype(np.float32)
    counts = np.bincount(assign, minlength=cb.k).astype(np.float32)
    counts = np.maximum(counts, 1.0)
    cb.vectors = vecs
    cb.ema_count = counts
    cb.ema_sum = vecs * counts[:, None]
    cb.usage[:] = 0


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------


def usage_rate(cbset: CodebookSet) -> tuple[np.ndarray, float]:
    """Fraction of codes hit at least once this epoch, per codebook and mean."""
    rates = np.zeros((cbset.num_layers, cbset.num_levels), dtype=np.float64)
    total_hits = 0
    for l in range(cbset.num_layers):
        for m in range(cbset.num_levels):
            cb = cbset.grid[l][m]
            total_hits += int(cb.usage.sum())
            rates[l, m] = float((cb.usage > 0).sum()) / cb.k
    if total_hits == 0:
        raise RuntimeError("usage_rate: no assignments recorded since the last reset")
    return rates, float(rates.mean())


def reset_dead_codes(cb: Codebook, donor_sample: np.ndarray, threshold: float = 1.0,
                     seed: int = 0) -> int:
    """Re-seed codes whose EMA count fell below ``threshold`` from donor rows."""
    donor_sample = np.asarray(donor_sample, dtype=np.float32)
    if donor_sample.shape[0] == 0:
        raise ValueError("donor sample is empty")
    dead = np.flatnonzero(cb.ema_count < threshold)
    if len(dead) == 0:
        return 0
    gen = rngmod.make_rng(seed, rngmod.DEAD_CODE)
    donors = donor_sample[gen.integers(0, donor_sample.shape[0], size=len(dead))]
    if cb.metric == "cosine":
        donors = _unit_rows(donors).astype(np.float32)
    cb.vectors[dead] = donors
    cb.ema_count[dead] = 1.0
    cb.ema_sum[dead] = donors
    log.info("reset %d dead codes (threshold %.3g)", len(dead), threshold)
    return len(dead)
