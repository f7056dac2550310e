"""Graph data model: CSR storage, file formats, normalization and splits.

A :class:`Graph` stores an undirected attributed graph in CSR form together
with dense float32 node features and optional integer class labels (-1 marks
an unlabeled node).  Input edge lists are symmetrized and deduplicated at
load time; self-loops are dropped from storage and re-introduced only by
:func:`normalize_adjacency`.

File formats
------------
``ngf-text`` (single file)::

    NGF1 <num_nodes> <feat_dim> <num_edges> <num_classes>
    feat: v1 v2 ... v_d        (num_nodes lines)
    label: <int or -1>         (num_nodes lines)
    edge: u v                  (num_edges lines, undirected, u < v canonical)

``csv-triple``: a manifest of ``key=value`` lines pointing at three CSV
files (``features``, ``labels``, ``edges``) relative to the manifest, plus
``num_classes``.  Features are one comma-separated row per node, labels one
integer per line, edges ``u,v`` per line.

Node splits serialize as one character per line: ``t`` (train), ``v``
(valid), ``s`` (test) or ``-`` (held out / unlabeled).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod


class GraphFormatError(ValueError):
    """Malformed graph file; carries a 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StratificationError(ValueError):
    pass


class NegativeSamplingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# core types
# --------------------------------------------------------------------------


@dataclass
class Graph:
    """Undirected attributed graph in CSR form.

    ``row_offsets`` has length num_nodes+1, ``col_indices`` holds the sorted
    neighbor lists of every node.  Edges are stored in both directions.
    """

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    num_classes: int | None = None

    def __post_init__(self):
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(self.col_indices, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    def validate(self):
        n = self.num_nodes
        if self.row_offsets.shape != (n + 1,):
            raise GraphFormatError(f"row_offsets length {len(self.row_offsets)} != num_nodes+1 ({n + 1})")
        if self.row_offsets[0] != 0 or np.any(np.diff(self.row_offsets) < 0):
            raise GraphFormatError("row_offsets must be non-decreasing and start at 0")
        if self.row_offsets[-1] != len(self.col_indices):
            raise GraphFormatError("row_offsets[-1] must equal len(col_indices)")
        if len(self.col_indices) and (self.col_indices.min() < 0 or self.col_indices.max() >= n):
            raise GraphFormatError("column index out of range")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise GraphFormatError("features must be a num_nodes x feat_dim matrix")
        for v in range(n):
            row = self.col_indices[self.row_offsets[v]:self.row_offsets[v + 1]]
            if len(row) > 1 and np.any(np.diff(row) <= 0):
                raise GraphFormatError(f"row {v} has unsorted or duplicate neighbors")
        if not self._is_symmetric():
            raise GraphFormatError("adjacency is not symmetric")
        if self.labels is not None and self.labels.shape != (n,):
            raise GraphFormatError("labels length must equal num_nodes")

    def _is_symmetric(self) -> bool:
        rows = np.repeat(np.arange(self.num_nodes, dtype=np.int64), np.diff(self.row_offsets))
        fwd = {(int(u), int(v)) for u, v in zip(rows, self.col_indices)}
        return all((v, u) in fwd for (u, v) in fwd)

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        """Number of undirected edges (each counted once)."""
        return len(self.col_indices) // 2

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def neighbors(self, v: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[v]:self.row_offsets[v + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        row = self.neighbors(u)
        i = np.searchsorted(row, v)
        return i < len(row) and row[i] == v

    def edge_list(self) -> np.ndarray:
        """Undirected edges as an (E, 2) array with u < v, sorted."""
        rows = np.repeat(np.arange(self.num_nodes, dtype=np.int64), np.diff(self.row_offsets))
        mask = rows < self.col_indices
        return np.column_stack([rows[mask], self.col_indices[mask]])


@dataclass
class SparseMatrix:
    """General CSR matrix with float32 weights (propagation operators)."""

    num_rows: int
    num_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    weights: np.ndarray
    _transpose: "SparseMatrix | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(self.col_indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float32)

    def matmul_dense(self, x: np.ndarray) -> np.ndarray:
        """Sparse @ dense. Products and row sums accumulate in float64."""
        if x.shape[0] != self.num_cols:
            raise ValueError(f"spmm shape mismatch: {self.num_rows}x{self.num_cols} @ {x.shape}")
        out = np.zeros((self.num_rows, x.shape[1]), dtype=np.float64)
        if len(self.col_indices):
            gathered = x[self.col_indices].astype(np.float64) * self.weights.astype(np.float64)[:, None]
            nnz = np.diff(self.row_offsets)
            nonempty = nnz > 0
            starts = self.row_offsets[:-1][nonempty]
            out[nonempty] = np.add.reduceat(gathered, starts, axis=0)
        return out.astype(x.dtype)

    def transpose(self) -> "SparseMatrix":
        if self._transpose is None:
            order = np.argsort(self.col_indices, kind="stable")
            rows = np.repeat(np.arange(self.num_rows, dtype=np.int64), np.diff(self.row_offsets))
            t_cols = rows[order]
            t_weights = self.weights[order]
            counts = np.bincount(self.col_indices, minlength=self.num_cols)
            t_offsets = np.zeros(self.num_cols + 1, dtype=np.int64)
            np.cumsum(counts, out=t_offsets[1:])
            self._transpose = SparseMatrix(self.num_cols, self.num_rows, t_offsets, t_cols, t_weights)
        return self._transpose

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.num_rows, self.num_cols), dtype=np.float32)
        rows = np.repeat(np.arange(self.num_rows, dtype=np.int64), np.diff(self.row_offsets))
        dense[rows, self.col_indices] = self.weights
        return dense


class NormAdj(SparseMatrix):
    """Symmetrically normalized adjacency with self-loops.

    weight(u, v) = 1 / sqrt((deg(u)+1) * (deg(v)+1))
    """

    @property
    def num_nodes(self) -> int:
        return self.num_rows


@dataclass
class SplitMasks:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=bool))
        if (self.train & self.valid).any() or (self.train & self.test).any() or (self.valid & self.test).any():
            raise ValueError("split masks overlap")


@dataclass
class EdgeSplit:
    """Positive edges partitioned into train/valid/test plus sampled negatives.

    Edge arrays have shape (k, 2) with u < v.  Negatives are verified
    non-edges, disjoint across splits.
    """

    train_pos: np.ndarray
    valid_pos: np.ndarray
    test_pos: np.ndarray
    valid_neg: np.ndarray
    test_neg: np.ndarray
    seed: int | None = None

    def all_positives(self) -> np.ndarray:
        return np.concatenate([self.train_pos, self.valid_pos, self.test_pos], axis=0)


# --------------------------------------------------------------------------
# construction helpers
# --------------------------------------------------------------------------


def build_csr(num_nodes: int, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrize, deduplicate and sort an edge list into CSR arrays.

    Self-loops in the input are dropped; each surviving edge appears in both
    directions.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges):
        if edges.min() < 0 or edges.max() >= num_nodes:
            raise GraphFormatError(
                f"edge endpoint {int(edges.max() if edges.max() >= num_nodes else edges.min())} "
                f"out of range for {num_nodes} nodes"
            )
        edges = edges[edges[:, 0] != edges[:, 1]]
    if len(edges) == 0:
        return np.zeros(num_nodes + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    keys = both[:, 0] * num_nodes + both[:, 1]
    uniq = np.unique(keys)
    rows = uniq // num_nodes
    cols = uniq % num_nodes
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=num_nodes), out=offsets[1:])
    return offsets, cols


def graph_from_edges(num_nodes, edges, features, labels=None, num_classes=None) -> Graph:
    offsets, cols = build_csr(num_nodes, np.asarray(edges))
    return Graph(num_nodes, offsets, cols, features, labels, num_classes)


# --------------------------------------------------------------------------
# loading / saving
# --------------------------------------------------------------------------


def load_graph(path: str | Path, format: str = "ngf-text") -> Graph:
    """Load a graph file in ``ngf-text`` or ``csv-triple`` format."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if format == "ngf-text":
        return _load_ngf(path)
    if format == "csv-triple":
        return _load_csv_triple(path)
    raise ValueError(f"unknown graph format: {format!r}")


def _load_ngf(path: Path) -> Graph:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise GraphFormatError("empty file", line=1)
    header = lines[0].split()
    if len(header) != 5 or header[0] != "NGF1":
        raise GraphFormatError("header must be 'NGF1 <nodes> <feat_dim> <edges> <classes>'", line=1)
    try:
        n, d, e, c = (int(tok) for tok in header[1:])
    except ValueError:
        raise GraphFormatError("header counts must be integers", line=1) from None
    expected = 1 + 2 * n + e
    if len(lines) < expected:
        raise GraphFormatError(f"expected {expected} lines, found {len(lines)}", line=len(lines))

    features = np.zeros((n, d), dtype=np.float32)
    for i in range(n):
        ln = 2 + i
        parts = lines[ln - 1].split()
        if not parts or parts[0] != "feat:":
            raise GraphFormatError("expected 'feat:' line", line=ln)
        if len(parts) - 1 != d:
            raise GraphFormatError(f"feature row has {len(parts) - 1} values, expected {d}", line=ln)
        try:
            features[i] = [float(tok) for tok in parts[1:]]
        except ValueError:
            raise GraphFormatError("malformed feature value", line=ln) from None

    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        ln = 2 + n + i
        parts = lines[ln - 1].split()
        if len(parts) != 2 or parts[0] != "label:":
            raise GraphFormatError("expected 'label: <int>' line", line=ln)
        try:
            labels[i] = int(parts[1])
        except ValueError:
            raise GraphFormatError("malformed label", line=ln) from None

    edges = np.zeros((e, 2), dtype=np.int64)
    for i in range(e):
        ln = 2 + 2 * n + i
        parts = lines[ln - 1].split()
        if len(parts) != 3 or parts[0] != "edge:":
            raise GraphFormatError("expected 'edge: u v' line", line=ln)
        try:
            u, v = int(parts[1]), int(parts[2])
        except ValueError:
            raise GraphFormatError("malformed edge endpoints", line=ln) from None
        if not (0 <= u < n and 0 <= v < n):
            raise GraphFormatError(f"edge ({u}, {v}) out of range for {n} nodes", line=ln)
        edges[i] = (u, v)

    num_classes = c if c > 0 else None
    if num_classes is None:
        labels_arr = None if np.all(labels == -1) else labels
    else:
        labels_arr = labels
    offsets, cols = build_csr(n, edges)
    return Graph(n, offsets, cols, features, labels_arr, num_classes)


def save_graph(g: Graph, path: str | Path):
    """Write canonical ngf-text: sorted undirected edges, %.9g float32 repr."""
    path = Path(path)
    edges = g.edge_list()
    labels = g.labels if g.labels is not None else np.full(g.num_nodes, -1, dtype=np.int64)
    num_classes = g.num_classes if g.num_classes is not None else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"NGF1 {g.num_nodes} {g.feat_dim} {len(edges)} {num_classes}\n")
        for row in g.features:
            fh.write("feat: " + " ".join("%.9g" % float(x) for x in row) + "\n")
        for lab in labels:
            fh.write(f"label: {int(lab)}\n")
        for u, v in edges:
            fh.write(f"edge: {int(u)} {int(v)}\n")


def _load_csv_triple(manifest_path: Path) -> Graph:
    keys = {}
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            if "=" not in raw:
                raise GraphFormatError("manifest lines must be key=value", line=ln)
            k, v = raw.split("=", 1)
            keys[k.strip()] = v.strip()
    for required in ("features", "edges"):
        if required not in keys:
            raise GraphFormatError(f"manifest missing '{required}' entry")
    base = manifest_path.parent

    with open(base / keys["features"], newline="", encoding="utf-8") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    if not rows:
        raise GraphFormatError("features file is empty")
    d = len(rows[0])
    for i, row in enumerate(rows, start=1):
        if len(row) != d:
            raise GraphFormatError(f"feature row has {len(row)} values, expected {d}", line=i)
    features = np.asarray(rows, dtype=np.float32)
    n = len(rows)

    labels = None
    if "labels" in keys:
        with open(base / keys["labels"], "r", encoding="utf-8") as fh:
            vals = [ln.strip() for ln in fh if ln.strip()]
        if len(vals) != n:
            raise GraphFormatError(f"labels file has {len(vals)} rows, expected {n}")
        labels = np.array([int(v) for v in vals], dtype=np.int64)

    with open(base / keys["edges"], newline="", encoding="utf-8") as fh:
        edge_rows = [row for row in csv.reader(fh) if row]
    edges = np.zeros((len(edge_rows), 2), dtype=np.int64)
    for i, row in enumerate(edge_rows, start=1):
        if len(row) != 2:
            raise GraphFormatError("edge rows must be 'u,v'", line=i)
        u, v = int(row[0]), int(row[1])
        if not (0 <= u < n and 0 <= v < n):
            raise GraphFormatError(f"edge ({u}, {v}) out of range for {n} nodes", line=i)
        edges[i - 1] = (u, v)

    num_classes = int(keys["num_classes"]) if "num_classes" in keys else None
    offsets, cols = build_csr(n, edges)
    return Graph(n, offsets, cols, features, labels, num_classes)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def normalize_adjacency(g: Graph) -> NormAdj:
    """Symmetric normalization with self-loops: D^{-1/2} (A + I) D^{-1/2}."""
    deg = g.degrees().astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(deg + 1.0)
    offsets = np.zeros(g.num_nodes + 1, dtype=np.int64)
    np.cumsum(deg.astype(np.int64) + 1, out=offsets[1:])
    cols = np.zeros(offsets[-1], dtype=np.int64)
    weights = np.zeros(offsets[-1], dtype=np.float32)
    for v in range(g.num_nodes):
        nbrs = g.neighbors(v)
        pos = np.searchsorted(nbrs, v)
        row = np.insert(nbrs, pos, v)
        cols[offsets[v]:offsets[v + 1]] = row
        weights[offsets[v]:offsets[v + 1]] = (inv_sqrt[v] * inv_sqrt[row]).astype(np.float32)
    return NormAdj(g.num_nodes, g.num_nodes, offsets, cols, weights)


def mean_adjacency(g: Graph) -> SparseMatrix:
    """Row-normalized adjacency (no self-loops); isolated nodes get zero rows."""
    deg = g.degrees().astype(np.float64)
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
    rows = np.repeat(np.arange(g.num_nodes, dtype=np.int64), np.diff(g.row_offsets))
    weights = inv[rows].astype(np.float32)
    return SparseMatrix(g.num_nodes, g.num_nodes, g.row_offsets.copy(), g.col_indices.copy(), weights)


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------


def _check_ratios(ratios):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    return ratios


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_nodes(g: Graph, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitMasks:
    """Stratified-by-class random node split, deterministic given seed."""
    ratios = _check_ratios(ratios)
    if g.labels is None:
        raise ValueError("split_nodes requires a labeled graph")
    gen = rngmod.make_rng(seed, rngmod.NODE_SPLIT)
    train = np.zeros(g.num_nodes, dtype=bool)
    valid = np.zeros(g.num_nodes, dtype=bool)
    test = np.zeros(g.num_nodes, dtype=bool)
    labeled = g.labels >= 0
    for cls in np.unique(g.labels[labeled]):
        idx = np.flatnonzero(g.labels == cls)
        if len(idx) < 3:
            raise StratificationError(f"class {int(cls)} has only {len(idx)} labeled nodes (need >= 3)")
        idx = idx[gen.permutation(len(idx))]
        n_tr = _round_half_up(ratios[0] * len(idx))
        n_va = _round_half_up(ratios[1] * len(idx))
        n_tr = min(n_tr, len(idx) - 2)
        n_va = min(n_va, len(idx) - n_tr - 1)
        train[idx[:n_tr]] = True
        valid[idx[n_tr:n_tr + n_va]] = True
        test[idx[n_tr + n_va:]] = True
    return SplitMasks(train, valid, test, seed)


def save_splits(masks: SplitMasks, path: str | Path):
    tags = np.full(len(masks.train), "-", dtype="<U1")
    tags[masks.train] = "t"
    tags[masks.valid] = "v"
    tags[masks.test] = "s"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(tags) + "\n")


def load_splits(path: str | Path) -> SplitMasks:
    with open(path, "r", encoding="utf-8") as fh:
        tags = [ln.strip() for ln in fh if ln.strip()]
    arr = np.array(tags)
    return SplitMasks(arr == "t", arr == "v", arr == "s", seed=None)


def split_edges(g: Graph, ratios=(0.85, 0.05, 0.10), num_negatives_per_positive: int = 1,
                seed: int = 0) -> EdgeSplit:
    """Split undirected edges and sample verified-non-edge negatives.

    Train positives define the message-passing graph during link training;
    valid/test edges are withheld from it.
    """
    ratios = _check_ratios(ratios)
    if num_negatives_per_positive < 1:
        raise ValueError("num_negatives_per_positive must be >= 1")
    edges = g.edge_list()
    if len(edges) < 10:
        raise ValueError(f"graph has {len(edges)} edges; need >= 10 to split")
    gen = rngmod.make_rng(seed, rngmod.EDGE_SPLIT)
    perm = gen.permutation(len(edges))
    edges = edges[perm]
    n_va = _round_half_up(ratios[1] * len(edges))
    n_te = _round_half_up(ratios[2] * len(edges))
    valid_pos = edges[:n_va]
    test_pos = edges[n_va:n_va + n_te]
    train_pos = edges[n_va + n_te:]

    edge_keys = set(map(int, edges[:, 0] * g.num_nodes + edges[:, 1]))
    taken: set[int] = set()

    def sample_negatives(count: int) -> np.ndarray:
        out = np.zeros((count, 2), dtype=np.int64)
        got = 0
        attempts = 0
        max_attempts = 200 * count + 1000
        while got < count:
            if attempts >= max_attempts:
                raise NegativeSamplingError(
                    f"could not sample {count} negative edges after {attempts} attempts; graph too dense")
            u = int(gen.integers(0, g.num_nodes))
            v = int(gen.integers(0, g.num_nodes))
            attempts += 1
            if u == v:
                continue
            if u > v:
                u, v = v, u
            key = u * g.num_nodes + v
            if key in edge_keys or key in taken:
                continue
            taken.add(key)
            out[got] = (u, v)
            got += 1
        return out

    valid_neg = sample_negatives(num_negatives_per_positive * len(valid_pos))
    test_neg = sample_negatives(num_negatives_per_positive * len(test_pos))
    return EdgeSplit(train_pos, valid_pos, test_pos, valid_neg, test_neg, seed)


def message_graph(g: Graph, split: EdgeSplit) -> Graph:
    """Graph containing only the training positives (features/labels kept)."""
    offsets, cols = build_csr(g.num_nodes, split.train_pos)
    return Graph(g.num_nodes, offsets, cols, g.features, g.labels, g.num_classes)
