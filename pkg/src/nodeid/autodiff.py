"""Minimal reverse-mode differentiation over dense 2-D arrays.

The tape records exactly the primitives the encoders, decoders, losses and
heads compose; there is no general expression graph.  All tensors are 2-D
(scalars are 1x1).  Training runs in float32; tests build float64 tensors
for finite-difference checks, and every primitive preserves the dtype of its
inputs.

Gradients produced outside the tape (the quantizer's commitment term) are
injected through ``backward(..., extra_grads=...)``: they are seeded into
the reverse sweep before any tape node is visited, so they accumulate into
upstream parameters exactly as if the term had been recorded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import SparseMatrix


class ShapeMismatchError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A 2-D value with an optional gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad", "is_leaf")

    def __init__(self, values, requires_grad: bool = False, is_leaf: bool = True):
        values = np.asarray(values)
        if values.ndim == 0:
            values = values.reshape(1, 1)
        elif values.ndim == 1:
            values = values.reshape(1, -1)
        if values.ndim != 2:
            raise ShapeMismatchError(f"tensors are 2-D, got shape {values.shape}")
        self.values = values
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.is_leaf = is_leaf

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatchError(f"item() on tensor of shape {self.shape}")
        return float(self.values[0, 0])

    def copy(self) -> "Tensor":
        t = Tensor(self.values.copy(), self.requires_grad, self.is_leaf)
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, is_leaf=True)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True, is_leaf=True)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or not t.is_leaf


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._spent = False

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        out.is_leaf = False
        self._ops.append((out, inputs, backward_fn))

    def __len__(self):
        return len(self._ops)


def backward(tape: Tape, loss: Tensor, extra_grads: dict[int, tuple[Tensor, np.ndarray]] | None = None):
    """Reverse sweep from a scalar loss; fills ``grad`` on parameters.

    ``extra_grads`` maps ``id(tensor)`` to ``(tensor, grad_array)`` pairs for
    externally computed gradient contributions to intermediate tensors.
    """
    if loss.values.size != 1:
        raise ShapeMismatchError(f"backward requires a scalar loss, got shape {loss.shape}")
    if tape._spent:
        raise TapeError("backward already ran on this tape; build a new forward pass first")
    tape._spent = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    holders: dict[int, Tensor] = {id(loss): loss}
    if extra_grads:
        for key, (t, g) in extra_grads.items():
            g = np.asarray(g, dtype=t.values.dtype)
            if g.shape != t.values.shape:
                raise ShapeMismatchError(f"extra grad shape {g.shape} != tensor shape {t.values.shape}")
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g.copy()
                holders[key] = t

    def accumulate(t: Tensor, contribution: np.ndarray):
        if not _needs_grad(t):
            return
        key = id(t)
        if key in grads:
            grads[key] += contribution
        else:
            grads[key] = np.array(contribution, dtype=t.values.dtype)
            holders[key] = t

    for out, inputs, backward_fn in reversed(tape._ops):
        g = grads.get(id(out))
        if g is None:
            continue
        backward_fn(g, accumulate)

    for key, t in holders.items():
        if t.requires_grad:
            if t.grad is None:
                t.grad = grads[key]
            else:
                t.grad += grads[key]


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def _check_same_dtype(*tensors: Tensor):
    dtypes = {t.values.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeMismatchError(f"mixed dtypes {sorted(map(str, dtypes))}")


def matmul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul shapes {a.shape} @ {b.shape}")
    _check_same_dtype(a, b)
    out = Tensor(a.values @ b.values, is_leaf=False)

    def bw(g, accumulate):
        if _needs_grad(a):
            accumulate(a, g @ b.values.T)
        if _needs_grad(b):
            accumulate(b, a.values.T @ g)

    tape._record(out, (a, b), bw)
    return out


def spmm(tape: Tape, sp: SparseMatrix, x: Tensor) -> Tensor:
    if sp.num_cols != x.shape[0]:
        raise ShapeMismatchError(f"spmm shapes ({sp.num_rows}x{sp.num_cols}) @ {x.shape}")
    out = Tensor(sp.matmul_dense(x.values), is_leaf=False)

    def bw(g, accumulate):
        if _needs_grad(x):
            accumulate(x, sp.transpose().matmul_dense(g))

    tape._record(out, (x,), bw)
    return out


def add(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add shapes {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)
    out = Tensor(a.values + b.values, is_leaf=False)

    def bw(g, accumulate):
        accumulate(a, g)
        accumulate(b, g)

    tape._record(out, (a, b), bw)
    return out


def add_bias(tape: Tape, x: Tensor, b: Tensor) -> Tensor:
    if b.shape != (1, x.shape[1]):
        raise ShapeMismatchError(f"bias shape {b.shape} does not broadcast over {x.shape}")
    _check_same_dtype(x, b)
    out = Tensor(x.values + b.values, is_leaf=False)

    def bw(g, accumulate):
        accumulate(x, g)
        if _needs_grad(b):
            accumulate(b, g.sum(axis=0, keepdims=True))

    tape._record(out, (x, b), bw)
    return out


def mul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul shapes {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)
    out = Tensor(a.values * b.values, is_leaf=False)

    def bw(g, accumulate):
        accumulate(a, g * b.values)
        accumulate(b, g * a.values)

    tape._record(out, (a, b), bw)
    return out


def scale(tape: Tape, x: Tensor, c: float) -> Tensor:
    out = Tensor(x.values * x.values.dtype.type(c), is_leaf=False)

    def bw(g, accumulate):
        accumulate(x, g * x.values.dtype.type(c))

    tape._record(out, (x,), bw)
    return out


def relu(tape: Tape, x: Tensor) -> Tensor:
    mask = x.values > 0
    out = Tensor(np.where(mask, x.values, x.values.dtype.type(0)), is_leaf=False)

    def bw(g, accumulate):
        accumulate(x, g * mask)

    tape._record(out, (x,), bw)
    return out


def dropout(tape: Tape, x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Identity (consuming no randomness) when disabled."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p)
    scale_val = x.values.dtype.type(1.0 / (1.0 - p))
    out = Tensor(np.where(keep, x.values * scale_val, x.values.dtype.type(0)), is_leaf=False)

    def bw(g, accumulate):
        accumulate(x, g * keep * scale_val)

    tape._record(out, (x,), bw)
    return out


def row_l2_normalize(tape: Tape, x: Tensor, eps: float = 1e-12) -> Tensor:
    norms = np.linalg.norm(x.values, axis=1, keepdims=True)
    safe = norms > eps
    denom = np.where(safe, norms, 1.0).astype(x.values.dtype)
    y = x.values / denom
    out = Tensor(y, is_leaf=False)

    def bw(g, accumulate):
        inner = (g * y).sum(axis=1, keepdims=True)
        gx = np.where(safe, (g - y * inner) / denom, g)
        accumulate(x, gx.astype(x.values.dtype))

    tape._record(out, (x,), bw)
    return out


def gather_rows(tape: Tape, x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for {x.shape[0]} rows")
    out = Tensor(x.values[idx], is_leaf=False)

    def bw(g, accumulate):
        if _needs_grad(x):
            gx = np.zeros_like(x.values)
            np.add.at(gx, idx, g)
            accumulate(x, gx)

    tape._record(out, (x,), bw)
    return out


def embedding_lookup(tape: Tape, table: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of a K x d table selected by integer codes."""
    return gather_rows(tape, table, idx)


def row_blend(tape: Tape, base: np.ndarray, fill: Tensor, idx: np.ndarray) -> Tensor:
    """Copy of ``base`` with rows ``idx`` replaced by the 1 x d ``fill`` row."""
    idx = np.asarray(idx, dtype=np.int64)
    if fill.shape != (1, base.shape[1]):
        raise ShapeMismatchError(f"fill shape {fill.shape} vs base width {base.shape[1]}")
    vals = np.array(base, dtype=fill.values.dtype)
    vals[idx] = fill.values
    out = Tensor(vals, is_leaf=False)

    def bw(g, accumulate):
        if _needs_grad(fill):
            accumulate(fill, g[idx].sum(axis=0, keepdims=True))

    tape._record(out, (fill,), bw)
    return out


def concat_cols(tape: Tape, parts: list[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeMismatchError(f"concat_cols row counts differ: {sorted(rows)}")
    _check_same_dtype(*parts)
    out = Tensor(np.concatenate([p.values for p in parts], axis=1), is_leaf=False)
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bw(g, accumulate):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            accumulate(part, g[:, lo:hi])

    tape._record(out, tuple(parts), bw)
    return out


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def softmax_cross_entropy(tape: Tape, logits: Tensor, targets: np.ndarray,
                          mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over masked rows, max-stabilized."""
    targets = np.asarray(targets, dtype=np.int64)
    if mask is None:
        rows = np.arange(logits.shape[0])
    else:
        rows = np.flatnonzero(np.asarray(mask, dtype=bool))
    if len(rows) == 0:
        raise ValueError("softmax_cross_entropy: empty mask")
    tgt = targets[rows]
    if tgt.min() < 0 or tgt.max() >= logits.shape[1]:
        raise ValueError(f"target outside [0, {logits.shape[1]})")
    z = logits.values[rows]
    zs = z - z.max(axis=1, keepdims=True)
    expz = np.exp(zs)
    sums = expz.sum(axis=1, keepdims=True)
    logp = zs - np.log(sums)
    n = len(rows)
    loss = -logp[np.arange(n), tgt].mean()
    out = Tensor(np.array([[loss]], dtype=logits.values.dtype), is_leaf=False)

    def bw(g, accumulate):
        if _needs_grad(logits):
            p = expz / sums
            p[np.arange(n), tgt] -= 1.0
            gl = np.zeros_like(logits.values)
            gl[rows] = p * (g[0, 0] / n)
            accumulate(logits, gl)

    tape._record(out, (logits,), bw)
    return out


def scaled_cosine_error(tape: Tape, recon: Tensor, target, gamma: float,
                        mask: np.ndarray | None = None, power: bool = True) -> Tensor:
    """Cosine reconstruction error averaged over masked rows.

    ``power=True`` uses (1 - cos)^gamma, ``power=False`` the literal scaled
    form 1 - cos * gamma.  Rows where either side has zero norm contribute
    loss 1 with zero gradient.
    """
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    tvals = target.values if isinstance(target, Tensor) else np.asarray(target)
    if tvals.shape != recon.values.shape:
        raise ShapeMismatchError(f"cosine error shapes {recon.shape} vs {tvals.shape}")
    if mask is None:
        rows = np.arange(recon.shape[0])
    else:
        rows = np.flatnonzero(np.asarray(mask, dtype=bool))
    if len(rows) == 0:
        raise ValueError("scaled_cosine_error: empty mask")
    eps = 1e-12
    z = recon.values[rows].astype(np.float64)
    x = tvals[rows].astype(np.float64)
    nz = np.linalg.norm(z, axis=1)
    nx = np.linalg.norm(x, axis=1)
    ok = (nz > eps) & (nx > eps)
    denom = np.where(ok, nz * nx, 1.0)
    cos = np.where(ok, (z * x).sum(axis=1) / denom, 0.0)
    cos = np.clip(cos, -1.0, 1.0)
    base = 1.0 - cos
    if power:
        per_row = base ** gamma
        dcos = -gamma * base ** (gamma - 1.0)
    else:
        per_row = 1.0 - cos * gamma
        dcos = np.full_like(cos, -gamma)
    n = len(rows)
    loss = per_row.mean()
    out = Tensor(np.array([[loss]], dtype=recon.values.dtype), is_leaf=False)

    def bw(g, accumulate):
        coeff = np.where(ok, dcos * (g[0, 0] / n), 0.0)[:, None]
        if _needs_grad(recon):
            dz = coeff * (x / denom[:, None] - cos[:, None] * z / np.where(ok, nz * nz, 1.0)[:, None])
            gz = np.zeros_like(recon.values)
            gz[rows] = dz.astype(recon.values.dtype)
            accumulate(recon, gz)
        if isinstance(target, Tensor) and _needs_grad(target):
            dx = coeff * (z / denom[:, None] - cos[:, None] * x / np.where(ok, nx * nx, 1.0)[:, None])
            gx = np.zeros_like(target.values)
            gx[rows] = dx.astype(target.values.dtype)
            accumulate(target, gx)

    inputs = (recon, target) if isinstance(target, Tensor) else (recon,)
    tape._record(out, inputs, bw)
    return out


def binary_cross_entropy_logits(tape: Tape, logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean sigmoid cross-entropy; logits are (n, 1), targets 0/1."""
    if logits.shape[1] != 1:
        raise ShapeMismatchError(f"binary logits must be (n, 1), got {logits.shape}")
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(y) != logits.shape[0]:
        raise ShapeMismatchError(f"{logits.shape[0]} logits vs {len(y)} targets")
    s = logits.values[:, 0].astype(np.float64)
    loss = (np.maximum(s, 0.0) - s * y + np.log1p(np.exp(-np.abs(s)))).mean()
    out = Tensor(np.array([[loss]], dtype=logits.values.dtype), is_leaf=False)

    def bw(g, accumulate):
        if _needs_grad(logits):
            sig = 1.0 / (1.0 + np.exp(-s))
            ds = ((sig - y) * (g[0, 0] / len(y)))[:, None]
            accumulate(logits, ds.astype(logits.values.dtype))

    tape._record(out, (logits,), bw)
    return out


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam with bias correction, one slot pair per parameter."""

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.values) for p in self.params]
        if not self.v:
            self.v = [np.zeros_like(p.values) for p in self.params]


def adam_step(state: AdamState):
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for p, m, v in zip(state.params, state.m, state.v):
        if p.grad is None:
            continue
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (state.lr / corr1) * m / (np.sqrt(v / corr2) + state.eps)
        p.values -= update.astype(p.values.dtype)


def zero_grads(params: list[Tensor]):
    for p in params:
        p.grad = None
