"""Message-passing encoders returning embeddings from every layer.

Two instantiations are provided: graph convolution over the symmetrically
normalized adjacency (H' = relu(A_norm H W + b)) and the mean-aggregator
variant (H' = relu(H W_self + mean_N(H) W_neigh + b)).  The full per-layer
stack [H^1 .. H^L] is returned because each layer feeds its own group of
quantizers downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .autodiff import Tape, Tensor
from .graph import Graph, SparseMatrix, mean_adjacency, normalize_adjacency


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


@dataclass
class GcnLayer:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, rng, d_in: int, d_out: int) -> "GcnLayer":
        return cls(ad.parameter(glorot(rng, d_in, d_out)),
                   ad.parameter(np.zeros((1, d_out), dtype=np.float32)))

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def forward(self, tape: Tape, prop: SparseMatrix, h: Tensor) -> Tensor:
        return ad.add_bias(tape, ad.spmm(tape, prop, ad.matmul(tape, h, self.weight)), self.bias)


@dataclass
class SageLayer:
    weight_self: Tensor
    weight_neigh: Tensor
    bias: Tensor

    @classmethod
    def create(cls, rng, d_in: int, d_out: int) -> "SageLayer":
        return cls(ad.parameter(glorot(rng, d_in, d_out)),
                   ad.parameter(glorot(rng, d_in, d_out)),
                   ad.parameter(np.zeros((1, d_out), dtype=np.float32)))

    def params(self) -> list[Tensor]:
        return [self.weight_self, self.weight_neigh, self.bias]

    def forward(self, tape: Tape, prop: SparseMatrix, h: Tensor) -> Tensor:
        own = ad.matmul(tape, h, self.weight_self)
        agg = ad.matmul(tape, ad.spmm(tape, prop, h), self.weight_neigh)
        return ad.add_bias(tape, ad.add(tape, own, agg), self.bias)


@dataclass
class EncoderStack:
    """L message-passing layers with relu between them and dropout on inputs."""

    kind: str
    layers: list = field(default_factory=list)
    dropout_p: float = 0.0

    @classmethod
    def create(cls, kind: str, dims: list[int], dropout_p: float, seed: int) -> "EncoderStack":
        if kind not in ("gcn", "sage"):
            raise ValueError(f"unknown encoder kind {kind!r}")
        if len(dims) < 2:
            raise ValueError("need at least one layer (dims must chain d_in -> ... -> d_out)")
        rng = rngmod.make_rng(seed, rngmod.WEIGHT_INIT)
        layer_cls = GcnLayer if kind == "gcn" else SageLayer
        layers = [layer_cls.create(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        return cls(kind, layers, dropout_p)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def hidden_dim(self) -> int:
        return self.layers[-1].bias.shape[1]

    @property
    def input_dim(self) -> int:
        first = self.layers[0]
        w = first.weight if self.kind == "gcn" else first.weight_self
        return w.shape[0]

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def state(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.params()]

    def load_state(self, arrays: list[np.ndarray]):
        for p, a in zip(self.params(), arrays):
            p.values = a.copy()


def build_propagation(kind: str, g: Graph) -> SparseMatrix:
    """Propagation operator matching the encoder kind."""
    if kind == "gcn":
        return normalize_adjacency(g)
    if kind == "sage":
        return mean_adjacency(g)
    raise ValueError(f"unknown encoder kind {kind!r}")


def encode_all_layers(tape: Tape, stack: EncoderStack, prop: SparseMatrix, x: Tensor,
                      training: bool = False, rng: np.random.Generator | None = None,
                      preactivation: bool = False) -> list[Tensor]:
    """Run every layer and return [H^1 .. H^L].

    Returned tensors are post-activation by default; ``preactivation=True``
    returns the pre-relu outputs while propagation still uses the activated
    values.
    """
    if x.shape[0] != prop.num_cols:
        raise ad.ShapeMismatchError(f"features rows {x.shape[0]} != graph nodes {prop.num_cols}")
    if x.shape[1] != stack.input_dim:
        raise ad.ShapeMismatchError(f"feature dim {x.shape[1]} != first layer input {stack.input_dim}")
    outputs = []
    h = x
    for layer in stack.layers:
        hd = ad.dropout(tape, h, stack.dropout_p, training, rng)
        z = layer.forward(tape, prop, hd)
        a = ad.relu(tape, z)
        outputs.append(z if preactivation else a)
        h = a
    return outputs


@dataclass
class Decoder:
    """Feature-reconstruction head: a linear map or one graph-conv layer."""

    kind: str
    layer: GcnLayer

    @classmethod
    def create(cls, kind: str, d_in: int, d_out: int, seed: int) -> "Decoder":
        if kind not in ("linear", "gcn"):
            raise ValueError(f"unknown decoder kind {kind!r}")
        rng = rngmod.make_rng(seed, rngmod.WEIGHT_INIT + 1000)
        return cls(kind, GcnLayer.create(rng, d_in, d_out))

    def params(self) -> list[Tensor]:
        return self.layer.params()

    def state(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.params()]

    def load_state(self, arrays: list[np.ndarray]):
        for p, a in zip(self.params(), arrays):
            p.values = a.copy()


def decoder_forward(tape: Tape, dec: Decoder, prop: SparseMatrix, h_last: Tensor) -> Tensor:
    if dec.kind == "gcn":
        return dec.layer.forward(tape, prop, h_last)
    return ad.add_bias(tape, ad.matmul(tape, h_last, dec.layer.weight), dec.layer.bias)
