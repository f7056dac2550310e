"""Small dense building blocks shared by trainers and downstream heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .autodiff import Tape, Tensor
from .encoders import glorot


@dataclass
class Mlp:
    """Fully connected relu network with optional dropout on hidden layers."""

    weights: list[Tensor]
    biases: list[Tensor]
    dropout_p: float = 0.0

    @classmethod
    def create(cls, dims: list[int], dropout_p: float = 0.0, seed: int = 0,
               stream_offset: int = 0) -> "Mlp":
        if len(dims) < 2:
            raise ValueError("Mlp needs at least input and output dims")
        rng = rngmod.make_rng(seed, rngmod.HEAD + 31 * (stream_offset + 1))
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            weights.append(ad.parameter(glorot(rng, d_in, d_out)))
            biases.append(ad.parameter(np.zeros((1, d_out), dtype=np.float32)))
        return cls(weights, biases, dropout_p)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def state(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.params()]

    def load_state(self, arrays: list[np.ndarray]):
        for p, a in zip(self.params(), arrays):
            p.values = a.copy()

    def forward(self, tape: Tape, x: Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add_bias(tape, ad.matmul(tape, h, w), b)
            if i < last:
                h = ad.relu(tape, h)
                h = ad.dropout(tape, h, self.dropout_p, training, rng)
        return h
