"""The node-ID table: one tuple of L*M small integer codewords per node.

Codes are stored layer-major, level-minor: positions (l-1)*M + (m-1) for
layer l and level m, both 1-based.  In memory codes are uint8; on disk they
pack two-per-byte (low nibble first) whenever the codebook size allows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class NodeIdTable:
    num_nodes: int
    num_layers: int
    num_levels: int
    k: int
    codes: np.ndarray

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.uint8)
        width = self.num_layers * self.num_levels
        if self.codes.shape != (self.num_nodes, width):
            raise ValueError(f"codes shape {self.codes.shape} != ({self.num_nodes}, {width})")
        if self.codes.size and int(self.codes.max()) >= self.k:
            raise ValueError(f"code {int(self.codes.max())} out of range for K={self.k}")

    @property
    def width(self) -> int:
        return self.num_layers * self.num_levels

    def position(self, layer: int, level: int) -> int:
        """Column of codeword c_{lm} (1-based layer and level)."""
        return (layer - 1) * self.num_levels + (level - 1)


def pack_nibbles(codes: np.ndarray) -> bytes:
    """Pack one node's codes two-per-byte, low nibble first, zero padded."""
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim != 2:
        raise ValueError("expected (num_nodes, width) codes")
    if codes.size and int(codes.max()) > 15:
        raise ValueError("nibble packing requires codes < 16")
    n, width = codes.shape
    padded = codes
    if width % 2:
        padded = np.concatenate([codes, np.zeros((n, 1), dtype=np.uint8)], axis=1)
    low = padded[:, 0::2]
    high = padded[:, 1::2]
    return ((high << 4) | low).astype(np.uint8).tobytes()


def unpack_nibbles(payload: bytes, num_nodes: int, width: int) -> np.ndarray:
    per_node = (width + 1) // 2
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(num_nodes, per_node)
    out = np.zeros((num_nodes, 2 * per_node), dtype=np.uint8)
    out[:, 0::2] = raw & 0x0F
    out[:, 1::2] = raw >> 4
    return out[:, :width].copy()
