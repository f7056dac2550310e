"""Binary model and ID-table files, plus the line-record metric format.

Model file (magic ``NIDM``, little-endian): version, a sorted key=value
config echo (the reproducibility manifest: seed, grid choices, metric and
residual-normalization convention), encoder weights, optional supervised
head / reconstruction decoder / mask vector, and every codebook with its
EMA state.

ID file (magic ``NID1``): fixed header then node-major payload.  Codes pack
two per byte (low nibble first) exactly when K <= 16, one per byte
otherwise; per-node payloads pad to a byte boundary with zeros, so files
round-trip byte-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .encoders import Decoder, EncoderStack, GcnLayer, SageLayer
from .idtable import NodeIdTable, pack_nibbles, unpack_nibbles
from .nn import Mlp
from .quantize import Codebook, CodebookSet
from .training import TrainConfig, TrainResult

MODEL_MAGIC = b"NIDM"
ID_MAGIC = b"NID1"
MODEL_VERSION = 1
ID_VERSION = 1
ID_HEADER = struct.Struct("<4sHQBBBB")


class FileFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# ID files
# --------------------------------------------------------------------------


def id_payload_bytes(num_nodes: int, width: int, k: int) -> int:
    """Exact payload size: nibble-packed iff K <= 16, padded per node."""
    per_node = (width + 1) // 2 if k <= 16 else width
    return num_nodes * per_node


def id_file_bytes(num_nodes: int, width: int, k: int) -> int:
    return ID_HEADER.size + id_payload_bytes(num_nodes, width, k)


def write_ids(path: str | Path, tbl: NodeIdTable):
    packing = 0 if tbl.k <= 16 else 1
    header = ID_HEADER.pack(ID_MAGIC, ID_VERSION, tbl.num_nodes,
                            tbl.num_layers, tbl.num_levels, tbl.k, packing)
    if packing == 0:
        payload = pack_nibbles(tbl.codes)
    else:
        payload = tbl.codes.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_ids(path: str | Path) -> NodeIdTable:
    raw = Path(path).read_bytes()
    if len(raw) < ID_HEADER.size:
        raise FileFormatError("truncated ID file")
    magic, version, num_nodes, layers, levels, k, packing = ID_HEADER.unpack_from(raw)
    if magic != ID_MAGIC:
        raise FileFormatError(f"bad magic {magic!r}")
    if version != ID_VERSION:
        raise FileFormatError(f"unsupported ID file version {version}")
    if packing not in (0, 1) or (packing == 0) != (k <= 16):
        raise FileFormatError(f"packing byte {packing} inconsistent with K={k}")
    width = layers * levels
    payload = raw[ID_HEADER.size:]
    expected = id_payload_bytes(num_nodes, width, k)
    if len(payload) != expected:
        raise FileFormatError(f"payload is {len(payload)} bytes, expected {expected}")
    if packing == 0:
        codes = unpack_nibbles(payload, num_nodes, width)
    else:
        codes = np.frombuffer(payload, dtype=np.uint8).reshape(num_nodes, width).copy()
    return NodeIdTable(num_nodes, layers, levels, k, codes)


# --------------------------------------------------------------------------
# model files
# --------------------------------------------------------------------------


def _write_array(fh, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.astype("<f4").tobytes())


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def _config_text(cfg: TrainConfig) -> str:
    items = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        items[f.name] = repr(v) if isinstance(v, float) else str(v)
    items["residuals_normalized_for_distance"] = "True"
    return "".join(f"{k}={items[k]}\n" for k in sorted(items))


def _parse_config(text: str) -> TrainConfig:
    raw = {}
    for line in text.splitlines():
        if not line:
            continue
        k, v = line.split("=", 1)
        raw[k] = v
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name not in raw:
            continue
        v = raw[f.name]
        if f.type in ("int", int):
            kwargs[f.name] = int(v)
        elif f.type in ("float", float):
            kwargs[f.name] = float(v)
        elif f.type in ("bool", bool):
            kwargs[f.name] = v == "True"
        else:
            kwargs[f.name] = v
    return TrainConfig(**kwargs)


@dataclass
class LoadedModel:
    config: TrainConfig
    encoder: EncoderStack
    codebooks: CodebookSet | None
    head: Mlp | None
    decoder: Decoder | None
    mask_vector: Tensor | None


def write_model(path: str | Path, result: TrainResult):
    cfg = result.config
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<H", MODEL_VERSION))
        blob = _config_text(cfg).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)

        enc = result.encoder
        fh.write(struct.pack("<BB", 0 if enc.kind == "gcn" else 1, enc.num_layers))
        for layer in enc.layers:
            for p in layer.params():
                _write_array(fh, p.values)

        head = result.head
        fh.write(struct.pack("<B", 0 if head is None else len(head.weights)))
        if head is not None:
            for p in head.params():
                _write_array(fh, p.values)

        dec = result.decoder
        if dec is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1 if dec.kind == "linear" else 2))
            for p in dec.params():
                _write_array(fh, p.values)

        fh.write(struct.pack("<B", 0 if result.mask_vector is None else 1))
        if result.mask_vector is not None:
            _write_array(fh, result.mask_vector.values)

        cbset = result.codebooks
        fh.write(struct.pack("<B", 0 if cbset is None else 1))
        if cbset is not None:
            fh.write(struct.pack("<BBBB", cbset.num_layers, cbset.num_levels, cbset.k,
                                 0 if cbset.metric == "cosine" else 1))
            fh.write(struct.pack("<f", cbset.beta))
            for row in cbset.grid:
                for cb in row:
                    _write_array(fh, cb.vectors)
                    _write_array(fh, cb.ema_count)
                    _write_array(fh, cb.ema_sum)


def read_model(path: str | Path) -> LoadedModel:
    with open(path, "rb") as fh:
        if fh.read(4) != MODEL_MAGIC:
            raise FileFormatError("bad model magic")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != MODEL_VERSION:
            raise FileFormatError(f"unsupported model version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        cfg = _parse_config(fh.read(blob_len).decode("utf-8"))

        kind_code, n_layers = struct.unpack("<BB", fh.read(2))
        kind = "gcn" if kind_code == 0 else "sage"
        layers = []
        for _ in range(n_layers):
            if kind == "gcn":
                w = _read_array(fh)
                b = _read_array(fh)
                layers.append(GcnLayer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)))
            else:
                ws = _read_array(fh)
                wn = _read_array(fh)
                b = _read_array(fh)
                layers.append(SageLayer(Tensor(ws, requires_grad=True), Tensor(wn, requires_grad=True),
                                        Tensor(b, requires_grad=True)))
        encoder = EncoderStack(kind, layers, cfg.dropout_p)

        (n_head_layers,) = struct.unpack("<B", fh.read(1))
        head = None
        if n_head_layers:
            weights, biases = [], []
            for _ in range(n_head_layers):
                weights.append(Tensor(_read_array(fh), requires_grad=True))
                biases.append(Tensor(_read_array(fh), requires_grad=True))
            head = Mlp(weights, biases)

        (dec_code,) = struct.unpack("<B", fh.read(1))
        decoder = None
        if dec_code:
            w = Tensor(_read_array(fh), requires_grad=True)
            b = Tensor(_read_array(fh), requires_grad=True)
            decoder = Decoder("linear" if dec_code == 1 else "gcn", GcnLayer(w, b))

        (has_mask,) = struct.unpack("<B", fh.read(1))
        mask_vector = Tensor(_read_array(fh), requires_grad=True) if has_mask else None

        (has_cb,) = struct.unpack("<B", fh.read(1))
        cbset = None
        if has_cb:
            L, M, k, metric_code = struct.unpack("<BBBB", fh.read(4))
            (beta,) = struct.unpack("<f", fh.read(4))
            metric = "cosine" if metric_code == 0 else "l2"
            grid = []
            for _ in range(L):
                row = []
                for _ in range(M):
                    vectors = _read_array(fh)
                    ema_count = _read_array(fh)
                    ema_sum = _read_array(fh)
                    row.append(Codebook(vectors, ema_count, ema_sum,
                                        np.zeros(k, dtype=np.int64), metric))
                grid.append(row)
            cbset = CodebookSet(grid, float(beta))

    return LoadedModel(cfg, encoder, cbset, head, decoder, mask_vector)


# --------------------------------------------------------------------------
# metric records
# --------------------------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, float):
        return "%.6g" % v
    return str(v)


def format_record(**kv) -> str:
    """One evaluation = one line of space-separated key=value pairs."""
    return " ".join(f"{k}={format_value(v)}" for k, v in kv.items())
