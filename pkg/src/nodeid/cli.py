"""Command-line surface: train, export-ids, eval-*, cluster, retrieve, bench.

Configuration comes from an optional flat ``key=value`` file plus CLI flag
overrides; unknown file keys are rejected and every run echoes its resolved
configuration as ``config.<key>=<value>`` lines.  All other output lines are
metric records: space-separated ``key=value`` pairs, one record per line,
with a fixed key vocabulary (``event``, ``name``, ``value``, ``path``,
timing keys ending in ``_ms``).  Failures print a single
``event=error message="..."`` record and exit nonzero.  ``NID_SEED`` is the
global seed fallback.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import downstream as ds
from . import modelio
from . import rng as rngmod
from . import training as tr
from .autodiff import Tape, tensor
from .encoders import build_propagation, encode_all_layers
from .graph import load_graph, split_edges, split_nodes
from .metrics import hits_at_k
from .modelio import format_record
from .nn import Mlp

CONFIG_KEYS = {
    "data", "graph_format", "model", "ids", "ids_dir", "out", "labels",
    "objective", "encoder", "L", "hidden", "M", "K", "beta", "lr", "epochs",
    "dropout", "seed", "vq_mode", "metric", "gamma", "mask_rate", "ratios",
    "edge_ratios", "warmup", "patience", "hits_k", "negatives", "head_hidden",
    "head_lr", "head_epochs", "head_patience", "head_metric", "head_dropout",
    "k", "query", "top", "repeats", "ref_dim", "readout", "decoder",
    "cosine_power", "quantize_preactivation", "allow_any_k", "ema_decay",
}


class CliError(ValueError):
    pass


def _parse_config_file(path: str) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            if "=" not in raw:
                raise CliError(f"config line {ln}: expected key=value")
            key, value = raw.split("=", 1)
            key = key.strip()
            if key not in CONFIG_KEYS:
                raise CliError(f"config line {ln}: unknown key {key!r}")
            out[key] = value.strip()
    return out


def _resolve(args: argparse.Namespace) -> dict:
    """File settings overridden by CLI flags; flags not given fall back."""
    settings = {}
    if getattr(args, "config", None):
        settings.update(_parse_config_file(args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag
    return settings


def _get(settings, key, default=None, cast=str):
    if key not in settings or settings[key] == "":
        return default
    v = settings[key]
    if cast is bool:
        return v in (True, "True", "true", "1", "yes")
    return cast(v)


def _ratios(text: str | None, default):
    if not text:
        return default
    parts = [float(x) for x in str(text).split(",")]
    if len(parts) != 3:
        raise CliError(f"ratios need three comma-separated values, got {text!r}")
    return tuple(parts)


def _hidden_tuple(text, default):
    if text is None:
        return default
    if isinstance(text, tuple):
        return text
    return tuple(int(x) for x in str(text).split(",") if x)


def _echo_config(settings: dict, out):
    for key in sorted(settings):
        print(f"config.{key}={settings[key]}", file=out)


def _train_config(settings, seed) -> tr.TrainConfig:
    return tr.TrainConfig(
        encoder=_get(settings, "encoder", "gcn"),
        layers=_get(settings, "L", 2, int),
        hidden_dim=_get(settings, "hidden", 64, int),
        levels=_get(settings, "M", 3, int),
        codebook_size=_get(settings, "K", 16, int),
        beta=_get(settings, "beta", 1.0, float),
        objective=_get(settings, "objective", "supervised-node"),
        mask_rate=_get(settings, "mask_rate", 0.5, float),
        gamma=_get(settings, "gamma", 2.0, float),
        cosine_power=_get(settings, "cosine_power", True, bool),
        lr=_get(settings, "lr", 0.01, float),
        epochs=_get(settings, "epochs", 200, int),
        dropout_p=_get(settings, "dropout", 0.5, float),
        seed=seed,
        vq_mode=_get(settings, "vq_mode", "ema"),
        metric=_get(settings, "metric", "cosine"),
        ema_decay=_get(settings, "ema_decay", 0.99, float),
        warmup_epochs=_get(settings, "warmup", 10, int),
        quantize_preactivation=_get(settings, "quantize_preactivation", False, bool),
        decoder_kind=_get(settings, "decoder", "gcn"),
        hits_k=_get(settings, "hits_k", 10, int),
        negatives_per_positive=_get(settings, "negatives", 1, int),
        patience=_get(settings, "patience", 0, int),
        allow_any_k=_get(settings, "allow_any_k", False, bool),
    )


def _head_config(settings, seed) -> ds.HeadConfig:
    return ds.HeadConfig(
        hidden=_hidden_tuple(_get(settings, "head_hidden"), (256, 256)),
        dropout_p=_get(settings, "head_dropout", 0.5, float),
        lr=_get(settings, "head_lr", 1e-2, float),
        epochs=_get(settings, "head_epochs", 1000, int),
        patience=_get(settings, "head_patience", 100, int),
        seed=seed,
        metric=_get(settings, "head_metric", "accuracy"),
        hits_k=_get(settings, "hits_k", 10, int),
        negatives_per_positive=_get(settings, "negatives", 1, int),
    )


def _load_data(settings):
    path = _get(settings, "data")
    if not path:
        raise CliError("missing required setting: data")
    fmt = _get(settings, "graph_format", "ngf-text")
    return load_graph(path, fmt)


def _load_graph_dir(settings):
    root = Path(_get(settings, "data"))
    labels_file = _get(settings, "labels")
    if not labels_file:
        raise CliError("graph objective needs labels=<file> with '<name> <label>' lines")
    names, labels = [], []
    with open(labels_file, "r", encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            name, lab = raw.split()
            names.append(name)
            labels.append(int(lab))
    graphs = [load_graph(root / name) for name in names]
    return graphs, np.array(labels, dtype=np.int64), names


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(settings, out) -> int:
    seed = rngmod.default_seed(_get(settings, "seed", None, int))
    settings["seed"] = seed
    cfg = _train_config(settings, seed)
    objective = cfg.objective
    model_path = _get(settings, "model")
    if not model_path:
        raise CliError("missing required setting: model (output path)")
    _echo_config(settings, out)

    if objective == "supervised-node":
        g = _load_data(settings)
        splits = split_nodes(g, _ratios(_get(settings, "ratios"), (0.6, 0.2, 0.2)), seed)
        result = tr.train_supervised_node(g, splits, cfg)
        metrics = tr.evaluate_node(result, g, splits)
        for split, value in metrics.items():
            print(format_record(event="metric", task="node-classification",
                                name=f"{split}_accuracy", value=value), file=out)
    elif objective == "mae":
        g = _load_data(settings)
        result = tr.train_mae(g, cfg)
        print(format_record(event="metric", task="mae", name="best_recon_loss",
                            value=result.best_val), file=out)
    elif objective == "supervised-link":
        g = _load_data(settings)
        edges = split_edges(g, _ratios(_get(settings, "edge_ratios"), (0.85, 0.05, 0.10)),
                            cfg.negatives_per_positive, seed)
        result = tr.train_supervised_link(g, edges, cfg)
        metrics = tr.evaluate_link(result, g, edges)
        for name, value in metrics.items():
            print(format_record(event="metric", task="link-prediction",
                                name=f"{name}@{cfg.hits_k}", value=value), file=out)
    elif objective == "supervised-graph":
        graphs, labels, _ = _load_graph_dir(settings)
        result = tr.train_supervised_graph(graphs, labels, cfg)
        print(format_record(event="metric", task="graph-classification",
                            name="best_valid_accuracy", value=result.best_val), file=out)
    else:
        raise CliError(f"unknown objective {objective!r}")

    if result.log.epochs:
        print(format_record(event="metric", name="final_total_loss",
                            value=result.log.loss_total[-1]), file=out)
        if result.codebooks is not None:
            print(format_record(event="metric", name="codebook_usage",
                                value=result.log.usage[-1]), file=out)
    modelio.write_model(model_path, result)
    print(format_record(event="artifact", kind="model", path=model_path), file=out)
    return 0


def cmd_export_ids(settings, out) -> int:
    model = modelio.read_model(_get(settings, "model"))
    out_path = _get(settings, "out")
    if not out_path:
        raise CliError("missing required setting: out (ID file path)")
    _echo_config(settings, out)
    if model.codebooks is None:
        raise CliError("model has no codebooks; was it trained with levels=0?")
    if _get(settings, "labels"):
        graphs, _, names = _load_graph_dir(settings)
        out_dir = Path(out_path)
        out_dir.mkdir(parents=True, exist_ok=True)
        for g, name in zip(graphs, names):
            tbl = tr.generate_ids(model.encoder, model.codebooks, g,
                                  model.config.quantize_preactivation)
            modelio.write_ids(out_dir / (Path(name).stem + ".nid"), tbl)
        print(format_record(event="artifact", kind="id-dir", path=str(out_dir),
                            count=len(graphs)), file=out)
        return 0
    g = _load_data(settings)
    tbl = tr.generate_ids(model.encoder, model.codebooks, g,
                          model.config.quantize_preactivation)
    modelio.write_ids(out_path, tbl)
    print(format_record(event="artifact", kind="ids", path=out_path,
                        num_nodes=tbl.num_nodes, width=tbl.width, k=tbl.k,
                        payload_bytes=modelio.id_payload_bytes(tbl.num_nodes, tbl.width, tbl.k)),
          file=out)
    return 0


def cmd_eval_node(settings, out) -> int:
    seed = rngmod.default_seed(_get(settings, "seed", None, int))
    settings["seed"] = seed
    tbl = modelio.read_ids(_get(settings, "ids"))
    g = _load_data(settings)
    splits = split_nodes(g, _ratios(_get(settings, "ratios"), (0.6, 0.2, 0.2)), seed)
    _echo_config(settings, out)
    head_cfg = _head_config(settings, seed)
    _, metric = ds.train_node_head(tbl, g.labels, splits, head_cfg)
    name = "test_auc" if head_cfg.metric == "auc" else "test_accuracy"
    print(format_record(event="metric", task="node-classification-on-ids",
                        name=name, value=metric), file=out)
    return 0


def cmd_eval_link(settings, out) -> int:
    seed = rngmod.default_seed(_get(settings, "seed", None, int))
    settings["seed"] = seed
    tbl = modelio.read_ids(_get(settings, "ids"))
    g = _load_data(settings)
    edges = split_edges(g, _ratios(_get(settings, "edge_ratios"), (0.85, 0.05, 0.10)),
                        _get(settings, "negatives", 1, int), seed)
    _echo_config(settings, out)
    head_cfg = _head_config(settings, seed)
    _, hits = ds.train_link_head(tbl, edges, head_cfg)
    print(format_record(event="metric", task="link-prediction-on-ids",
                        name=f"test_hits@{head_cfg.hits_k}", value=hits), file=out)
    return 0


def cmd_eval_graph(settings, out) -> int:
    seed = rngmod.default_seed(_get(settings, "seed", None, int))
    settings["seed"] = seed
    ids_dir = Path(_get(settings, "ids_dir"))
    labels_file = _get(settings, "labels")
    if not labels_file:
        raise CliError("eval-graph needs labels=<file> with '<name> <label>' lines")
    names, labels = [], []
    with open(labels_file, "r", encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if raw:
                name, lab = raw.split()
                names.append(name)
                labels.append(int(lab))
    tables = [modelio.read_ids(ids_dir / (Path(n).stem + ".nid")) for n in names]
    _echo_config(settings, out)
    head_cfg = _head_config(settings, seed)
    _, acc = ds.train_graph_head(tables, np.array(labels), head_cfg,
                                 readout=_get(settings, "readout", "mean"))
    print(format_record(event="metric", task="graph-classification-on-ids",
                        name="test_accuracy", value=acc), file=out)
    return 0


def cmd_cluster(settings, out) -> int:
    seed = rngmod.default_seed(_get(settings, "seed", None, int))
    settings["seed"] = seed
    tbl = modelio.read_ids(_get(settings, "ids"))
    g = _load_data(settings)
    if g.labels is None:
        raise CliError("clustering metrics need a labeled graph")
    k = _get(settings, "k", None, int)
    if k is None:
        k = int(g.num_classes or len(np.unique(g.labels[g.labels >= 0])))
    _echo_config(settings, out)
    emb = ds.IdEmbedder.create(tbl)
    res = ds.cluster_ids(tbl, emb, k, g.labels, seed)
    print(format_record(event="metric", task="clustering", name="nmi", value=res.nmi), file=out)
    print(format_record(event="metric", task="clustering", name="pairwise_f1",
                        value=res.pairwise_f1), file=out)
    print(format_record(event="metric", task="clustering", name="matched_f1",
                        value=res.matched_f1), file=out)
    return 0


def cmd_retrieve(settings, out) -> int:
    tbl = modelio.read_ids(_get(settings, "ids"))
    query = _get(settings, "query", None, int)
    if query is None:
        raise CliError("missing required setting: query (node index)")
    top = _get(settings, "top", 5, int)
    _echo_config(settings, out)
    dists = ds.hamming_distances(tbl, query)
    neighbors = ds.hamming_retrieve(tbl, query, top)
    for rank, node in enumerate(neighbors, start=1):
        print(format_record(event="neighbor", query=query, rank=rank,
                            node=int(node), hamming=int(dists[node])), file=out)
    return 0


def bench_inference(model: modelio.LoadedModel, id_path: str, head: Mlp,
                    g, repeats: int = 50, ref_dim: int = 256) -> dict:
    """Median latency of the full encoder forward vs the ID-table path.

    The ID path excludes file loading: it embeds the in-memory table one-hot
    and runs the downstream MLP.  Byte accounting is exact from the formats.
    """
    if repeats < 20:
        raise CliError(f"repeats must be >= 20 for a stable median, got {repeats}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        import contextlib
        threadpool_limits = lambda limits: contextlib.nullcontext()

    tbl = modelio.read_ids(id_path)
    prop = build_propagation(model.encoder.kind, g)
    x = tensor(g.features)
    emb = ds.IdEmbedder.create(tbl)

    def gnn_forward():
        tape = Tape()
        hs = encode_all_layers(tape, model.encoder, prop, x, training=False)
        if model.head is not None:
            model.head.forward(tape, hs[-1])

    def id_forward():
        tape = Tape()
        head.forward(tape, ds.embed_ids(tape, tbl, emb))

    def median_time(fn):
        fn()  # warm caches
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    with threadpool_limits(limits=1):
        gnn_s = median_time(gnn_forward)
        id_s = median_time(id_forward)

    id_bytes = modelio.id_payload_bytes(tbl.num_nodes, tbl.width, tbl.k)
    return {
        "gnn_latency_ms": gnn_s * 1e3,
        "id_latency_ms": id_s * 1e3,
        "speedup": gnn_s / id_s if id_s > 0 else float("inf"),
        "id_bytes": id_bytes,
        "id_file_bytes": os.stat(id_path).st_size,
        "embedding_bytes": tbl.num_nodes * ref_dim * 4,
    }


def cmd_bench(settings, out) -> int:
    seed = rngmod.default_seed(_get(settings, "seed", None, int))
    settings["seed"] = seed
    model = modelio.read_model(_get(settings, "model"))
    g = _load_data(settings)
    id_path = _get(settings, "ids")
    tbl = modelio.read_ids(id_path)
    _echo_config(settings, out)
    head_cfg = _head_config(settings, seed)
    emb = ds.IdEmbedder.create(tbl)
    num_classes = int(g.num_classes or 2)
    head = Mlp.create([emb.output_width, *head_cfg.hidden, num_classes],
                      dropout_p=head_cfg.dropout_p, seed=seed, stream_offset=2)
    stats = bench_inference(model, id_path, head, g,
                            repeats=_get(settings, "repeats", 50, int),
                            ref_dim=_get(settings, "ref_dim", 256, int))
    print(format_record(event="bench", **{k: v for k, v in stats.items()}), file=out)
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="flat key=value settings file")
    p.add_argument("--seed", type=int, dest="seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nodeid",
                                     description="Compact discrete node IDs for graphs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train encoder + codebooks")
    _add_common(p)
    p.add_argument("--data", dest="data")
    p.add_argument("--graph-format", dest="graph_format", choices=["ngf-text", "csv-triple"])
    p.add_argument("--labels", dest="labels")
    p.add_argument("--model", dest="model")
    p.add_argument("--objective", dest="objective",
                   choices=["supervised-node", "supervised-link", "supervised-graph", "mae"])
    p.add_argument("--encoder", dest="encoder", choices=["gcn", "sage"])
    p.add_argument("--L", dest="L", type=int)
    p.add_argument("--hidden", dest="hidden", type=int)
    p.add_argument("--M", dest="M", type=int)
    p.add_argument("--K", dest="K", type=int)
    p.add_argument("--beta", dest="beta", type=float)
    p.add_argument("--lr", dest="lr", type=float)
    p.add_argument("--epochs", dest="epochs", type=int)
    p.add_argument("--dropout", dest="dropout", type=float)
    p.add_argument("--vq-mode", dest="vq_mode", choices=["ema", "codebook-loss"])
    p.add_argument("--metric", dest="metric", choices=["cosine", "l2"])
    p.add_argument("--gamma", dest="gamma", type=float)
    p.add_argument("--mask-rate", dest="mask_rate", type=float)
    p.add_argument("--ratios", dest="ratios")
    p.add_argument("--edge-ratios", dest="edge_ratios")
    p.add_argument("--warmup", dest="warmup", type=int)
    p.add_argument("--patience", dest="patience", type=int)
    p.add_argument("--negatives", dest="negatives", type=int)
    p.add_argument("--hits-k", dest="hits_k", type=int)
    p.add_argument("--allow-any-k", dest="allow_any_k", action="store_const", const=True)

    p = sub.add_parser("export-ids", help="write the ID file for a graph")
    _add_common(p)
    p.add_argument("--model", dest="model")
    p.add_argument("--data", dest="data")
    p.add_argument("--graph-format", dest="graph_format")
    p.add_argument("--labels", dest="labels")
    p.add_argument("--out", dest="out")

    p = sub.add_parser("eval-node", help="train/evaluate the node head on IDs")
    _add_common(p)
    p.add_argument("--ids", dest="ids")
    p.add_argument("--data", dest="data")
    p.add_argument("--graph-format", dest="graph_format")
    p.add_argument("--ratios", dest="ratios")
    p.add_argument("--head-hidden", dest="head_hidden")
    p.add_argument("--head-lr", dest="head_lr", type=float)
    p.add_argument("--head-epochs", dest="head_epochs", type=int)
    p.add_argument("--head-patience", dest="head_patience", type=int)
    p.add_argument("--head-metric", dest="head_metric", choices=["accuracy", "auc"])

    p = sub.add_parser("eval-link", help="train/evaluate the link head on IDs")
    _add_common(p)
    p.add_argument("--ids", dest="ids")
    p.add_argument("--data", dest="data")
    p.add_argument("--graph-format", dest="graph_format")
    p.add_argument("--edge-ratios", dest="edge_ratios")
    p.add_argument("--negatives", dest="negatives", type=int)
    p.add_argument("--hits-k", dest="hits_k", type=int)
    p.add_argument("--head-hidden", dest="head_hidden")
    p.add_argument("--head-epochs", dest="head_epochs", type=int)

    p = sub.add_parser("eval-graph", help="train/evaluate the graph head on ID tables")
    _add_common(p)
    p.add_argument("--ids-dir", dest="ids_dir")
    p.add_argument("--labels", dest="labels")
    p.add_argument("--readout", dest="readout", choices=["mean", "sum", "max"])
    p.add_argument("--head-hidden", dest="head_hidden")
    p.add_argument("--head-epochs", dest="head_epochs", type=int)

    p = sub.add_parser("cluster", help="k-means over IDs with agreement metrics")
    _add_common(p)
    p.add_argument("--ids", dest="ids")
    p.add_argument("--data", dest="data")
    p.add_argument("--graph-format", dest="graph_format")
    p.add_argument("--k", dest="k", type=int)

    p = sub.add_parser("retrieve", help="nearest nodes by ID Hamming distance")
    _add_common(p)
    p.add_argument("--ids", dest="ids")
    p.add_argument("--query", dest="query", type=int)
    p.add_argument("--top", dest="top", type=int)

    p = sub.add_parser("bench", help="latency and storage comparison")
    _add_common(p)
    p.add_argument("--model", dest="model")
    p.add_argument("--ids", dest="ids")
    p.add_argument("--data", dest="data")
    p.add_argument("--graph-format", dest="graph_format")
    p.add_argument("--repeats", dest="repeats", type=int)
    p.add_argument("--ref-dim", dest="ref_dim", type=int)
    p.add_argument("--head-hidden", dest="head_hidden")

    return parser


COMMANDS = {
    "train": cmd_train,
    "export-ids": cmd_export_ids,
    "eval-node": cmd_eval_node,
    "eval-link": cmd_eval_link,
    "eval-graph": cmd_eval_graph,
    "cluster": cmd_cluster,
    "retrieve": cmd_retrieve,
    "bench": cmd_bench,
}


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = _resolve(args)
        return COMMANDS[args.command](settings, out)
    except Exception as exc:  # one-line machine-parseable error record
        message = str(exc).replace('"', "'")
        print(f'event=error message="{message}"', file=out)
        return 1


if __name__ == "__main__":
    sys.exit(main())
