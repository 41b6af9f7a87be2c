"""Command-line surface: ingest, sbm, train, eval, dpp-demo.

Config precedence is CLI flag > config file > preset > profile default;
the effective sources are reported at startup. Presets map one-to-one
onto the ablation variants (see ``train --help``).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

import numpy as np

from . import dpp, pipeline
from ._kernels import BACKEND
from .encoder import load_checkpoint, save_checkpoint
from .graphs import (SPLIT_NAMES, BundleError, Graph, SbmParams,
                     generate_sbm, load_citation_bundle, write_bundle)

PRESETS = {
    "full": dict(filter_on=True, dpp_mode="greedy", weights_on=True),
    "wo-all": dict(filter_on=False, dpp_mode="off", weights_on=False),
    "with-alpha": dict(filter_on=True, dpp_mode="off", weights_on=False),
    "with-dpp": dict(filter_on=False, dpp_mode="greedy", weights_on=False),
    "with-w": dict(filter_on=False, dpp_mode="off", weights_on=True),
}

PRESET_HELP = (
    "ablation presets: full = every component on; wo-all = plain node-wise "
    "contrast (no filter, no DPP, unit weights); with-alpha = soft-margin "
    "filter only; with-dpp = DPP sampling only; with-w = negative weights only"
)

_CONFIG_FIELDS = {f.name: f for f in fields(pipeline.TrainConfig)}


def _parse_config_value(name: str, text: str):
    defaults = pipeline.TrainConfig()
    current = getattr(defaults, name)
    if name == "mixup_count":
        return None if text.lower() in ("none", "auto") else int(text)
    if isinstance(current, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def read_config_file(path) -> dict:
    """Flat key=value file mirroring TrainConfig; unknown keys rejected."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise BundleError(f"{path}:{lineno}: expected key = value")
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _CONFIG_FIELDS:
                raise BundleError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                out[key] = _parse_config_value(key, value)
            except ValueError as exc:
                raise BundleError(f"{path}:{lineno}: {key}: {exc}") from None
    return out


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides (beat file and preset)")
    for name, f in _CONFIG_FIELDS.items():
        flag = "--" + name.replace("_", "-")
        group.add_argument(flag, dest=f"cfg_{name}", default=None, type=str,
                           metavar="V", help=argparse.SUPPRESS)
    group.description = ("any TrainConfig field as --field-name VALUE, e.g. "
                         "--batch-size 256 --dpp-mode exact --tau 0.5; "
                         "fields: " + ", ".join(sorted(_CONFIG_FIELDS)))


def build_config(args) -> pipeline.TrainConfig:
    """Resolve the effective TrainConfig and report value provenance."""
    profile = getattr(args, "profile", "desk")
    values = {}
    source = {}
    if profile == "desk":
        values.update(epochs=300, probe_runs=10)
        for k in values:
            source[k] = "desk profile"
    if getattr(args, "preset", None):
        for k, v in PRESETS[args.preset].items():
            values[k] = v
            source[k] = f"preset {args.preset}"
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            values[k] = v
            source[k] = "config file"
    for name in _CONFIG_FIELDS:
        raw = getattr(args, f"cfg_{name}", None)
        if raw is not None:
            values[name] = _parse_config_value(name, raw)
            source[name] = "command line"
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
        source["seed"] = "command line"
    config = pipeline.TrainConfig(**values)
    print(f"# kernel backend: {BACKEND}")
    for name in sorted(_CONFIG_FIELDS):
        where = source.get(name, "default")
        print(f"# config {name} = {getattr(config, name)} ({where})")
    return config


# ---------------------------------------------------------------------------
# subcommands

def cmd_ingest(args) -> int:
    """Validate/normalize a bundle; compacts non-contiguous node ids."""
    in_dir, out_dir = args.input, args.out
    feat_path = os.path.join(in_dir, "features.tsv")
    ids, rows = [], []
    from .graphs import _parse_rows  # lenient pass shares the row reader

    width = None
    for lineno, f in _parse_rows(feat_path):
        node = int(f[0])
        if width is None:
            width = len(f) - 1
        elif len(f) - 1 != width:
            raise BundleError(f"{feat_path}:{lineno}: ragged feature row")
        if node in set(ids):
            raise BundleError(f"{feat_path}:{lineno}: duplicate node id {node}")
        ids.append(node)
        rows.append([float(x) for x in f[1:]])
    order = np.argsort(ids, kind="stable")
    old_ids = np.asarray(ids, dtype=np.int64)[order]
    remap = {int(old): new for new, old in enumerate(old_ids)}
    features = np.asarray(rows)[order]
    n = old_ids.shape[0]

    def mapped(path, lineno, raw):
        if raw not in remap:
            raise BundleError(f"{path}:{lineno}: unknown node id {raw}")
        return remap[raw]

    edge_path = os.path.join(in_dir, "edges.tsv")
    pairs = set()
    if os.path.exists(edge_path):
        for lineno, f in _parse_rows(edge_path, n_fields=2):
            u = mapped(edge_path, lineno, int(f[0]))
            v = mapped(edge_path, lineno, int(f[1]))
            if u != v:
                pairs.add((min(u, v), max(u, v)))
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    if edges.shape[0] == 0:
        print("warning: bundle has no edges", file=sys.stderr)

    label_path = os.path.join(in_dir, "labels.tsv")
    labels = np.full(n, -1, dtype=np.int64)
    for lineno, f in _parse_rows(label_path, n_fields=2):
        labels[mapped(label_path, lineno, int(f[0]))] = int(f[1])
    if np.any(labels < 0):
        raise BundleError(f"{label_path}: missing labels for "
                          f"{int(np.sum(labels < 0))} nodes")

    split_path = os.path.join(in_dir, "splits.tsv")
    splits = {name: [] for name in SPLIT_NAMES}
    if os.path.exists(split_path):
        for lineno, f in _parse_rows(split_path, n_fields=2):
            if f[1] not in SPLIT_NAMES:
                raise BundleError(f"{split_path}:{lineno}: unknown split {f[1]!r}")
            splits[f[1]].append(mapped(split_path, lineno, int(f[0])))

    graph = Graph(n, edges, features, labels, splits)
    write_bundle(graph, out_dir)
    if np.any(old_ids != np.arange(n)):
        with open(os.path.join(out_dir, "id_mapping.tsv"), "w",
                  encoding="utf-8") as fh:
            fh.write("original\tcompact\n")
            for old in old_ids:
                fh.write(f"{old}\t{remap[int(old)]}\n")
        print(f"remapped {n} node ids; mapping written", file=sys.stderr)
    print(f"nodes={graph.num_nodes} edges={graph.num_edges} "
          f"classes={graph.num_classes}")
    return 0


def cmd_sbm(args) -> int:
    sizes = tuple(int(s) for s in args.blocks.split(","))
    params = SbmParams(block_sizes=sizes, p_in=args.p_in, p_out=args.p_out,
                       feature_dim=args.feature_dim,
                       feature_separation=args.separation)
    graph = generate_sbm(params, args.seed)
    write_bundle(graph, args.out)
    print(f"nodes={graph.num_nodes} edges={graph.num_edges} "
          f"classes={graph.num_classes}")
    return 0


def cmd_train(args) -> int:
    graph = load_citation_bundle(args.data)
    config = build_config(args)
    os.makedirs(args.out, exist_ok=True)
    transfer_log = [] if args.transfer_log else None
    checkpoint, report = pipeline.train(graph, config, transfer_log=transfer_log)

    save_checkpoint(os.path.join(args.out, "checkpoint.npz"),
                    checkpoint.params, checkpoint.adam, checkpoint.config_hash)
    pipeline.write_metrics(report, os.path.join(args.out, "metrics.tsv"))
    pipeline.write_summary(report, os.path.join(args.out, "summary.txt"))
    if args.transfer_log:
        with open(args.transfer_log, "w", encoding="utf-8") as fh:
            fh.write("anchor\tnode\tp_plus\tp_minus\tratio\n")
            for a, j, pp, pm, rr in transfer_log:
                fh.write(f"{a}\t{j}\t{pp:.6g}\t{pm:.6g}\t{rr:.6g}\n")
    if args.export:
        emb = pipeline.compute_eval_embeddings(
            checkpoint.params, graph, config,
            pipeline._stream(config.seed, pipeline._EVAL))
        pipeline.export_embeddings(emb, graph.labels,
                                   os.path.join(args.out, "embeddings.tsv"))
    print(f"epochs_run={report.stopped_epoch} best_epoch={report.best_epoch} "
          f"test_acc={report.test_mean:.4f}±{report.test_std:.4f} "
          f"wall={report.wall_clock_sec:.1f}s")
    return 0


def cmd_eval(args) -> int:
    graph = load_citation_bundle(args.data)
    params, _, config_hash = load_checkpoint(args.checkpoint)
    if params.dims[0] != graph.num_features:
        print(f"error: checkpoint expects {params.dims[0]} input features, "
              f"bundle has {graph.num_features}", file=sys.stderr)
        return 1
    config = build_config(args)
    rng = pipeline._stream(config.seed, pipeline._EVAL)
    emb = pipeline.compute_eval_embeddings(params, graph, config, rng)
    mean, std = pipeline.linear_evaluate(
        emb, graph.labels, graph.splits, args.runs,
        pipeline._stream(config.seed, pipeline._FINAL_PROBE),
        steps=config.probe_steps, lr=config.probe_lr, l2=config.probe_l2)
    if args.export:
        pipeline.export_embeddings(emb, graph.labels, args.export)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("metric\tvalue\n")
            fh.write(f"test_acc_mean\t{mean:.6f}\n")
            fh.write(f"test_acc_std\t{std:.6f}\n")
            fh.write(f"runs\t{args.runs}\n")
            fh.write(f"config_hash\t{config_hash}\n")
    print(f"test_acc={mean:.4f}±{std:.4f} over {args.runs} runs")
    return 0


def cmd_dpp_demo(args) -> int:
    """Compare the exact sampler's empirical law against enumeration."""
    if args.pool_size > dpp.BRUTE_LIMIT:
        print(f"error: pool size must be <= {dpp.BRUTE_LIMIT} for the "
              "brute-force oracle", file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.seed)
    pool = rng.standard_normal((args.pool_size, args.embed_dim))
    kernel = dpp.build_kernel(pool)
    law = dpp.dpp_brute_probabilities(kernel)
    analytic = law.conditioned_on_size(args.m)

    lines = ["subset\tanalytic\tempirical"]
    if args.draws > 0:
        sampler = dpp.KdppSampler(kernel, args.m)
        draws = sampler.draw_many(args.draws, rng)
        counts = {}
        for row in draws:
            key = frozenset(int(i) for i in row)
            counts[key] = counts.get(key, 0) + 1
        tv = 0.0
        for subset, p in sorted(analytic.items(), key=lambda kv: sorted(kv[0])):
            emp = counts.get(subset, 0) / args.draws
            tv += abs(emp - p)
            name = ",".join(str(i) for i in sorted(subset))
            lines.append(f"{{{name}}}\t{p:.6f}\t{emp:.6f}")
        tv *= 0.5
        lines.append(f"tv_distance\t{tv:.6f}\t{args.draws} draws")
    else:
        for subset, p in sorted(analytic.items(), key=lambda kv: sorted(kv[0])):
            name = ",".join(str(i) for i in sorted(subset))
            lines.append(f"{{{name}}}\t{p:.6f}\t-")
    eigs = np.linalg.eigvalsh(kernel.L)
    lines.append("eigenvalues\t" + ",".join(f"{v:.4f}" for v in eigs) + "\t-")
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0


# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nodecontrast",
        description="unsupervised node embeddings via node-wise contrast "
                    "with filtered, diversity-sampled negatives")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and canonicalize a bundle")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("sbm", help="write a planted-partition bundle")
    p.add_argument("--blocks", required=True, help="comma list, e.g. 50,50")
    p.add_argument("--p-in", type=float, required=True)
    p.add_argument("--p-out", type=float, required=True)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sbm)

    p = sub.add_parser("train", help="train embeddings on a bundle",
                       epilog=PRESET_HELP)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help=PRESET_HELP)
    p.add_argument("--profile", choices=("desk", "full"), default="desk",
                   help="desk: 300 epochs / 10 probe runs; full: 2000 / 50")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--export", action="store_true",
                   help="also export embeddings + 2-D PCA projection")
    p.add_argument("--transfer-log", default=None,
                   help="TSV audit log of soft-margin transfers")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="probe a checkpoint on a bundle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="write metrics TSV here")
    p.add_argument("--export", default=None,
                   help="write embeddings TSV (+ PCA companion) here")
    p.add_argument("--profile", choices=("desk", "full"), default="desk")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dpp-demo",
                       help="exact subset law vs empirical k-DPP frequencies")
    p.add_argument("--pool-size", type=int, default=6)
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--draws", type=int, default=50000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embed-dim", type=int, default=8)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_dpp_demo)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (BundleError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
