"""Command-line surface: sample architectures, train, evaluate, report.

Every command validates its configuration fully before any side effect,
writes files atomically (temp + rename), and is deterministic under a fixed
seed. Exit codes: 0 success, 2 configuration error, 3 runtime or numerical
error. Report-producing commands render matplotlib figures next to the
CSV/JSON outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import plots
from .config import RunConfig, load_run_config
from .data import load_cifar10, synthetic_dataset
from .errors import CheckpointError, ConfigError, GhnqError
from .evaluation import (evaluate, layerwise_distribution_stats,
                         parse_precision, per_network_robustness)
from .forward import validate_params
from .graphs import (canonical_hash, compute_virtual_edges, count_params,
                     deserialize_graph, make_splits, sample_architecture,
                     serialize_graph)
from .hypernet import Hypernet, load_checkpoint, predict, save_checkpoint
from .tensor import no_grad
from .training import finetune, make_optimizer
from .quant import QuantError

CHECKPOINT_NAME = "checkpoint.ghnq"
LOSS_CSV_NAME = "loss_history.csv"


def _atomic_write(path: str, payload: str | bytes) -> None:
    mode = "wb" if isinstance(payload, bytes) else "w"
    tmp = path + ".tmp"
    with open(tmp, mode) as f:
        f.write(payload)
    os.replace(tmp, path)


def _ensure_writable_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".ghnq-write-probe")
        with open(probe, "w") as f:
            f.write("")
        os.remove(probe)
    except OSError as exc:
        raise ConfigError(f"output directory '{path}' is not writable: {exc}") from exc


def _build_datasets(cfg: RunConfig):
    if cfg.data.source == "cifar10":
        return load_cifar10(cfg.paths.data_dir, cfg.data.num_train,
                            cfg.data.num_test)
    return synthetic_dataset(cfg.data.num_train, cfg.data.num_test,
                             resolution=cfg.space.input_resolution,
                             num_classes=cfg.space.num_classes,
                             seed=cfg.data_seed, noise=cfg.data.noise)


def _history_csv(history: list[dict]) -> str:
    lines = ["epoch,mean_loss,lr"]
    for row in history:
        lines.append(f"{row['epoch']},{row['loss']:.6f},{row['lr']:.6g}")
    return "\n".join(lines) + "\n"


def _detail_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


# -- commands -----------------------------------------------------------------


def cmd_sample(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed)
    out_dir = args.out or cfg.paths.graph_dir
    _ensure_writable_dir(out_dir)
    graphs = []
    for i in range(args.count):
        g = sample_architecture(cfg.space, i)
        graphs.append(compute_virtual_edges(g, cfg.hypernet.s_max))
    entries = []
    for i, g in enumerate(graphs):
        name = f"graph_{i:05d}.txt"
        _atomic_write(os.path.join(out_dir, name), serialize_graph(g))
        entries.append({"file": name, "hash": canonical_hash(g),
                        "num_params": count_params(g), "draw_index": i})
    manifest = {"seed": cfg.seed, "count": args.count,
                "max_params": cfg.space.max_params, "graphs": entries}
    _atomic_write(os.path.join(out_dir, "manifest.json"), _detail_json(manifest))
    print(f"wrote {args.count} graphs and manifest.json to {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed)
    out_dir = args.out or cfg.paths.checkpoint_dir
    _ensure_writable_dir(out_dir)
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
    train_data, _ = _build_datasets(cfg)

    start_epoch = 0
    history: list[dict] = []
    if os.path.exists(ckpt_path):
        h, extras, meta = load_checkpoint(ckpt_path)
        if h.cfg != cfg.hypernet:
            raise CheckpointError(
                f"checkpoint at '{ckpt_path}' was trained with a different "
                f"hypernet configuration; remove it or fix the config")
        optimizer = make_optimizer(h, cfg.train)
        optimizer.load_state_tensors(extras)
        start_epoch = int(meta.get("epoch", 0))
        history = list(meta.get("history", []))
        print(f"resuming from epoch {start_epoch}")
    else:
        h = Hypernet.initialize(cfg.hypernet, seed=cfg.hypernet_seed)
        optimizer = make_optimizer(h, cfg.train)

    def on_epoch(epoch, opt, hist):
        save_checkpoint(ckpt_path, h, extras=opt.state_tensors(),
                        meta={"epoch": epoch, "history": hist,
                              "seed": cfg.seed})
        _atomic_write(os.path.join(out_dir, LOSS_CSV_NAME), _history_csv(hist))

    if start_epoch >= cfg.train.epochs:
        print(f"checkpoint already at epoch {start_epoch}; nothing to do")
        _atomic_write(os.path.join(out_dir, LOSS_CSV_NAME), _history_csv(history))
        return 0

    history, optimizer = finetune(
        h, cfg.train, cfg.space, train_data, start_epoch=start_epoch,
        optimizer=optimizer, history=history, epoch_callback=on_epoch)
    plots.save_loss_curve(history, os.path.join(out_dir, "loss_curve.png"))
    print(f"trained to epoch {history[-1]['epoch']}; "
          f"final mean loss {history[-1]['loss']:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed,
                          jobs_override=args.jobs)
    out_dir = args.out or cfg.paths.report_dir
    _ensure_writable_dir(out_dir)
    ckpt_path = args.checkpoint or os.path.join(cfg.paths.checkpoint_dir,
                                                CHECKPOINT_NAME)
    h, _, _ = load_checkpoint(ckpt_path)

    sizes = cfg.eval.split_sizes()
    if args.splits:
        wanted = [s.strip() for s in args.splits.split(",") if s.strip()]
        unknown = [s for s in wanted if s not in sizes]
        if unknown:
            raise ConfigError(f"unknown or unsized splits requested: {unknown}")
        sizes = {k: sizes[k] for k in wanted}
    precisions = (tuple(p.strip() for p in args.precisions.split(","))
                  if args.precisions else cfg.eval.precisions)
    for token in precisions:
        parse_precision(token)  # fail fast on typos

    _, test_data = _build_datasets(cfg)
    splits = make_splits(cfg.space, sizes,
                         deep_depth_range=cfg.eval.deep_range(),
                         wide_width_range=cfg.eval.wide_range())
    report = evaluate(h, splits, test_data, precisions=precisions,
                      test_batch_size=cfg.eval.test_batch_size,
                      jobs=cfg.jobs, eps_fold=cfg.eps_fold)
    _atomic_write(os.path.join(out_dir, "report.csv"), report.to_csv_text())
    _atomic_write(os.path.join(out_dir, "report_detail.json"),
                  _detail_json(report.to_detail_dict()))
    plots.save_eval_chart(report, os.path.join(out_dir, "eval_accuracy.png"))
    print(report.format_table())
    print(f"report files in {out_dir}")
    return 0


def cmd_quantreport(args) -> int:
    cfg = load_run_config(args.config, seed_override=args.seed)
    out_dir = args.out or cfg.paths.report_dir
    _ensure_writable_dir(out_dir)
    ckpt_path = args.checkpoint or os.path.join(cfg.paths.checkpoint_dir,
                                                CHECKPOINT_NAME)
    h, _, _ = load_checkpoint(ckpt_path)
    try:
        with open(args.graph) as f:
            g = deserialize_graph(f.read())
    except OSError as exc:
        raise ConfigError(f"cannot read graph file '{args.graph}': {exc}") from exc
    if g.virtual_edges is None:
        g = compute_virtual_edges(g, h.cfg.s_max)
    precisions = (tuple(p.strip() for p in args.precisions.split(","))
                  if args.precisions else cfg.eval.precisions)
    _, test_data = _build_datasets(cfg)

    per_precision = {}
    for token in precisions:
        qc = parse_precision(token, eps_fold=cfg.eps_fold)
        result = per_network_robustness(h, g, test_data, qc,
                                        test_batch_size=cfg.eval.test_batch_size)
        result["per_layer_mse"] = {str(k): v
                                   for k, v in result["per_layer_mse"].items()}
        per_precision[token] = result
    with no_grad():
        params = predict(h, g)
    validate_params(g, params)
    stats = layerwise_distribution_stats(params)

    digest = canonical_hash(g)[:12]
    payload = {
        "graph_file": os.path.basename(args.graph),
        "graph_hash": canonical_hash(g),
        "num_params": count_params(g),
        "precisions": per_precision,
        "distribution_stats": {str(k): v for k, v in stats.items()},
    }
    json_path = os.path.join(out_dir, f"quantreport_{digest}.json")
    _atomic_write(json_path, _detail_json(payload))
    plots.save_distribution_grid(
        params, stats, os.path.join(out_dir, f"quantreport_{digest}_dist.png"))
    plots.save_robustness_chart(
        per_precision, os.path.join(out_dir, f"quantreport_{digest}_robust.png"))
    for token, result in per_precision.items():
        print(f"{token}: accuracy {result['accuracy_quant']:.2f}% "
              f"(delta {result['accuracy_delta']:+.2f}pp, "
              f"output_mse {result['output_mse']:.3e})")
    print(f"report: {json_path}")
    return 0


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ghnq",
        description="Predict CNN parameters with a graph hypernetwork and "
                    "measure robustness under simulated quantization.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=False, precisions=False, checkpoint=False):
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the [run] seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if jobs:
            p.add_argument("--jobs", type=int, default=None,
                           help="worker processes for per-network evaluation")
        if precisions:
            p.add_argument("--precisions", default=None,
                           help="comma list: float32, quant8, ..., quant2")
        if checkpoint:
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint path (default: <checkpoint_dir>/"
                                f"{CHECKPOINT_NAME})")

    p_sample = sub.add_parser("sample", help="sample architecture graphs to files")
    common(p_sample)
    p_sample.add_argument("--count", type=int, default=10,
                          help="number of graphs to draw")
    p_sample.set_defaults(func=cmd_sample)

    p_train = sub.add_parser("train", help="finetune the hypernetwork")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate splits at several precisions")
    common(p_eval, jobs=True, precisions=True, checkpoint=True)
    p_eval.add_argument("--splits", default=None,
                        help="comma list among iid,deep,wide,bnfree")
    p_eval.set_defaults(func=cmd_eval)

    p_qr = sub.add_parser("quantreport",
                          help="per-network robustness report for one graph")
    common(p_qr, precisions=True, checkpoint=True)
    p_qr.add_argument("--graph", required=True, help="graph file to analyse")
    p_qr.set_defaults(func=cmd_quantreport)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except QuantError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except GhnqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
