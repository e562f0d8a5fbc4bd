"""Command-line entry point: ``mccf <command> [options]``.

Every command prints its result to stdout and writes its artifacts under
``--out-dir``.  Failures print one ``error: <kind>: <message>`` line to
stderr and exit with status 1 (2 for usage errors).
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, RunConfig, check_axis, dump_config, load_config
from .evaluator import evaluate, export_attention
from .gradcheck import gradcheck
from .graph import (BipartiteGraph, load_ratings, read_graph, write_graph, write_id_map)
from .model import MCCF
from .synthgen import generate, read_labels, write_labels
from .trainer import write_history


class CommandError(RuntimeError):
    pass


def _parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--deterministic", action="store_true",
                   help="pin BLAS to one thread so repeated runs are bit-identical")
    p.add_argument("--out-dir", help="artifact directory (overrides the config)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _parent()
    ap = argparse.ArgumentParser(prog="mccf", description="Multi-component graph collaborative filtering")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="parse a ratings file into a graph snapshot")
    p.add_argument("--input", help="delimited ratings file (default: data.ratings)")
    p.add_argument("--delimiter", help="field delimiter (default: tab)")
    p.add_argument("--max-rating", type=int)

    p = sub.add_parser("split", parents=[common], help="seeded train/test split of a graph snapshot")
    p.add_argument("--graph", help="graph snapshot (default: the configured data source)")
    p.add_argument("--train-frac", type=float)

    p = sub.add_parser("train", parents=[common], help="train, save a snapshot, report test metrics")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="score a saved model on test edges")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True, help="graph snapshot the model was trained on")
    p.add_argument("--test", required=True, help="graph snapshot of the test edges")

    p = sub.add_parser("sweep", parents=[common], help="train/evaluate across one hyperparameter")
    p.add_argument("--axis", required=True, choices=("components", "dim"))
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 1,2,3")
    p.add_argument("--any-values", action="store_true",
                   help="allow values outside the standard grids")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic multi-class graph")
    p.add_argument("--rating-rule", choices=("component-signal", "constant-1"))

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--seeds", type=int, default=1, help="check seeds seed .. seed+N-1")
    p.add_argument("--components", type=int, default=2)

    p = sub.add_parser("export-attention", parents=[common], help="dump node/component attention")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True, help="graph snapshot the model was trained on")
    p.add_argument("--target", default="all", help="user id, or 'all' for the highest-degree user")
    p.add_argument("--labels", help="item label file to attach")
    return ap


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {p}")
    return p


def cmd_ingest(args, cfg: RunConfig) -> int:
    src = args.input or cfg.data.ratings
    if src is None:
        raise CommandError("ingest needs --input or data.ratings")
    delim = args.delimiter if args.delimiter is not None else cfg.data.delimiter
    graph, id_map = load_ratings(_need_file(src), delim, args.max_rating or cfg.data.max_rating)
    out = _out_dir(cfg)
    write_graph(graph, out / "graph.txt")
    write_id_map(id_map, out / "idmap.txt")
    print(f"users={graph.n_users} items={graph.n_items} edges={graph.n_edges} "
          f"max_rating={graph.max_rating}")
    return 0


def _write_split(out: Path, train: BipartiteGraph, test_edges) -> None:
    write_graph(train, out / "train.txt")
    test = BipartiteGraph.from_edges(test_edges, train.n_users, train.n_items, train.max_rating)
    write_graph(test, out / "test.txt")


def cmd_split(args, cfg: RunConfig) -> int:
    if args.train_frac is not None:
        cfg.data.train_frac = args.train_frac
    graph = read_graph(_need_file(args.graph)) if args.graph else pipeline.load_dataset(cfg).graph
    train, test_edges = pipeline.split(cfg, graph)
    out = _out_dir(cfg)
    _write_split(out, train, test_edges)
    print(f"train={train.n_edges} test={len(test_edges)}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    out = _out_dir(cfg)
    res = pipeline.run(cfg)
    res.result.model.save(out / "model.npz")
    write_history(res.result.history, out / "history.csv")
    # train.txt is the graph the model conditions on, so `evaluate` reproduces the report
    _write_split(out, res.result.fit_graph, res.test_edges)
    if res.labels is not None:
        write_labels(res.labels, out / "labels.txt")
    dump_config(cfg, out / "config.yaml")
    (out / "report.txt").write_text(res.report.as_block() + "\n")
    print(res.report.as_line())
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    model = MCCF.load(_need_file(args.model))
    train = read_graph(_need_file(args.train))
    test = read_graph(_need_file(args.test))
    if (test.n_users, test.n_items) != (train.n_users, train.n_items):
        raise CommandError("train and test snapshots disagree on the number of users/items")
    report = evaluate(model, train, test.edges)
    print(report.as_line())
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    values = check_axis(args.axis, args.values.split(","), strict=not args.any_values)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    out = _out_dir(cfg)
    rows = pipeline.sweep(cfg, args.axis, values)
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "rmse", "mae"])
        for v, rep in rows:
            w.writerow([v, repr(rep.rmse), repr(rep.mae)])
    for v, rep in rows:
        print(f"{args.axis}={v},rmse={rep.rmse:.6f},mae={rep.mae:.6f}")
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    if args.rating_rule is not None:
        cfg.synth.rating_rule = args.rating_rule
    graph, labels = generate(cfg.synth)
    out = _out_dir(cfg)
    write_graph(graph, out / "graph.txt")
    write_labels(labels, out / "labels.txt")
    print(f"users={graph.n_users} items={graph.n_items} edges={graph.n_edges}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else 0
    failing = []
    for s in range(seed, seed + max(1, args.seeds)):
        rep = gradcheck(s, n_components=args.components)
        for line in rep.lines():
            print(f"seed={s}\t{line}")
        failing += [f"{name}@seed{s}" for name in rep.failing]
    if failing:
        raise CommandError(f"gradient mismatch in {', '.join(failing)}")
    print("gradcheck passed")
    return 0


def cmd_export_attention(args, cfg: RunConfig) -> int:
    model = MCCF.load(_need_file(args.model))
    graph = read_graph(_need_file(args.graph))
    labels = read_labels(_need_file(args.labels)) if args.labels else None
    target = "all items" if args.target == "all" else int(args.target)
    dump = export_attention(model, graph, target, labels)
    out = _out_dir(cfg)
    dump.write_csv(out / "attention.csv")
    print(f"rows={len(dump.rows)} components={dump.n_components}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest, "split": cmd_split, "train": cmd_train, "evaluate": cmd_evaluate,
    "sweep": cmd_sweep, "synth": cmd_synth, "gradcheck": cmd_gradcheck,
    "export-attention": cmd_export_attention,
}


def _single_thread():
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = _run_config(args)
        with _single_thread() if args.deterministic else nullcontext():
            return COMMANDS[args.command](args, cfg)
    except (CommandError, ConfigError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
