"""Dataset loading, splitting and train-then-evaluate runs driven by a RunConfig."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .evaluator import EvalReport, evaluate
from .graph import BipartiteGraph, RatingEdge, load_ratings, read_graph, split_train_test
from .synthgen import generate
from .trainer import TrainResult, seed_streams, train

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    graph: BipartiteGraph
    labels: np.ndarray | None = None  # per-item class ids for synthetic data


@dataclass
class RunOutcome:
    result: TrainResult
    report: EvalReport
    train_graph: BipartiteGraph
    test_edges: list[RatingEdge]
    labels: np.ndarray | None
    seconds: float


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.synthetic:
        graph, labels = generate(cfg.synth)
        return Dataset(graph, labels)
    if d.graph is not None:
        return Dataset(read_graph(d.graph))
    if d.ratings is not None:
        path = Path(d.ratings)
        if not path.is_file():
            raise FileNotFoundError(f"ratings file not found: {path}")
        graph, _ = load_ratings(path, d.delimiter, d.max_rating)
        return Dataset(graph)
    raise ConfigError("no data source: set data.ratings, data.graph or data.synthetic")


def split(cfg: RunConfig, graph: BipartiteGraph) -> tuple[BipartiteGraph, list[RatingEdge]]:
    """Train/test split drawn from the run seed's dedicated split stream."""
    return split_train_test(graph, cfg.data.train_frac, seed_streams(cfg.seed)["test_split"])


def run(cfg: RunConfig, dataset: Dataset | None = None, callback=None) -> RunOutcome:
    """Load (unless given), split, train and evaluate on the held-out edges."""
    t0 = time.perf_counter()
    dataset = dataset or load_dataset(cfg)
    train_graph, test_edges = split(cfg, dataset.graph)
    result = train(train_graph, cfg.train, cfg.model, callback=callback)
    if not test_edges:
        raise ValueError("the split left no test edges")
    # score with the features the model was fit on (the validation holdout stays out of them)
    report = evaluate(result.model, result.fit_graph, test_edges, inputs=result.inputs)
    seconds = time.perf_counter() - t0
    logger.info("run done: %s (%.0fs)", report.as_line(), seconds)
    return RunOutcome(result, report, train_graph, test_edges, dataset.labels, seconds)


def sweep(cfg: RunConfig, axis: str, values, dataset: Dataset | None = None) -> list[tuple[int, EvalReport]]:
    """One run per value of ``axis`` ("components" or "dim"), same data, split and seed."""
    dataset = dataset or load_dataset(cfg)
    rows = []
    for v in values:
        key = "n_components" if axis == "components" else "dim"
        run_cfg = replace(cfg, model=replace(cfg.model, **{key: int(v)}))
        rows.append((int(v), run(run_cfg, dataset).report))
    return rows
