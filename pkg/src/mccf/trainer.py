"""Mini-batch training: half-MSE rating loss + lambda * expected-L0, optimized with Adam."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from .diffgraph import Tensor
from .graph import BipartiteGraph, RatingEdge, average_degrees, build_features, split_train_test
from .model import MCCF, GraphInputs, ModelConfig
from .sampler import eval_table, sample_table

logger = logging.getLogger(__name__)

BATCH_GRID = (64, 128, 256, 512)
LR_GRID = (0.0005, 0.001, 0.002, 0.0025)
DROPOUT_GRID = (0.1, 0.4, 0.5, 0.6)
HISTORY_COLUMNS = ("epoch", "train_loss", "val_rmse", "val_mae", "active_gate_fraction")
SEED_STREAMS = ("init", "val_split", "sample", "step", "test_split")


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for each random subsystem, all derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(SEED_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(SEED_STREAMS, children)}


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in {name}")
        self.name = name


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; ``model`` holds the last good parameters."""

    def __init__(self, epoch: int, model: MCCF, history: list[dict]):
        super().__init__(f"training diverged in epoch {epoch}")
        self.epoch = epoch
        self.model = model
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.001
    dropout_rate: float = 0.5
    l0_lambda: float = 1e-4
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 3  # 0 disables validation and early stopping
    val_frac: float = 0.1
    resample_each_epoch: bool = True
    exclude_target: bool = True  # hide each training edge from its own prediction

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 are required")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.l0_lambda < 0:
            raise ValueError("l0_lambda must be >= 0")
        if self.early_stop_patience < 0 or not 0.0 < self.val_frac < 1.0:
            raise ValueError("early_stop_patience >= 0 and 0 < val_frac < 1 are required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def rating_loss(predictions, targets) -> Tensor:
    """``1 / (2 |O|) * sum (r' - r)^2``."""
    predictions = predictions if isinstance(predictions, Tensor) else Tensor(predictions)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.size == 0 or predictions.shape != targets.shape:
        raise ValueError("predictions and targets must be non-empty and equally long")
    err = dg.sub(predictions, targets)
    return dg.scale(dg.sum(dg.mul(err, err)), 0.5 / predictions.size)


def total_loss(r_loss, penalty, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0 or penalty is None:
        return r_loss if isinstance(r_loss, Tensor) else Tensor(r_loss)
    return dg.add(r_loss, dg.scale(penalty, lam))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update from each tensor's ``.grad``, in place.

    Tensors without a gradient are treated as having a zero gradient.
    """
    for name, t in params.items():
        # a sum is non-finite whenever an entry is; confirm entry-wise before failing
        if t.grad is not None and not np.isfinite(np.sum(t.grad)) and not np.isfinite(t.grad).all():
            raise NonFiniteGradientError(name)
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, t in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        m, v, g = state.m[name], state.v[name], t.grad
        tmp = np.empty_like(m)
        m *= beta1
        v *= beta2
        if g is not None:
            np.multiply(g, 1.0 - beta1, out=tmp)
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - beta2
            v += tmp
        # step = lr/bc1 * m / (sqrt(v/bc2) + eps), built in the scratch buffer
        np.multiply(v, 1.0 / bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / bc1
        t.data -= tmp


@dataclass
class TrainResult:
    model: MCCF
    history: list[dict]
    best_epoch: int | None
    inputs: GraphInputs  # eval-mode inputs built from the graph the model was fit on
    fit_graph: BipartiteGraph
    val_edges: list[RatingEdge]


def write_history(history: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k, "") for k in HISTORY_COLUMNS})


def eval_inputs(graph: BipartiteGraph, mode: str = "rating", norm: str = "none") -> GraphInputs:
    tu, ti = average_degrees(graph)
    return GraphInputs(build_features(graph, mode, norm), eval_table(graph.user_adj, tu),
                       eval_table(graph.item_adj, ti))


def _active_fraction(model: MCCF) -> float:
    n = model.n_gates()
    return float(model.l0_penalty().data) / n if n else 1.0


def train(graph: BipartiteGraph, config: TrainConfig | None = None,
          model_config: ModelConfig | None = None, model: MCCF | None = None,
          callback=None) -> TrainResult:
    """Fit a model on the edges of ``graph`` (the training split).

    With ``early_stop_patience > 0`` a ``val_frac`` share of the edges is held
    out from both the loss and the feature matrices, and the returned model
    is the snapshot with the best validation RMSE.  ``callback(epoch, model,
    row)`` is invoked after every epoch.
    """
    from .evaluator import evaluate

    config = config or TrainConfig()
    model_config = model_config or (model.config if model else ModelConfig())
    if graph.n_edges == 0:
        raise ValueError("cannot train on an empty graph")
    streams = seed_streams(config.seed)
    init_rng, split_rng, sample_rng, step_rng = (streams[k] for k in SEED_STREAMS[:4])

    val_edges: list[RatingEdge] = []
    fit_graph = graph
    if config.early_stop_patience > 0 and graph.n_edges >= 10:
        fit_graph, val_edges = split_train_test(graph, 1.0 - config.val_frac, split_rng)

    if model is None:
        model = MCCF(graph.n_users, graph.n_items, model_config, init_rng)
    features = build_features(fit_graph, model_config.feature_mode, model_config.feature_norm)
    tu, ti = average_degrees(fit_graph)
    ev_inputs = GraphInputs(features, eval_table(fit_graph.user_adj, tu),
                            eval_table(fit_graph.item_adj, ti))
    users, items = fit_graph.users, fit_graph.items
    targets = fit_graph.ratings.astype(np.float64)
    adam = AdamState()
    history: list[dict] = []
    best_state, best_rmse, best_epoch, stale = model.state(), np.inf, None, 0
    tr_inputs = None

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        if tr_inputs is None or config.resample_each_epoch:
            tr_inputs = GraphInputs(features, sample_table(fit_graph.user_adj, tu, sample_rng),
                                    sample_table(fit_graph.item_adj, ti, sample_rng))
        order = step_rng.permutation(fit_graph.n_edges)
        losses = []
        last_good = model.state()
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            model.zero_grad()
            with dg.Tape() as tape:
                pred = model.forward(users[batch], items[batch], tr_inputs, training=True,
                                     dropout_rate=config.dropout_rate, rng=step_rng,
                                     exclude_target=config.exclude_target)
                r_loss = rating_loss(pred, targets[batch])
                penalty = model.l0_penalty() if model_config.l0_enabled and config.l0_lambda else None
                loss = total_loss(r_loss, penalty, config.l0_lambda)
            if not np.isfinite(loss.data):
                model.load_state(last_good)
                raise TrainingDiverged(epoch, model, history)
            tape.backward(loss)
            adam_step(model.params, adam, config.learning_rate, config.adam_beta1,
                      config.adam_beta2, config.adam_eps)
            losses.append(float(r_loss.data) * len(batch))
        row = {"epoch": epoch, "train_loss": float(np.sum(losses)) / fit_graph.n_edges,
               "active_gate_fraction": _active_fraction(model) if model_config.l0_enabled else 1.0}
        if val_edges:
            rep = evaluate(model, fit_graph, val_edges, inputs=ev_inputs)
            row.update(val_rmse=rep.rmse, val_mae=rep.mae)
            if rep.rmse < best_rmse:
                best_state, best_rmse, best_epoch, stale = model.state(), rep.rmse, epoch, 0
            else:
                stale += 1
        history.append(row)
        logger.info("epoch %d  loss %.4f  val_rmse %s  (%.1fs)", epoch, row["train_loss"],
                    f"{row['val_rmse']:.4f}" if "val_rmse" in row else "-",
                    time.perf_counter() - t0)
        if callback is not None:
            callback(epoch, model, row)
        if val_edges and stale >= config.early_stop_patience:
            break

    if val_edges and best_epoch is not None:
        model.load_state(best_state)
    return TrainResult(model, history, best_epoch, ev_inputs, fit_graph, val_edges)
