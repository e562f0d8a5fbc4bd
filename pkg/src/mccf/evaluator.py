"""Rating metrics and attention-weight export."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import BipartiteGraph, RatingEdge, build_features
from .model import MCCF, GraphInputs
from .sampler import full_table


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    mae: float
    n_scored: int
    n_fallback: int

    def as_line(self) -> str:
        return f"rmse={self.rmse:.6f},mae={self.mae:.6f},n_scored={self.n_scored},n_fallback={self.n_fallback}"

    def as_block(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in (("rmse", self.rmse), ("mae", self.mae),
                                                  ("n_scored", self.n_scored),
                                                  ("n_fallback", self.n_fallback)))


def rmse_mae(predictions, targets) -> tuple[float, float]:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.size == 0:
        raise ValueError("no predictions to score")
    err = p - t
    return float(np.sqrt(np.mean(err * err))), float(np.mean(np.abs(err)))


def clip_ratings(predictions, max_rating: int) -> np.ndarray:
    return np.clip(np.asarray(predictions, dtype=np.float64), 1.0, float(max_rating))


def predict_edges(model: MCCF, graph: BipartiteGraph, edges: Sequence[RatingEdge],
                  inputs: GraphInputs | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Clipped predictions for ``edges`` and the cold-start mask.

    A pair is cold when both its user and its item have no edge in
    ``graph``; cold pairs get the global mean rating of ``graph``.
    """
    if inputs is None:
        from .trainer import eval_inputs
        inputs = eval_inputs(graph, model.config.feature_mode, model.config.feature_norm)
    users = np.array([e.user for e in edges], dtype=np.int64)
    items = np.array([e.item for e in edges], dtype=np.int64)
    cold = (graph.user_adj.degree()[users] == 0) & (graph.item_adj.degree()[items] == 0)
    pred = np.full(len(edges), graph.global_mean())
    warm = ~cold
    if warm.any():
        pred[warm] = model.predict(users[warm], items[warm], inputs)
    return clip_ratings(pred, graph.max_rating), cold


def evaluate(model: MCCF, graph: BipartiteGraph, test_edges: Sequence[RatingEdge],
             inputs: GraphInputs | None = None) -> EvalReport:
    """RMSE/MAE of ``model`` on ``test_edges``; ``graph`` is the training graph."""
    if len(test_edges) == 0:
        raise ValueError("empty test set")
    pred, cold = predict_edges(model, graph, test_edges, inputs)
    rmse, mae = rmse_mae(pred, [e.rating for e in test_edges])
    return EvalReport(rmse, mae, len(test_edges), int(cold.sum()))


# -- attention export ------------------------------------------------------------

@dataclass(frozen=True)
class AttentionRow:
    entity_id: int
    level: str  # "node" or "component"
    idx: int    # node rows: the user whose neighborhood was attended; component rows: -1
    weights: tuple[float, ...]
    label: int | None = None


@dataclass
class AttentionDump:
    rows: list[AttentionRow]
    n_components: int

    def of_level(self, level: str) -> list[AttentionRow]:
        return [r for r in self.rows if r.level == level]

    def matrix(self, level: str) -> np.ndarray:
        return np.array([r.weights for r in self.of_level(level)]).reshape(-1, self.n_components)

    def write_csv(self, path: str | Path) -> None:
        header = ["entity_id", "level", "idx"] + [f"w_{m}" for m in range(self.n_components)] + ["label"]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in self.rows:
                w.writerow([r.entity_id, r.level, r.idx, *(repr(x) for x in r.weights),
                            "" if r.label is None else r.label])

    @classmethod
    def read_csv(cls, path: str | Path) -> "AttentionDump":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            m = sum(1 for h in header if h.startswith("w_"))
            rows = [AttentionRow(int(r[0]), r[1], int(r[2]), tuple(float(x) for x in r[3:3 + m]),
                                 int(r[3 + m]) if r[3 + m] != "" else None) for r in reader]
        return cls(rows, m)


def pick_export_user(graph: BipartiteGraph) -> int:
    """The user with the most items (lowest id on ties)."""
    deg = graph.user_adj.degree()
    if graph.n_users == 0 or deg.max() == 0:
        raise ValueError("graph has no user with neighbors")
    return int(np.argmax(deg))


def export_attention(model: MCCF, graph: BipartiteGraph, target: int | str = "all items",
                     labels: Sequence[int] | None = None) -> AttentionDump:
    """Node- and component-level attention weights per item.

    Node rows: for the chosen user ``u`` (``target``, or the highest-degree
    user for ``"all items"``), one row per item in ``u``'s full
    neighborhood with the ``M`` weights alpha_m^{ui}.  Each component's
    softmax runs over the neighborhood, so the row is renormalized over
    components to a probability vector; items outside ``u``'s neighborhood
    have no node row.  Component rows: beta^i from the item path, one per
    item that has at least one rater.
    """
    user = pick_export_user(graph) if target == "all items" else int(target)
    if not 0 <= user < graph.n_users:
        raise ValueError(f"user {user} out of range")
    if graph.user_adj.degree()[user] == 0:
        raise ValueError(f"user {user} has an empty neighborhood")
    feats = build_features(graph, model.config.feature_mode, model.config.feature_norm)
    inputs = GraphInputs(feats, full_table(graph.user_adj), full_table(graph.item_adj))
    m = model.config.n_components

    def label_of(i: int):
        return None if labels is None else int(labels[i])

    rows: list[AttentionRow] = []
    out = model.path_attention("user", [user], inputs)
    alpha = np.asarray(out.node_weights.data)[0]  # (U, M)
    valid = out.neighbor_mask[0]
    for k in np.flatnonzero(valid):
        item = int(out.neighbor_index[k])
        w = alpha[k]
        w = w / w.sum() if w.sum() > 0 else np.full(m, 1.0 / m)
        rows.append(AttentionRow(item, "node", user, tuple(float(x) for x in w), label_of(item)))
    items = np.flatnonzero(graph.item_adj.degree() > 0)
    for lo in range(0, len(items), 512):
        chunk = items[lo:lo + 512]
        beta = np.asarray(model.path_attention("item", chunk, inputs).component_weights.data)
        for item, w in zip(chunk, beta):
            rows.append(AttentionRow(int(item), "component", -1, tuple(float(x) for x in w),
                                     label_of(int(item))))
    return AttentionDump(rows, m)


def cluster_separation(weights: np.ndarray, labels: Sequence[int]) -> tuple[float, float]:
    """Mean cosine similarity within classes and across classes (pairs i != j)."""
    x = np.asarray(weights, dtype=np.float64)
    lab = np.asarray(labels)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = x / np.where(norms > 0, norms, 1.0)
    sim = unit @ unit.T
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(lab), dtype=bool)
    return float(sim[same & off].mean()), float(sim[~same].mean())
