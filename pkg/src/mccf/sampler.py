"""Rating-weighted neighbor sampling (A-Res keys) and deterministic eval selection.

Every neighbor gets the key ``u ** (1 / rating)`` with ``u`` uniform on
(0, 1); the ``threshold`` largest keys are kept.  Nodes at or below the
threshold keep their whole neighborhood and consume no random draws.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .graph import Adjacency


@dataclass(frozen=True)
class SampledNeighborhood:
    center: int
    neighbors: list[tuple[int, int]]


class NeighborTable(NamedTuple):
    """Padded per-node neighbor selection.

    Row ``n`` holds node ``n``'s selected neighbors in its first
    ``mask[n].sum()`` slots; padding slots have index 0 and rating 0.
    """

    index: np.ndarray
    rating: np.ndarray
    mask: np.ndarray

    def neighbors(self, node: int) -> list[tuple[int, int]]:
        m = self.mask[node]
        return list(zip(self.index[node][m].tolist(), self.rating[node][m].tolist()))


def uniform_open(rng: np.random.Generator, size) -> np.ndarray:
    """Uniform draws on the open interval (0, 1); exact zeros are redrawn."""
    u = rng.random(size)
    bad = u == 0.0
    while bad.any():
        u[bad] = rng.random(int(bad.sum()))
        bad = u == 0.0
    return u


def sample_key(rating, uniform_draw):
    rating = np.asarray(rating, dtype=np.float64)
    uniform_draw = np.asarray(uniform_draw, dtype=np.float64)
    if np.any(rating <= 0):
        raise ValueError("sampling weight (rating) must be positive")
    key = uniform_draw ** (1.0 / rating)
    return float(key) if key.ndim == 0 else key


def _top(ids: np.ndarray, score: np.ndarray, k: int) -> np.ndarray:
    # descending score, ties by ascending id
    return np.lexsort((ids, -score))[:k]


def sample_neighborhood(adj: Sequence[tuple[int, int]], threshold: int,
                        rng: np.random.Generator, center: int = -1) -> SampledNeighborhood:
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1, got {threshold}")
    adj = list(adj)
    if len(adj) <= threshold:
        return SampledNeighborhood(center, adj)
    ids = np.array([n for n, _ in adj])
    keys = sample_key(np.array([r for _, r in adj]), uniform_open(rng, len(adj)))
    keep = _top(ids, keys, threshold)
    return SampledNeighborhood(center, [adj[k] for k in keep])


def eval_neighborhood(adj: Sequence[tuple[int, int]], threshold: int,
                      center: int = -1) -> SampledNeighborhood:
    """The ``threshold`` highest-rated neighbors, ties by ascending id."""
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1, got {threshold}")
    adj = list(adj)
    if len(adj) <= threshold:
        return SampledNeighborhood(center, adj)
    ids = np.array([n for n, _ in adj])
    keep = _top(ids, np.array([r for _, r in adj], dtype=np.float64), threshold)
    return SampledNeighborhood(center, [adj[k] for k in keep])


def _table(adj: Adjacency, threshold: int, score: np.ndarray | None) -> NeighborTable:
    n = len(adj.indptr) - 1
    deg = adj.degree()
    width = max(1, min(threshold, int(deg.max()) if n else 0))
    index = np.zeros((n, width), dtype=np.int64)
    rating = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    owner = np.repeat(np.arange(n), deg)
    if score is None:
        score = adj.rating.astype(np.float64)
    # within each node: descending score, ties by ascending neighbor id
    order = np.lexsort((adj.neighbor, -score, owner))
    rank = np.arange(len(order)) - adj.indptr[owner[order]]
    keep = rank < threshold
    rows, cols, src = owner[order][keep], rank[keep], order[keep]
    index[rows, cols] = adj.neighbor[src]
    rating[rows, cols] = adj.rating[src]
    mask[rows, cols] = True
    return NeighborTable(index, rating, mask)


def sample_table(adj: Adjacency, threshold: int, rng: np.random.Generator) -> NeighborTable:
    """Weighted sample for every node at once.

    Random draws are consumed node by node in id order, and only for nodes
    above the threshold, so the result matches calling
    :func:`sample_neighborhood` on each node in turn with the same generator
    (neighbor lists in ascending-id order).
    """
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1, got {threshold}")
    deg = adj.degree()
    over = np.repeat(deg > threshold, deg)
    score = np.full(len(adj.neighbor), np.inf)
    draws = uniform_open(rng, int(over.sum()))
    score[over] = sample_key(adj.rating[over], draws)
    # keys are only compared within a node; sub-threshold nodes keep everything
    return _table(adj, threshold, score)


def eval_table(adj: Adjacency, threshold: int) -> NeighborTable:
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1, got {threshold}")
    return _table(adj, threshold, None)


def full_table(adj: Adjacency) -> NeighborTable:
    """Every neighbor of every node, no cap."""
    return _table(adj, max(1, int(adj.degree().max(initial=0))), None)
