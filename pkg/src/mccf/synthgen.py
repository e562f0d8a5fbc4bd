"""Synthetic multi-component user-item graphs with ground-truth item classes.

Each class ``g`` owns a disjoint block of items.  For every (user, item)
pair of the block a draw ``p ~ N(0, v_g)`` is taken and the edge exists
iff ``|p| > threshold``, so blocks with a larger variance are denser.
All users take part in every block.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import BipartiteGraph

RATING_RULES = ("component-signal", "constant-1")
LABEL_HEADER = "item_id\tclass"


@dataclass
class SynthConfig:
    """Generator settings.

    ``rating_rule="component-signal"`` rates an edge of class ``g`` as
    ``clamp(round(2 + g + eps), 1, 5)`` with ``eps ~ N(0, noise_var)``, so
    the class carries rating information; ``"constant-1"`` rates every
    edge 1.
    """

    n_users: int = 300
    items_per_subgraph: int = 100
    variances: tuple[float, ...] = (0.5, 5.0, 50.0)
    threshold: float = 0.5
    seed: int = 0
    rating_rule: str = "component-signal"
    noise_var: float = 0.5
    max_rating: int = 5

    def __post_init__(self):
        self.variances = tuple(float(v) for v in self.variances)
        if not self.variances or any(v <= 0 for v in self.variances):
            raise ValueError("variances must be non-empty and all > 0")
        if self.threshold <= 0:
            raise ValueError("threshold must be > 0")
        if self.n_users < 1 or self.items_per_subgraph < 1:
            raise ValueError("n_users and items_per_subgraph must be >= 1")
        if self.rating_rule not in RATING_RULES:
            raise ValueError(f"rating_rule must be one of {RATING_RULES}")
        if self.noise_var < 0 or self.max_rating < 1:
            raise ValueError("noise_var must be >= 0 and max_rating >= 1")

    @property
    def n_classes(self) -> int:
        return len(self.variances)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variances"] = list(self.variances)
        return d


def normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def expected_density(variance: float, threshold: float) -> float:
    """P(|p| > threshold) for p ~ N(0, variance)."""
    return 2.0 * (1.0 - normal_cdf(threshold / math.sqrt(variance)))


def generate(config: SynthConfig | None = None) -> tuple[BipartiteGraph, np.ndarray]:
    """Build the graph and the per-item class labels."""
    c = config or SynthConfig()
    rng = np.random.default_rng(c.seed)
    n_items = c.items_per_subgraph * c.n_classes
    users, items, ratings = [], [], []
    for g, var in enumerate(c.variances):
        p = rng.normal(0.0, math.sqrt(var), (c.n_users, c.items_per_subgraph))
        u, i = np.nonzero(np.abs(p) > c.threshold)
        if c.rating_rule == "component-signal":
            eps = rng.normal(0.0, math.sqrt(c.noise_var), u.size)
            r = np.clip(np.floor(2.0 + g + eps + 0.5), 1, c.max_rating).astype(np.int64)
        else:
            r = np.ones(u.size, dtype=np.int64)
        users.append(u)
        items.append(i + g * c.items_per_subgraph)
        ratings.append(r)
    graph = BipartiteGraph(c.n_users, n_items, c.max_rating, np.concatenate(users),
                           np.concatenate(items), np.concatenate(ratings))
    labels = np.repeat(np.arange(c.n_classes), c.items_per_subgraph)
    return graph, labels


def block_densities(graph: BipartiteGraph, labels: Sequence[int]) -> np.ndarray:
    """Edge density of each class's user x item block."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    counts = np.bincount(labels[graph.items], minlength=classes.max() + 1)
    sizes = np.bincount(labels, minlength=classes.max() + 1)
    return counts[classes] / (graph.n_users * sizes[classes])


def format_labels(labels: Sequence[int]) -> str:
    lines = [LABEL_HEADER] + [f"{i}\t{int(c)}" for i, c in enumerate(labels)]
    return "\n".join(lines) + "\n"


def parse_labels(text: str) -> list[int]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != LABEL_HEADER:
        raise ValueError("label file must start with the header line")
    labels = []
    for n, ln in enumerate(lines[1:], start=2):
        parts = ln.split("\t")
        if len(parts) != 2:
            raise ValueError(f"line {n}: expected 'item_id<TAB>class'")
        item, cls = int(parts[0]), int(parts[1])
        if item != len(labels):
            raise ValueError(f"line {n}: item ids must run 0, 1, 2, ...")
        labels.append(cls)
    return labels


def write_labels(labels: Sequence[int], path: str | Path) -> None:
    Path(path).write_text(format_labels(labels))


def read_labels(path: str | Path) -> list[int]:
    return parse_labels(Path(path).read_text())
