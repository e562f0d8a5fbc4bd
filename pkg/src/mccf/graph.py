"""User-item bipartite rating graph: ingestion, splitting, features, snapshots."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = "#mccf-graph v1"
IDMAP_MAGIC = "#mccf-idmap v1"
FEATURE_MODES = ("rating", "binary")
FEATURE_NORMS = ("none", "mean", "sqrt")


class GraphError(ValueError):
    pass


class ParseError(GraphError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class RatingEdge:
    user: int
    item: int
    rating: int
    timestamp: int | None = None


@dataclass
class IdMap:
    """Dense index -> raw id, in order of first appearance."""

    users: list[str] = field(default_factory=list)
    items: list[str] = field(default_factory=list)

    def user_index(self) -> dict[str, int]:
        return {raw: i for i, raw in enumerate(self.users)}

    def item_index(self) -> dict[str, int]:
        return {raw: i for i, raw in enumerate(self.items)}


@dataclass
class ParsedRatings:
    edges: list[RatingEdge]
    id_map: IdMap
    max_rating: int
    error: str | None = None


class Adjacency(NamedTuple):
    """CSR-style neighbor lists: node ``n`` owns ``neighbor[indptr[n]:indptr[n+1]]``."""

    indptr: np.ndarray
    neighbor: np.ndarray
    rating: np.ndarray

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def of(self, node: int) -> list[tuple[int, int]]:
        lo, hi = self.indptr[node], self.indptr[node + 1]
        return list(zip(self.neighbor[lo:hi].tolist(), self.rating[lo:hi].tolist()))


def _adjacency(centers: np.ndarray, others: np.ndarray, ratings: np.ndarray, n: int) -> Adjacency:
    order = np.lexsort((others, centers))
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(centers, minlength=n), out=indptr[1:])
    return Adjacency(indptr, others[order], ratings[order])


class BipartiteGraph:
    """Immutable rating graph over dense user/item indices.

    Edges are held column-wise in numpy arrays; ``user_adj``/``item_adj``
    give the same edges grouped per node with neighbors in ascending id.
    """

    def __init__(self, n_users: int, n_items: int, max_rating: int,
                 users, items, ratings, timestamps=None):
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.max_rating = int(max_rating)
        self.users = np.asarray(users, dtype=np.int64).reshape(-1)
        self.items = np.asarray(items, dtype=np.int64).reshape(-1)
        self.ratings = np.asarray(ratings, dtype=np.int64).reshape(-1)
        self.timestamps = None if timestamps is None else np.asarray(timestamps, dtype=np.int64)
        self._validate()
        for arr in (self.users, self.items, self.ratings):
            arr.flags.writeable = False
        self.user_adj = _adjacency(self.users, self.items, self.ratings, self.n_users)
        self.item_adj = _adjacency(self.items, self.users, self.ratings, self.n_items)

    def _validate(self) -> None:
        m = len(self.users)
        if len(self.items) != m or len(self.ratings) != m:
            raise GraphError("users, items and ratings must have equal length")
        if self.timestamps is not None and len(self.timestamps) != m:
            raise GraphError("timestamps length does not match edges")
        if self.n_users < 0 or self.n_items < 0 or self.max_rating < 1:
            raise GraphError("graph sizes must be non-negative and max_rating >= 1")
        if m == 0:
            return
        if self.users.min() < 0 or self.users.max() >= self.n_users:
            raise GraphError("user index out of range")
        if self.items.min() < 0 or self.items.max() >= self.n_items:
            raise GraphError("item index out of range")
        if self.ratings.min() < 1 or self.ratings.max() > self.max_rating:
            raise GraphError(f"rating outside 1..{self.max_rating}")
        key = self.users * self.n_items + self.items
        if len(np.unique(key)) != m:
            raise GraphError("duplicate (user, item) pair")

    @classmethod
    def from_edges(cls, edges: Iterable[RatingEdge], n_users: int | None = None,
                   n_items: int | None = None, max_rating: int | None = None) -> "BipartiteGraph":
        edges = list(edges)
        users = [e.user for e in edges]
        items = [e.item for e in edges]
        ratings = [e.rating for e in edges]
        stamps = [e.timestamp for e in edges]
        ts = stamps if edges and all(t is not None for t in stamps) else None
        return cls(
            n_users if n_users is not None else max(users, default=-1) + 1,
            n_items if n_items is not None else max(items, default=-1) + 1,
            max_rating if max_rating is not None else max(ratings, default=1),
            users, items, ratings, ts,
        )

    @property
    def n_edges(self) -> int:
        return len(self.users)

    @property
    def edges(self) -> list[RatingEdge]:
        ts = self.timestamps
        return [
            RatingEdge(int(u), int(i), int(r), None if ts is None else int(ts[k]))
            for k, (u, i, r) in enumerate(zip(self.users, self.items, self.ratings))
        ]

    def subgraph(self, edge_index) -> "BipartiteGraph":
        """Graph on the selected edges, keeping every node."""
        idx = np.asarray(edge_index, dtype=np.int64)
        ts = None if self.timestamps is None else self.timestamps[idx]
        return BipartiteGraph(self.n_users, self.n_items, self.max_rating,
                              self.users[idx], self.items[idx], self.ratings[idx], ts)

    def global_mean(self) -> float:
        if self.n_edges == 0:
            raise GraphError("global mean of an empty graph")
        return float(self.ratings.mean())

    def __repr__(self) -> str:
        return (f"BipartiteGraph(n_users={self.n_users}, n_items={self.n_items}, "
                f"max_rating={self.max_rating}, n_edges={self.n_edges})")


# -- ingestion ------------------------------------------------------------------

def _parse_int(token: str, line_no: int, what: str) -> int:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(line_no, f"{what} {token!r} is not a number") from None
    if not value.is_integer():
        raise ParseError(line_no, f"{what} {token!r} is not an integer")
    return int(value)


def parse_ratings(lines: Iterable[str], delimiter: str | None = "\t",
                  max_rating: int | None = None) -> ParsedRatings:
    """Parse ``user, item, rating[, timestamp]`` lines.

    Raw ids are remapped to dense indices in order of first appearance.
    ``delimiter=None`` splits on any whitespace.  When ``max_rating`` is not
    given it is inferred as the largest rating seen.  An empty input is not
    an exception: the result carries ``error="no ratings"``.
    """
    id_map = IdMap()
    uidx: dict[str, int] = {}
    iidx: dict[str, int] = {}
    edges: list[RatingEdge] = []
    seen: dict[tuple[int, int], int] = {}
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split(delimiter)
        if len(fields) < 3:
            raise ParseError(line_no, f"expected at least 3 fields, got {len(fields)}")
        ru, ri = fields[0].strip(), fields[1].strip()
        rating = _parse_int(fields[2].strip(), line_no, "rating")
        ts = _parse_int(fields[3].strip(), line_no, "timestamp") if len(fields) > 3 else None
        if rating < 1 or (max_rating is not None and rating > max_rating):
            raise ParseError(line_no, f"rating {rating} outside 1..{max_rating or 'R'}")
        u = uidx.setdefault(ru, len(uidx))
        if u == len(id_map.users):
            id_map.users.append(ru)
        i = iidx.setdefault(ri, len(iidx))
        if i == len(id_map.items):
            id_map.items.append(ri)
        if (u, i) in seen:
            raise ParseError(line_no, f"duplicate rating for user {ru!r} item {ri!r} "
                                      f"(first on line {seen[u, i]})")
        seen[u, i] = line_no
        edges.append(RatingEdge(u, i, rating, ts))
    if not edges:
        return ParsedRatings([], id_map, max_rating or 0, error="no ratings")
    r = max_rating if max_rating is not None else max(e.rating for e in edges)
    return ParsedRatings(edges, id_map, r)


def load_ratings(path: str | Path, delimiter: str | None = "\t",
                 max_rating: int | None = None) -> tuple[BipartiteGraph, IdMap]:
    path = Path(path)
    with path.open() as fh:
        parsed = parse_ratings(fh, delimiter, max_rating)
    if parsed.error:
        raise GraphError(f"{path}: {parsed.error}")
    graph = BipartiteGraph.from_edges(parsed.edges, len(parsed.id_map.users),
                                      len(parsed.id_map.items), parsed.max_rating)
    return graph, parsed.id_map


# -- snapshots --------------------------------------------------------------------
# Graph snapshot: a magic line, then "n_users n_items max_rating", then one
# "user<TAB>item<TAB>rating" line per edge (dense indices).
# Id map: a magic line, then "user|item<TAB>index<TAB>raw_id" lines.

def write_graph(graph: BipartiteGraph, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        fh.write(f"{SNAPSHOT_MAGIC}\n{graph.n_users} {graph.n_items} {graph.max_rating}\n")
        for u, i, r in zip(graph.users.tolist(), graph.items.tolist(), graph.ratings.tolist()):
            fh.write(f"{u}\t{i}\t{r}\n")


def read_graph(path: str | Path) -> BipartiteGraph:
    with Path(path).open() as fh:
        if fh.readline().strip() != SNAPSHOT_MAGIC:
            raise GraphError(f"{path}: not a graph snapshot")
        try:
            n_users, n_items, max_rating = (int(x) for x in fh.readline().split())
        except ValueError:
            raise GraphError(f"{path}: bad header") from None
        rows = np.loadtxt(fh, dtype=np.int64, ndmin=2).reshape(-1, 3)
    return BipartiteGraph(n_users, n_items, max_rating, rows[:, 0], rows[:, 1], rows[:, 2])


def write_id_map(id_map: IdMap, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        fh.write(f"{IDMAP_MAGIC}\n")
        for kind, ids in (("user", id_map.users), ("item", id_map.items)):
            for k, raw in enumerate(ids):
                fh.write(f"{kind}\t{k}\t{raw}\n")


def read_id_map(path: str | Path) -> IdMap:
    id_map = IdMap()
    with Path(path).open() as fh:
        if fh.readline().strip() != IDMAP_MAGIC:
            raise GraphError(f"{path}: not an id map")
        for line in fh:
            kind, k, raw = line.rstrip("\n").split("\t", 2)
            ids = id_map.users if kind == "user" else id_map.items
            if int(k) != len(ids):
                raise GraphError(f"{path}: id map indices out of order")
            ids.append(raw)
    return id_map


# -- splitting and features ---------------------------------------------------------

def split_train_test(graph: BipartiteGraph, train_frac: float = 0.8,
                     seed: int | np.random.Generator = 0) -> tuple[BipartiteGraph, list[RatingEdge]]:
    """Uniform random edge split; the train graph keeps all nodes."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_train = math.floor(train_frac * graph.n_edges + 0.5)
    perm = rng.permutation(graph.n_edges)
    train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    if graph.n_edges and len(test_idx) == 0:
        logger.warning("split of %d edge(s) left the test set empty", graph.n_edges)
    test = graph.subgraph(test_idx).edges
    return graph.subgraph(train_idx), test


@dataclass(frozen=True)
class FeatureMatrices:
    """Adjacency rows used as node features.

    ``user_features`` is ``n_users x n_items``, ``item_features`` its
    transpose; both CSR.
    """

    user_features: sp.csr_matrix
    item_features: sp.csr_matrix
    mode: str


def build_features(train: BipartiteGraph, mode: str = "rating",
                   norm: str = "none") -> FeatureMatrices:
    """Adjacency rows of ``train``, optionally divided by the row's degree.

    ``norm="mean"`` divides each row by its node's degree, ``"sqrt"`` by
    the square root of it; ``"none"`` keeps the raw adjacency values.
    """
    if mode not in FEATURE_MODES:
        raise ValueError(f"feature mode must be one of {FEATURE_MODES}, got {mode!r}")
    if norm not in FEATURE_NORMS:
        raise ValueError(f"feature norm must be one of {FEATURE_NORMS}, got {norm!r}")
    values = train.ratings.astype(np.float64) if mode == "rating" else np.ones(train.n_edges)
    uf = sp.csr_matrix((values, (train.users, train.items)),
                       shape=(train.n_users, train.n_items))
    uf.sort_indices()
    itf = uf.T.tocsr()
    itf.sort_indices()
    if norm != "none":
        for f in (uf, itf):
            deg = np.maximum(np.diff(f.indptr), 1).astype(np.float64)
            scale = 1.0 / deg if norm == "mean" else 1.0 / np.sqrt(deg)
            f.data *= np.repeat(scale, np.diff(f.indptr))
    return FeatureMatrices(uf, itf, mode)


def average_degrees(train: BipartiteGraph) -> tuple[int, int]:
    """Ceiling of the mean user degree and mean item degree (over all nodes)."""
    if train.n_edges == 0 or train.n_users == 0 or train.n_items == 0:
        raise GraphError("average degree of an empty graph")
    e = train.n_edges
    return max(1, -(-e // train.n_users)), max(1, -(-e // train.n_items))
