"""Multi-component graph convolutional collaborative filtering network.

Each side (user path, item path) decomposes a node's neighborhood into
``M`` latent components, attends over neighbors within each component,
then attends over the components to get one embedding.  The user embedding
and item embedding are concatenated and fed to a small MLP that outputs the
rating.

All stage functions work on a batch.  Centers have shape ``(B, M, d)``;
the distinct neighbors of the whole batch are extracted once as
``(U, M, d)`` and a ``(B, U)`` mask says which belong to which center.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import diffgraph as dg
from .diffgraph import Tensor
from .graph import FEATURE_NORMS, FeatureMatrices
from .sampler import NeighborTable

SNAPSHOT_VERSION = 1
ACTIVATIONS = ("relu", "leaky_relu")
PATHS = ("user", "item")


@dataclass
class ModelConfig:
    n_components: int = 2
    dim: int = 64
    activation: str = "relu"
    leaky_slope: float = 0.2
    node_attention: bool = True
    component_attention: bool = True
    l0_enabled: bool = True
    hidden_dims: tuple[int, ...] | None = None  # None -> (dim, dim)
    init_std: float = 0.1
    gate_temperature: float = 2.0 / 3.0
    gate_gamma: float = -0.1
    gate_zeta: float = 1.1
    gate_init_mean: float = 1.0
    gate_init_std: float = 0.1
    feature_mode: str = "rating"
    feature_norm: str = "none"

    def __post_init__(self):
        if self.n_components < 1 or self.dim < 1:
            raise ValueError("n_components and dim must be >= 1")
        if self.feature_norm not in FEATURE_NORMS:
            raise ValueError(f"feature_norm must be one of {FEATURE_NORMS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not (self.gate_gamma < 0 < 1 < self.gate_zeta) or self.gate_temperature <= 0:
            raise ValueError("hard-concrete constants need gamma < 0, zeta > 1, temperature > 0")
        if self.hidden_dims is not None:
            self.hidden_dims = tuple(int(h) for h in self.hidden_dims)

    @property
    def hidden(self) -> tuple[int, ...]:
        return self.hidden_dims if self.hidden_dims is not None else (self.dim, self.dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = None if self.hidden_dims is None else list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def activate(x: Tensor, cfg: ModelConfig) -> Tensor:
    if cfg.activation == "relu":
        return dg.relu(x)
    return dg.leaky_relu(x, cfg.leaky_slope)


# -- hard-concrete L0 gates ------------------------------------------------------

@dataclass(frozen=True)
class GateConstants:
    temperature: float = 2.0 / 3.0
    gamma: float = -0.1
    zeta: float = 1.1

    @classmethod
    def of(cls, cfg: ModelConfig) -> "GateConstants":
        return cls(cfg.gate_temperature, cfg.gate_gamma, cfg.gate_zeta)


def _gate_values(log_alpha: np.ndarray, consts: GateConstants, training: bool,
                 rng: np.random.Generator | None) -> np.ndarray:
    if training:
        u = rng.random(log_alpha.shape)
        with np.errstate(divide="ignore"):
            x = np.log(u)
            x -= np.log1p(-u)  # logistic noise; u = 0 gives a closed gate
        x += log_alpha
        x *= 1.0 / consts.temperature
    else:
        x = log_alpha
    z = dg.expit(x)
    z *= consts.zeta - consts.gamma
    z += consts.gamma
    return np.clip(z, 0.0, 1.0, out=z)


def _gate_slope(z: np.ndarray, consts: GateConstants, training: bool) -> np.ndarray:
    """d gate / d log_alpha, recovered from the clamped gate values."""
    span = consts.zeta - consts.gamma
    s = (z - consts.gamma) / span
    slope = s * (1.0 - s)
    slope *= span / consts.temperature if training else span
    slope *= (z > 0.0) & (z < 1.0)
    return slope


def hard_concrete_gate(log_alpha: Tensor, consts: GateConstants, training: bool,
                       rng: np.random.Generator | None = None) -> Tensor:
    """Stretched, clamped concrete gate.

    Training draws ``s = sigmoid((log u - log(1-u) + log_alpha) / T)``;
    eval uses the noiseless ``sigmoid(log_alpha)``.  Either way the result
    is stretched to (gamma, zeta) and clamped to [0, 1].
    """
    z = _gate_values(log_alpha.data, consts, training, rng)
    return dg.custom("hard_concrete", (log_alpha,), z,
                     lambda g: (g * _gate_slope(z, consts, training),))


def gated_transform(transform: Tensor, log_alpha: Tensor, consts: GateConstants,
                    training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """``transform * gate`` as one op (same values as multiplying by
    :func:`hard_concrete_gate`, without materializing the gate tensor)."""
    z = _gate_values(log_alpha.data, consts, training, rng)
    w = transform.data

    def backward(g):
        gl = g * w
        gl *= _gate_slope(z, consts, training)
        return g * z, gl

    return dg.custom("gated_transform", (transform, log_alpha), w * z, backward)


def l0_penalty(log_alphas: list[Tensor], consts: GateConstants) -> Tensor:
    """Expected number of non-zero gates: sum of P(gate != 0)."""
    shift = consts.temperature * math.log(-consts.gamma / consts.zeta)
    total = None
    for la in log_alphas:
        p = dg.expit(la.data - shift)
        term = dg.custom("l0_penalty", (la,), p.sum(),
                         lambda g, p=p: (g * p * (1.0 - p),))
        total = term if total is None else dg.add(total, term)
    return total if total is not None else Tensor(0.0)


# -- network stages ------------------------------------------------------------------

def extract_components(features, transform: Tensor, gate: Tensor | None = None) -> Tensor:
    """``(B, L)`` features through ``M`` gated transforms -> ``(B, M, d)``.

    ``transform`` is stored feature-major as ``(L, M, d)``: the ``d x L``
    matrix of component ``m`` is ``transform[:, m, :].T``.
    """
    n_in, m, d = transform.shape
    if features.shape[1] != n_in:
        raise dg.ShapeError(f"features have width {features.shape[1]}, transforms expect {n_in}")
    w = transform if gate is None else dg.mul(transform, gate)
    out = dg.sparse_matmul(features, dg.reshape(w, (n_in, m * d)))
    return dg.reshape(out, (features.shape[0], m, d))


def node_attention(center: Tensor, neighbors: Tensor, attn: Tensor, mask: np.ndarray,
                   cfg: ModelConfig) -> Tensor:
    """Per-component softmax over each center's neighbors -> ``(B, U, M)``.

    ``neighbors`` holds the ``(U, M, d)`` components of every distinct
    neighbor in the batch and ``mask[b, u]`` says whether neighbor ``u``
    belongs to center ``b``.  The score of a neighbor is
    ``act(a_m . [s_m || h_m])``, evaluated as ``a_m[:d] . s_m + a_m[d:] . h_m``.
    With node attention disabled the weights are uniform over the
    neighborhood.  A center with no neighbors gets all-zero weights.
    """
    b = center.shape[0]
    u, m, d = neighbors.shape
    mask3 = np.broadcast_to(np.asarray(mask, dtype=bool)[:, :, None], (b, u, m))
    if not cfg.node_attention:
        count = np.maximum(mask3.sum(axis=1, keepdims=True), 1)
        return Tensor(mask3 / count)
    a_self = dg.take(attn, np.arange(d), axis=1)
    a_nbr = dg.take(attn, np.arange(d, 2 * d), axis=1)
    self_score = dg.reshape(dg.einsum("bmd,md->bm", center, a_self), (b, 1, m))
    nbr_score = dg.reshape(dg.einsum("umd,md->um", neighbors, a_nbr), (1, u, m))
    scores = activate(dg.add(self_score, nbr_score), cfg)
    return dg.softmax(scores, axis=1, mask=mask3)


def aggregate_component(weights: Tensor, neighbors: Tensor, cfg: ModelConfig) -> Tensor:
    """``z_m = act(sum_u alpha_um h_um)`` -> ``(B, M, d)``; empty neighborhoods give act(0) = 0."""
    per_comp = dg.matmul(dg.transpose(weights, (2, 0, 1)), dg.transpose(neighbors, (1, 0, 2)))
    return activate(dg.transpose(per_comp, (1, 0, 2)), cfg)


def combine(z: Tensor, s: Tensor, params: dict[str, Tensor], prefix: str,
            cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Component-level attention; returns the fused ``(B, d)`` embedding and ``(B, M)`` weights."""
    b, m, d = z.shape
    if cfg.component_attention:
        zs = dg.transpose(dg.concat([z, s], axis=2), (1, 0, 2))           # (M, B, 2d)
        proj = dg.matmul(zs, dg.transpose(params[f"{prefix}.C"], (0, 2, 1)))  # (M, B, d)
        hidden = activate(dg.add(dg.transpose(proj, (1, 0, 2)), params[f"{prefix}.b_vec"]), cfg)
        score = activate(dg.add(dg.einsum("bmd,d->bm", hidden, params[f"{prefix}.q"]),
                                params[f"{prefix}.b"]), cfg)
        beta = dg.softmax(score, axis=1)
    else:
        beta = Tensor(np.full((b, m), 1.0 / m))
    return dg.einsum("bm,bmd->bd", beta, z), beta


def predict_rating(zu: Tensor, vi: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
                   dropout_rate: float = 0.0, training: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """MLP over ``[z_u || v_i]``; returns the raw ``(B,)`` ratings."""
    g = dg.concat([zu, vi], axis=1)
    for layer in range(len(cfg.hidden)):
        w, b = params[f"mlp.W{layer}"], params[f"mlp.b{layer}"]
        g = activate(dg.add(dg.matmul(g, dg.transpose(w)), b), cfg)
        g = dg.dropout(g, dropout_rate, rng, training)
    return dg.matmul(g, params["mlp.w_out"])


# -- inputs ---------------------------------------------------------------------------

@dataclass
class GraphInputs:
    """Everything the forward pass reads from the graph side."""

    features: FeatureMatrices
    user_table: NeighborTable
    item_table: NeighborTable


class PathOutput(NamedTuple):
    embedding: Tensor
    node_weights: Tensor        # (B, U, M)
    component_weights: Tensor   # (B, M)
    neighbor_index: np.ndarray  # (U,) node ids of the distinct neighbors
    neighbor_mask: np.ndarray   # (B, U)


def _batch_neighbors(table: NeighborTable, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distinct neighbor ids of a batch and the (B, U) membership mask."""
    idx = table.index[centers]
    valid = table.mask[centers]
    uniq, inverse = np.unique(idx[valid], return_inverse=True)
    if uniq.size == 0:
        return np.zeros(1, dtype=np.int64), np.zeros((len(centers), 1), dtype=bool)
    member = np.zeros((len(centers), uniq.size), dtype=bool)
    member[np.nonzero(valid)[0], inverse] = True
    return uniq, member


def _drop_columns(rows, cols: np.ndarray):
    """Copy of CSR ``rows`` with entry ``(b, cols[b])`` zeroed in every row."""
    rows = rows.tocsr(copy=True)
    owner = np.repeat(cols, np.diff(rows.indptr))
    rows.data[rows.indices == owner] = 0.0
    return rows


class MCCF:
    """Parameters plus forward pass.

    Parameter names are ``<path>.<group>`` for the two embedding paths
    (groups ``W``, ``Q``, ``a``, ``C``, ``b_vec``, ``q``, ``b`` and gate
    logits ``W_log_alpha``, ``Q_log_alpha``) and ``mlp.*`` for the head.
    ``W`` always transforms user feature rows (width ``n_items``) and ``Q``
    item feature rows (width ``n_users``): the user path extracts its
    center with ``W`` and its neighbors with ``Q``, the item path the
    other way round.
    """

    def __init__(self, n_users: int, n_items: int, config: ModelConfig | None = None,
                 rng: np.random.Generator | int | None = 0):
        self.config = config or ModelConfig()
        self.n_users = n_users
        self.n_items = n_items
        self.params: dict[str, Tensor] = {}
        if rng is not None:
            self.init_params(rng)

    # -- parameters ---------------------------------------------------------------
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        m, d = c.n_components, c.dim
        shapes: dict[str, tuple[int, ...]] = {}
        for p in PATHS:
            shapes[f"{p}.W"] = (self.n_items, m, d)
            shapes[f"{p}.Q"] = (self.n_users, m, d)
            shapes[f"{p}.a"] = (m, 2 * d)
            shapes[f"{p}.C"] = (m, d, 2 * d)
            shapes[f"{p}.b_vec"] = (m, d)
            shapes[f"{p}.q"] = (d,)
            shapes[f"{p}.b"] = ()
            if c.l0_enabled:
                shapes[f"{p}.W_log_alpha"] = (self.n_items, m, d)
                shapes[f"{p}.Q_log_alpha"] = (self.n_users, m, d)
        width = 2 * d
        for layer, h in enumerate(c.hidden):
            shapes[f"mlp.W{layer}"] = (h, width)
            shapes[f"mlp.b{layer}"] = (h,)
            width = h
        shapes["mlp.w_out"] = (width,)
        return shapes

    def init_params(self, rng: np.random.Generator | int) -> None:
        """Weights ~ N(0, init_std), biases 0, gate logits ~ N(gate_init_mean, gate_init_std)."""
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        c = self.config
        self.params = {}
        for name, shape in self.param_shapes().items():
            group = name.split(".", 1)[1]
            if group.endswith("log_alpha"):
                data = rng.normal(c.gate_init_mean, c.gate_init_std, shape)
            elif group.startswith("b"):  # b, b_vec, mlp biases
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, c.init_std, shape)
            self.params[name] = Tensor(data, requires_grad=True, name=name)

    def log_alphas(self) -> list[Tensor]:
        return [t for n, t in self.params.items() if n.endswith("log_alpha")]

    def n_gates(self) -> int:
        return int(np.sum([t.size for t in self.log_alphas()]))

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        shapes = self.param_shapes()
        if set(state) != set(shapes):
            raise ValueError(f"parameter names differ: {sorted(set(state) ^ set(shapes))}")
        for n, arr in state.items():
            if tuple(arr.shape) != shapes[n]:
                raise ValueError(f"{n}: shape {arr.shape} != expected {shapes[n]}")
        self.params = {n: Tensor(np.array(state[n], dtype=np.float64), requires_grad=True, name=n)
                       for n in shapes}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- forward ------------------------------------------------------------------
    def gates(self, training: bool, rng: np.random.Generator | None) -> dict[str, Tensor | None]:
        """Gate tensors per transform (None with L0 disabled)."""
        if not self.config.l0_enabled:
            return {f"{p}.{g}": None for p in PATHS for g in ("W", "Q")}
        consts = GateConstants.of(self.config)
        return {name[: -len("_log_alpha")]: hard_concrete_gate(la, consts, training, rng)
                for name, la in self.params.items() if name.endswith("_log_alpha")}

    def effective_transforms(self, training: bool,
                             rng: np.random.Generator | None) -> dict[str, Tensor]:
        """``W`` and ``Q`` of both paths with their gates applied."""
        out = {}
        consts = GateConstants.of(self.config)
        for p in PATHS:
            for g in ("W", "Q"):
                w = self.params[f"{p}.{g}"]
                if self.config.l0_enabled:
                    w = gated_transform(w, self.params[f"{p}.{g}_log_alpha"], consts, training, rng)
                out[f"{p}.{g}"] = w
        return out

    def l0_penalty(self) -> Tensor:
        return l0_penalty(self.log_alphas(), GateConstants.of(self.config))

    def _path(self, side: str, centers: np.ndarray, inputs: GraphInputs,
              transforms: dict[str, Tensor], training: bool, dropout_rate: float,
              rng, exclude: np.ndarray | None = None) -> PathOutput:
        cfg, p = self.config, self.params
        f = inputs.features
        if side == "user":
            x_center, x_nbr, table = f.user_features, f.item_features, inputs.user_table
            center_key, nbr_key = "W", "Q"
        else:
            x_center, x_nbr, table = f.item_features, f.user_features, inputs.item_table
            center_key, nbr_key = "Q", "W"
        rows = x_center[centers]
        idx, mask = _batch_neighbors(table, centers)
        if exclude is not None:
            rows = _drop_columns(rows, exclude)
            mask &= idx[None, :] != exclude[:, None]
        s = extract_components(rows, transforms[f"{side}.{center_key}"])
        h = extract_components(x_nbr[idx], transforms[f"{side}.{nbr_key}"])
        alpha = node_attention(s, h, p[f"{side}.a"], mask, cfg)
        z = aggregate_component(alpha, h, cfg)
        z = dg.dropout(z, dropout_rate, rng, training)
        emb, beta = combine(z, s, p, side, cfg)
        return PathOutput(emb, alpha, beta, idx, mask)

    def forward(self, users, items, inputs: GraphInputs, training: bool = False,
                dropout_rate: float = 0.0, rng: np.random.Generator | None = None,
                exclude_target: bool = False) -> Tensor:
        """Predicted ratings of the ``(users[b], items[b])`` pairs.

        With ``exclude_target`` each pair's own edge is hidden from both
        paths: ``i`` leaves ``u``'s neighbors (and ``u`` leaves ``i``'s) and
        the rating is zeroed in both center feature rows, so a training
        edge cannot read its own target.
        """
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if training and rng is None:
            raise ValueError("training forward needs a random generator")
        ws = self.effective_transforms(training, rng)
        zu = self._path("user", users, inputs, ws, training, dropout_rate, rng,
                        items if exclude_target else None).embedding
        vi = self._path("item", items, inputs, ws, training, dropout_rate, rng,
                        users if exclude_target else None).embedding
        return predict_rating(zu, vi, self.params, self.config, dropout_rate, training, rng)

    def predict(self, users, items, inputs: GraphInputs, batch_size: int = 2048) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        out = np.empty(len(users))
        for lo in range(0, len(users), batch_size):
            sl = slice(lo, lo + batch_size)
            out[sl] = self.forward(users[sl], items[sl], inputs).data
        return out

    def path_attention(self, side: str, centers, inputs: GraphInputs) -> PathOutput:
        """Eval-mode node- and component-level weights for ``centers`` on one path."""
        return self._path(side, np.asarray(centers, dtype=np.int64), inputs,
                          self.effective_transforms(False, None), False, 0.0, None)

    # -- snapshots ------------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        meta = {
            "format": "mccf-model",
            "version": SNAPSHOT_VERSION,
            "n_users": self.n_users,
            "n_items": self.n_items,
            "config": self.config.to_dict(),
            "shapes": {n: list(t.shape) for n, t in self.params.items()},
        }
        arrays = {f"param:{n}": t.data for n, t in self.params.items()}
        with Path(path).open("wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path: str | Path, expect_config: ModelConfig | None = None) -> "MCCF":
        with np.load(Path(path), allow_pickle=False) as z:
            if "__meta__" not in z.files:
                raise ValueError(f"{path}: not a model snapshot")
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") != "mccf-model" or meta.get("version") != SNAPSHOT_VERSION:
                raise ValueError(f"{path}: unsupported snapshot format {meta.get('format')!r} "
                                 f"v{meta.get('version')}")
            cfg = ModelConfig.from_dict(meta["config"])
            if expect_config is not None and expect_config.to_dict() != cfg.to_dict():
                raise ValueError(f"{path}: snapshot config does not match the expected config")
            model = cls(meta["n_users"], meta["n_items"], cfg, rng=None)
            state = {k[len("param:"):]: z[k] for k in z.files if k.startswith("param:")}
            for n, shape in meta["shapes"].items():
                if n not in state or list(state[n].shape) != shape:
                    raise ValueError(f"{path}: tensor {n} missing or mis-shaped")
        model.load_state(state)
        return model
