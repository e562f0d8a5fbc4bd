"""Finite-difference verification of the full training loss gradient.

The check runs the training-mode forward pass (stochastic gates, dropout,
sampled neighborhoods) on a 3-user / 4-item graph.  Every loss evaluation
re-seeds the noise generator, so the loss is a deterministic function of
the parameters and central differences apply.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from .graph import BipartiteGraph, average_degrees, build_features
from .model import MCCF, GraphInputs, ModelConfig
from .sampler import sample_table
from .trainer import rating_loss, total_loss

TOY_EDGES = (
    (0, 0, 5), (0, 1, 3), (0, 2, 4),
    (1, 0, 2), (1, 2, 1), (1, 3, 4),
    (2, 1, 5), (2, 3, 3),
)


def toy_graph() -> BipartiteGraph:
    u, i, r = (np.array(col) for col in zip(*TOY_EDGES))
    return BipartiteGraph(3, 4, 5, u, i, r)


@dataclass
class GradcheckReport:
    seed: int
    errors: dict[str, float]  # parameter group -> max-norm relative error
    tol: float
    seconds: float = 0.0
    n_entries: int = 0
    failing: list[str] = field(init=False)

    def __post_init__(self):
        self.failing = sorted(n for n, e in self.errors.items() if not e < self.tol)

    @property
    def passed(self) -> bool:
        return not self.failing

    def lines(self) -> list[str]:
        return [f"{n}\t{e:.3e}\t{'ok' if e < self.tol else 'FAIL'}"
                for n, e in sorted(self.errors.items())]


# Some groups have an exactly zero gradient at generic points (a bias shared
# by all softmax logits, self-features with one component); their finite
# differences are pure roundoff, ~1e-10 here.  Norms below this floor are
# compared in absolute terms.
GRAD_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def gradcheck(seed: int = 0, n_components: int = 2, dim: int = 4, h: float = 1e-5,
              tol: float = 1e-4, l0_lambda: float = 1e-2, dropout_rate: float = 0.5,
              activation: str = "relu", param_std: float = 0.5,
              exclude_target: bool = False) -> GradcheckReport:
    """Compare tape gradients of the full loss with central differences.

    Weights and biases are drawn from N(0, param_std): at the small
    training init the attention gradients on a 4-dim toy model sit near
    the finite-difference noise floor, and zero biases are a symmetric
    point.  Gate logits keep their usual init.  ``exclude_target`` checks
    the leave-own-edge-out objective the trainer uses by default instead.
    """
    t0 = time.perf_counter()
    graph = toy_graph()
    ss = np.random.SeedSequence(seed).spawn(3)
    init_rng, sample_rng = np.random.default_rng(ss[0]), np.random.default_rng(ss[1])
    noise_seed = ss[2]
    cfg = ModelConfig(n_components=n_components, dim=dim, activation=activation,
                      hidden_dims=(dim, dim))
    model = MCCF(graph.n_users, graph.n_items, cfg, init_rng)
    for name, t in model.params.items():
        if not name.endswith("log_alpha"):
            t.data[...] = init_rng.normal(0.0, param_std, t.shape)
    tu, ti = average_degrees(graph)
    inputs = GraphInputs(build_features(graph), sample_table(graph.user_adj, tu, sample_rng),
                         sample_table(graph.item_adj, ti, sample_rng))
    targets = graph.ratings.astype(np.float64)

    def loss() -> dg.Tensor:
        rng = np.random.default_rng(noise_seed)
        pred = model.forward(graph.users, graph.items, inputs, training=True,
                             dropout_rate=dropout_rate, rng=rng,
                             exclude_target=exclude_target)
        return total_loss(rating_loss(pred, targets), model.l0_penalty(), l0_lambda)

    model.zero_grad()
    with dg.Tape() as tape:
        value = loss()
    tape.backward(value)
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros(t.shape))
                for n, t in model.params.items()}

    errors, n_entries = {}, 0
    for name, t in model.params.items():
        numeric = np.zeros(t.shape)
        flat, nflat = t.data.reshape(-1), numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = float(loss().data)
            flat[k] = orig - h
            down = float(loss().data)
            flat[k] = orig
            nflat[k] = (up - down) / (2.0 * h)
        n_entries += flat.size
        errors[name] = relative_error(analytic[name], numeric)
    return GradcheckReport(seed, errors, tol, time.perf_counter() - t0, n_entries)
