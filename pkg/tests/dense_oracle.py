"""Independent dense re-implementation of the eval-mode forward pass.

Written entity by entity with explicit per-component matrices and Python
loops, sharing nothing with the package except the parameter dictionary.
Neighborhoods are complete (no sampling) and gates are the noiseless
clamped ones.
"""
import math

import numpy as np


def _relu(x):
    return np.maximum(x, 0.0)


def _softmax(x):
    e = np.exp(x - np.max(x))
    return e / e.sum()


def dense_matrices(n_users, n_items, edges, binary=False):
    """Rating (or 0/1) user x item matrix from (u, i, r) triples."""
    R = np.zeros((n_users, n_items))
    for u, i, r in edges:
        R[u, i] = 1.0 if binary else float(r)
    return R


def _gate(log_alpha, gamma=-0.1, zeta=1.1):
    s = 1.0 / (1.0 + np.exp(-log_alpha))
    return np.minimum(1.0, np.maximum(0.0, s * (zeta - gamma) + gamma))


def _component_matrices(params, name, m, l0):
    """List of M explicit d x L matrices for transform ``name``."""
    w = params[name]
    if l0:
        w = w * _gate(params[name + "_log_alpha"])
    return [w[:, c, :].T.copy() for c in range(m)]


def _embed(center_row, nbr_rows, center_mats, nbr_mats, a, C, b_vec, q, b):
    m = len(center_mats)
    d = center_mats[0].shape[0]
    z_list, s_list = [], []
    for c in range(m):
        s = center_mats[c] @ center_row
        hs = [nbr_mats[c] @ row for row in nbr_rows]
        scores = np.array([_relu(a[c] @ np.concatenate([s, h])) for h in hs])
        alpha = _softmax(scores)
        agg = np.zeros(d)
        for w, h in zip(alpha, hs):
            agg = agg + w * h
        z_list.append(_relu(agg))
        s_list.append(s)
    w_scores = []
    for c in range(m):
        hidden = _relu(C[c] @ np.concatenate([z_list[c], s_list[c]]) + b_vec[c])
        w_scores.append(_relu(q @ hidden + b))
    beta = _softmax(np.array(w_scores))
    out = np.zeros(d)
    for c in range(m):
        out = out + beta[c] * z_list[c]
    return out, beta


def dense_forward(params, n_components, n_users, n_items, edges, pairs, l0=True,
                  binary=False, n_hidden=2):
    """Predicted rating for every (user, item) in ``pairs``."""
    R = dense_matrices(n_users, n_items, edges, binary)
    m = n_components
    out = []
    for u, i in pairs:
        user_nbrs = [j for j in range(n_items) if any(e[0] == u and e[1] == j for e in edges)]
        item_nbrs = [v for v in range(n_users) if any(e[0] == v and e[1] == i for e in edges)]

        p = "user"
        zu, _ = _embed(R[u], [R[:, j] for j in user_nbrs],
                       _component_matrices(params, f"{p}.W", m, l0),
                       _component_matrices(params, f"{p}.Q", m, l0),
                       params[f"{p}.a"], params[f"{p}.C"], params[f"{p}.b_vec"],
                       params[f"{p}.q"], float(params[f"{p}.b"]))
        p = "item"
        vi, _ = _embed(R[:, i], [R[v] for v in item_nbrs],
                       _component_matrices(params, f"{p}.Q", m, l0),
                       _component_matrices(params, f"{p}.W", m, l0),
                       params[f"{p}.a"], params[f"{p}.C"], params[f"{p}.b_vec"],
                       params[f"{p}.q"], float(params[f"{p}.b"]))
        g = np.concatenate([zu, vi])
        for layer in range(n_hidden):
            g = _relu(params[f"mlp.W{layer}"] @ g + params[f"mlp.b{layer}"])
        out.append(float(params["mlp.w_out"] @ g))
    return np.array(out)


def expected_l0(log_alpha, temperature=2.0 / 3.0, gamma=-0.1, zeta=1.1):
    shift = temperature * math.log(-gamma / zeta)
    return float(np.sum(1.0 / (1.0 + np.exp(-(log_alpha - shift)))))
