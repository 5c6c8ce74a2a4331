"""Embedding backbones (MF, LightGCN), BPR loss/gradients and row-sparse Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .exceptions import ConfigError, NumericError, StructureError

_logger = logging.getLogger(__name__)

BACKBONES = ("mf", "lightgcn")


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(-np.abs(x))))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def xavier_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def normalized_adjacency(train_pairs, n_users, n_items):
    """Symmetric-normalized bipartite adjacency over users followed by items."""
    pairs = np.asarray(train_pairs, dtype=np.int64).reshape(-1, 2)
    size = n_users + n_items
    rows = np.concatenate([pairs[:, 0], pairs[:, 1] + n_users])
    cols = np.concatenate([pairs[:, 1] + n_users, pairs[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(size, size))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    d = sp.diags(inv)
    return (d @ adj @ d).tocsr()


@dataclass(eq=False)
class ModelParams:
    """User and item embeddings plus backbone configuration.

    For LightGCN, ``P`` and ``Q`` are the layer-0 embeddings; scoring uses
    the layer-averaged propagation over ``adjacency``.
    """

    P: np.ndarray
    Q: np.ndarray
    backbone: str = "mf"
    layers: int = 2
    adjacency: sp.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.P.ndim != 2 or self.Q.ndim != 2 or self.P.shape[1] != self.Q.shape[1]:
            raise StructureError("P and Q must be 2-D with a common embedding dimension")
        if self.P.shape[1] < 1:
            raise ConfigError("embedding dimension must be >= 1")
        if self.backbone == "lightgcn":
            if self.adjacency is None:
                raise ConfigError("LightGCN needs a normalized adjacency")
            size = self.P.shape[0] + self.Q.shape[0]
            if self.adjacency.shape != (size, size):
                raise StructureError("adjacency shape does not match embedding tables")
            if self.layers < 0:
                raise ConfigError("layers must be >= 0")

    @property
    def d(self):
        return self.P.shape[1]

    @property
    def n_users(self):
        return self.P.shape[0]

    @property
    def n_items(self):
        return self.Q.shape[0]

    def copy(self):
        return ModelParams(self.P.copy(), self.Q.copy(), self.backbone, self.layers, self.adjacency)

    def embeddings(self):
        """Final (user, item) embeddings used for scoring."""
        if self.backbone == "mf":
            return self.P, self.Q
        m = self.n_users
        e = np.vstack([self.P, self.Q])
        acc = e.copy()
        cur = e
        for _ in range(self.layers):
            cur = self.adjacency @ cur
            acc += cur
        acc /= self.layers + 1
        return acc[:m], acc[m:]

    def propagate_grad(self, gP, gQ):
        """Pull gradients on final embeddings back to the layer-0 tables."""
        if self.backbone == "mf":
            return gP, gQ
        m = self.n_users
        g = np.vstack([gP, gQ])
        acc = g.copy()
        cur = g
        at = self.adjacency.T.tocsr()
        for _ in range(self.layers):
            cur = at @ cur
            acc += cur
        acc /= self.layers + 1
        return acc[:m], acc[m:]


def init_model(n_users, n_items, d=64, seed=0, backbone="mf", layers=2, train_pairs=None, rng=None):
    """Xavier-uniform embeddings with bound sqrt(6 / (d + d))."""
    rng = np.random.default_rng(seed) if rng is None else rng
    P = xavier_uniform(rng, (n_users, d), d, d)
    Q = xavier_uniform(rng, (n_items, d), d, d)
    adj = None
    if backbone == "lightgcn":
        if train_pairs is None:
            raise ConfigError("LightGCN initialization needs the training pairs")
        adj = normalized_adjacency(train_pairs, n_users, n_items)
    return ModelParams(P, Q, backbone, layers, adj)


def score(theta, u, i):
    """Relevance score f(u, i); broadcasts over index arrays."""
    P, Q = theta.embeddings()
    return np.sum(P[u] * Q[i], axis=-1)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite embeddings")


def triplet_losses(theta, users, pos, neg):
    """Per-triplet BPR losses -log sigmoid(f(u,i) - f(u,j))."""
    P, Q = theta.embeddings()
    pu, qi, qj = P[users], Q[pos], Q[neg]
    _check_finite(pu, qi, qj)
    x = np.sum(pu * qi, axis=-1) - np.sum(pu * qj, axis=-1)
    return softplus(-x)


def bpr_loss(theta, t):
    u, i, j = t
    return float(triplet_losses(theta, np.array([u]), np.array([i]), np.array([j]))[0])


def batch_bpr_loss(theta, batch):
    """Sum of per-triplet BPR losses over the batch."""
    return float(np.sum(triplet_losses(theta, batch.users, batch.pos, batch.neg)))


def bpr_grad(theta, t, weight_decay=0.0):
    """Gradient of one triplet's regularized BPR loss.

    The objective is ``bpr_loss + weight_decay / 2 * (|p_u|^2 + |q_i|^2 + |q_j|^2)``.
    Returns a dict with keys ``p_u``, ``q_i``, ``q_j`` (MF) or dense
    ``P``/``Q`` arrays (LightGCN).
    """
    u, i, j = (int(x) for x in t)
    if theta.backbone == "mf":
        pu, qi, qj = theta.P[u], theta.Q[i], theta.Q[j]
        x = pu @ qi - pu @ qj
        g = -float(sigmoid(-x))
        return {
            "p_u": g * (qi - qj) + weight_decay * pu,
            "q_i": g * pu + weight_decay * qi,
            "q_j": -g * pu + weight_decay * qj,
        }
    gP, gQ, _, _ = selected_gradient(
        theta, np.array([u]), np.array([i]), np.array([j]), np.ones(1), 1, weight_decay
    )
    return {"P": gP, "Q": gQ}


def selected_gradient(theta, users, pos, neg, s, denom, weight_decay=0.0):
    """Dense gradient of ``(1/denom) * sum_m s_m * L_m`` over (P, Q).

    Also returns the boolean row masks touched by selected triplets, as a
    pair ``(user_rows, item_rows)``, and the per-triplet BPR losses at the
    current parameters.
    """
    s = np.asarray(s, dtype=np.float64)
    coef = s / denom
    P, Q = theta.embeddings()
    pu, qi, qj = P[users], Q[pos], Q[neg]
    x = np.sum(pu * qi, axis=1) - np.sum(pu * qj, axis=1)
    g = -sigmoid(-x)
    losses = softplus(-x)
    gP = np.zeros_like(theta.P)
    gQ = np.zeros_like(theta.Q)
    c = coef[:, None]
    np.add.at(gP, users, c * (g[:, None] * (qi - qj)))
    np.add.at(gQ, pos, c * (g[:, None] * pu))
    np.add.at(gQ, neg, c * (-g[:, None] * pu))
    sel = s != 0
    if theta.backbone == "lightgcn":
        gP, gQ = theta.propagate_grad(gP, gQ)
        urows = np.ones(theta.n_users, dtype=bool)
        irows = np.ones(theta.n_items, dtype=bool)
        if weight_decay:
            # regularize the layer-0 rows of the triplet entities
            np.add.at(gP, users, c * (weight_decay * theta.P[users]))
            np.add.at(gQ, pos, c * (weight_decay * theta.Q[pos]))
            np.add.at(gQ, neg, c * (weight_decay * theta.Q[neg]))
        if not sel.any():
            urows[:] = False
            irows[:] = False
        return gP, gQ, (urows, irows), losses
    if weight_decay:
        np.add.at(gP, users, c * (weight_decay * pu))
        np.add.at(gQ, pos, c * (weight_decay * qi))
        np.add.at(gQ, neg, c * (weight_decay * qj))
    urows = np.zeros(theta.n_users, dtype=bool)
    irows = np.zeros(theta.n_items, dtype=bool)
    urows[users[sel]] = True
    irows[pos[sel]] = True
    irows[neg[sel]] = True
    return gP, gQ, (urows, irows), losses


@dataclass(eq=False)
class AdamState:
    """Adam moments for a dict of named parameter arrays.

    Updates are lazy: only rows flagged in ``rows`` (or all entries when no
    mask is given) move, and only their moments are refreshed. The step
    counter is global and drives bias correction.
    """

    m: dict
    v: dict
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0

    @classmethod
    def like(cls, params, lr=1e-3, weight_decay=0.0, **kw):
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            lr=lr,
            weight_decay=weight_decay,
            **kw,
        )

    def copy(self):
        return AdamState(
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.lr, self.weight_decay, self.beta1, self.beta2, self.eps, self.step, self.skipped,
        )

    def apply(self, params, grads, rows=None):
        """One Adam step in place. ``rows`` maps name -> boolean row mask."""
        self.step += 1
        t = self.step
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            p, m, v = params[name], self.m[name], self.v[name]
            if p.shape != g.shape:
                raise StructureError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            if rows is not None and rows.get(name) is not None:
                r = np.flatnonzero(rows[name])
                if len(r) == 0:
                    continue
                gr = g[r]
                m[r] = self.beta1 * m[r] + (1.0 - self.beta1) * gr
                v[r] = self.beta2 * v[r] + (1.0 - self.beta2) * gr * gr
                p[r] -= self.lr * (m[r] / c1) / (np.sqrt(v[r] / c2) + self.eps)
            else:
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def init_optimizer(theta, lr=1e-3, weight_decay=0.0):
    return AdamState.like({"P": theta.P, "Q": theta.Q}, lr=lr, weight_decay=weight_decay)


def apply_selected_update(theta, opt, batch, s, inner_batch_size=None):
    """One Adam step on the s-gated mean BPR gradient of ``batch``.

    The accumulated gradient is divided by ``inner_batch_size`` (defaults to
    ``len(batch)``). When no triplet is selected, parameters stay put while the
    step counter still advances and ``opt.skipped`` is incremented.
    Returns the mean pre-update BPR loss over the selected triplets (nan if
    none are selected).
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (len(batch),):
        raise StructureError(f"selection vector has shape {s.shape}, batch has {len(batch)} triplets")
    if np.any((s != 0) & (s != 1)):
        raise ConfigError("selection vector must be binary")
    denom = len(batch) if inner_batch_size is None else inner_batch_size
    if not s.any():
        opt.step += 1
        opt.skipped += 1
        _logger.debug("selection vector is all zeros; skipping recommender update")
        return float("nan")
    gP, gQ, (urows, irows), losses = selected_gradient(
        theta, batch.users, batch.pos, batch.neg, s, denom, opt.weight_decay
    )
    if not np.all(np.isfinite(losses)):
        raise NumericError("non-finite BPR loss")
    opt.apply({"P": theta.P, "Q": theta.Q}, {"P": gP, "Q": gQ}, rows={"P": urows, "Q": irows})
    if not np.all(np.isfinite(theta.P)) or not np.all(np.isfinite(theta.Q)):
        raise NumericError("recommender parameters diverged")
    return float(losses[s > 0].mean())
