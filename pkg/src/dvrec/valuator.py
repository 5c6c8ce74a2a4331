"""Harsanyi-structured batch valuator.

Each triplet in a batch is encoded to a scalar player signal ``h_m``. A stack
of AND-gated linear blocks predicts the batch loss; because a neuron is
non-zero only when all of its children are, its activation equals a
Harsanyi interaction over its receptive field, and every player's exact
Shapley value is read off in one pass over the neurons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, StructureError
from .recmodel import xavier_uniform


@dataclass(eq=False)
class Block:
    mask: np.ndarray  # (M_l, M_{l-1}) bool children selection
    A: np.ndarray  # (M_l, M_{l-1}) weights; entries outside mask are zero
    v: np.ndarray  # (M_l,) output weights

    @property
    def width(self):
        return self.mask.shape[0]


@dataclass(eq=False)
class ValuatorParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray  # 0-d array so it can be updated in place
    blocks: list
    _rf: list | None = field(default=None, repr=False)

    def __post_init__(self):
        d = self.W1.shape[0]
        if self.W1.shape != (d, 3 * d) or self.b1.shape != (d,) or self.W2.shape != (d,):
            raise StructureError("encoder weights must be W1 (d, 3d), b1 (d,), W2 (d,)")
        self.b2 = np.asarray(self.b2, dtype=np.float64).reshape(())
        prev = None
        for blk in self.blocks:
            if prev is not None and blk.mask.shape[1] != prev:
                raise StructureError("block input width does not match previous block width")
            if not blk.mask.any(axis=1).all():
                raise StructureError("every neuron needs at least one child")
            prev = blk.width

    @property
    def d(self):
        return self.W1.shape[0]

    @property
    def n_players(self):
        return self.blocks[0].mask.shape[1]

    @property
    def n_blocks(self):
        return len(self.blocks)

    def arrays(self):
        """Named trainable arrays (views, updated in place by optimizers)."""
        out = {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}
        for k, blk in enumerate(self.blocks):
            out[f"A{k}"] = blk.A
            out[f"v{k}"] = blk.v
        return out

    def copy(self):
        blocks = [Block(b.mask.copy(), b.A.copy(), b.v.copy()) for b in self.blocks]
        return ValuatorParams(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), blocks)


@dataclass(eq=False)
class ForwardTrace:
    z0: np.ndarray
    zhat: list
    gates: list
    z: list
    y_hat: float
    # encoder intermediates, absent when the forward pass started from z0
    e: np.ndarray | None = None
    pre1: np.ndarray | None = None
    e_hat: np.ndarray | None = None


def default_architecture(n_b):
    """Two blocks of widths [2 n_b, n_b] with max(2, n_b // 8) children."""
    return 2, [2 * n_b, n_b], max(2, n_b // 8)


def init_valuator(n_b, d=64, n_blocks=None, widths=None, tau=None, seed=0, rng=None):
    """Random children masks (exactly ``tau`` per neuron) and Xavier weights.

    ``tau`` may be an int or one int per block.
    """
    dl, dw, dt = default_architecture(n_b)
    n_blocks = dl if n_blocks is None else n_blocks
    if widths is None:
        widths = dw[:n_blocks] + [n_b] * max(0, n_blocks - len(dw))
    widths = list(widths)
    tau = dt if tau is None else tau
    if n_b < 1 or n_blocks < 1:
        raise ConfigError("need at least one player and one block")
    if len(widths) != n_blocks:
        raise ConfigError(f"expected {n_blocks} widths, got {len(widths)}")
    taus = [tau] * n_blocks if np.isscalar(tau) else list(tau)
    if len(taus) != n_blocks:
        raise ConfigError("tau list must have one entry per block")
    rng = np.random.default_rng(seed) if rng is None else rng

    W1 = xavier_uniform(rng, (d, 3 * d), 3 * d, d)
    b1 = np.zeros(d)
    W2 = xavier_uniform(rng, (d,), d, 1)
    b2 = np.zeros(())
    blocks = []
    prev = n_b
    for width, t in zip(widths, taus):
        t = int(t)
        if width < 1:
            raise ConfigError("block widths must be positive")
        if not 1 <= t <= prev:
            raise ConfigError(f"children per neuron {t} must lie in [1, {prev}]")
        mask = np.zeros((width, prev), dtype=bool)
        for row in range(width):
            mask[row, rng.choice(prev, size=t, replace=False)] = True
        A = xavier_uniform(rng, (width, prev), t, 1) * mask
        v = xavier_uniform(rng, (width,), width, 1)
        blocks.append(Block(mask, A, v))
        prev = width
    return ValuatorParams(W1, b1, W2, b2, blocks)


def encode_inputs(theta, batch):
    """Concatenate [p_u; q_i; q_j] for each triplet, shape (n_b, 3d)."""
    P, Q = theta.embeddings()
    return np.concatenate([P[batch.users], Q[batch.pos], Q[batch.neg]], axis=1)


def encode_samples(params, theta, batch, return_intermediates=False):
    """Scalar player signals h_m = tanh(W2 . ReLU(W1 e_m + b1) + b2)."""
    if len(batch) != params.n_players:
        raise StructureError(f"valuator built for {params.n_players} players, batch has {len(batch)}")
    e = encode_inputs(theta, batch)
    if e.shape[1] != 3 * params.d:
        raise StructureError(f"embedding dimension {e.shape[1] // 3} does not match valuator d={params.d}")
    pre1 = e @ params.W1.T + params.b1
    e_hat = np.maximum(pre1, 0.0)
    h = np.tanh(e_hat @ params.W2 + params.b2)
    if return_intermediates:
        return h, (e, pre1, e_hat)
    return h


def _blocks_forward(params, z0):
    """Forward through the AND-gated blocks; ``z0`` may be (n_b,) or (k, n_b)."""
    zhat, gates, zs = [], [], []
    prev = z0
    y = np.zeros(z0.shape[:-1])
    for blk in params.blocks:
        weights = blk.A * blk.mask
        zh = prev @ weights.T
        dead = (prev == 0) @ blk.mask.T.astype(np.int64)
        gate = dead == 0
        z = np.maximum(zh * gate, 0.0)
        zhat.append(zh)
        gates.append(gate)
        zs.append(z)
        y = y + z @ blk.v
        prev = z
    return zhat, gates, zs, y


def harsanyi_forward(params, z0):
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape != (params.n_players,):
        raise StructureError(f"z0 has shape {z0.shape}, expected ({params.n_players},)")
    zhat, gates, zs, y = _blocks_forward(params, z0)
    return ForwardTrace(z0, zhat, gates, zs, float(y))


def forward(params, theta, batch):
    """Encode the batch and run the blocks, keeping every intermediate."""
    h, (e, pre1, e_hat) = encode_samples(params, theta, batch, return_intermediates=True)
    trace = harsanyi_forward(params, h)
    trace.e, trace.pre1, trace.e_hat = e, pre1, e_hat
    return trace


def mse_loss(y_hat, batch_loss):
    return float((y_hat - batch_loss) ** 2)


def masked_forward(params, z0, S):
    """Value v(S): players outside ``S`` are set to exactly zero.

    ``S`` is an iterable of 0-based player indices or a boolean mask.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    keep = _as_mask(S, len(z0))
    return float(_blocks_forward(params, np.where(keep, z0, 0.0))[3])


def masked_values(params, z0, masks):
    """Vectorized v(S) for a (k, n_b) boolean array of coalitions."""
    masks = np.asarray(masks, dtype=bool)
    z = np.where(masks, np.asarray(z0, dtype=np.float64)[None, :], 0.0)
    return _blocks_forward(params, z)[3]


def _as_mask(S, n):
    arr = np.asarray(S)
    if arr.dtype == bool and arr.shape == (n,):
        return arr
    keep = np.zeros(n, dtype=bool)
    keep[np.asarray(list(S), dtype=np.int64)] = True
    return keep


def receptive_fields(params):
    """Per block, a (M_l, n_b) boolean membership matrix of receptive fields.

    Block 1 rows are the children masks; deeper rows are the union of their
    children's rows. Cached on ``params`` since masks never change.
    """
    if params._rf is None:
        rf = []
        prev = None
        for blk in params.blocks:
            if prev is None:
                cur = blk.mask.copy()
            else:
                cur = (blk.mask.astype(np.int64) @ prev.astype(np.int64)) > 0
            rf.append(cur)
            prev = cur
        params._rf = rf
    return params._rf


def shapley_values(params, trace, rf=None):
    """phi_m = sum over neurons whose receptive field holds m of v z / |C|."""
    rf = receptive_fields(params) if rf is None else rf
    phi = np.zeros(params.n_players)
    for blk, z, r in zip(params.blocks, trace.z, rf):
        share = blk.v * z / r.sum(axis=1)
        phi += share @ r
    return phi


def backward(params, trace, coefs):
    """Gradient of ``sum_l sum_n coefs[l][n] * v_ln * z_ln`` over all fields.

    Gates and children masks are constants. With ``coefs[l] = c`` for every
    block this is ``c * d y_hat``; Shapley-based objectives use per-neuron
    coefficients (see :func:`shapley_backward`).
    """
    if len(trace.z) != params.n_blocks:
        raise StructureError("trace does not match the valuator's block count")
    for blk, z in zip(params.blocks, trace.z):
        if z.shape != (blk.width,):
            raise StructureError("stale trace: activation shapes differ from the valuator")
    grads = {}
    dz_next = np.zeros(params.blocks[-1].width)
    for k in range(params.n_blocks - 1, -1, -1):
        blk = params.blocks[k]
        c = np.broadcast_to(np.asarray(coefs[k], dtype=np.float64), (blk.width,))
        z = trace.z[k]
        grads[f"v{k}"] = c * z
        dz = c * blk.v + dz_next
        active = trace.gates[k] & (trace.zhat[k] * trace.gates[k] > 0)
        dzh = dz * active
        prev = trace.z0 if k == 0 else trace.z[k - 1]
        grads[f"A{k}"] = np.outer(dzh, prev) * blk.mask
        dz_next = (blk.A * blk.mask).T @ dzh
    dz0 = dz_next
    if trace.e is not None:
        h = trace.z0
        dpre2 = dz0 * (1.0 - h * h)
        grads["W2"] = trace.e_hat.T @ dpre2
        grads["b2"] = np.asarray(dpre2.sum())
        de_hat = np.outer(dpre2, params.W2)
        dpre1 = de_hat * (trace.pre1 > 0)
        grads["W1"] = dpre1.T @ trace.e
        grads["b1"] = dpre1.sum(axis=0)
    else:
        grads["W1"] = np.zeros_like(params.W1)
        grads["b1"] = np.zeros_like(params.b1)
        grads["W2"] = np.zeros_like(params.W2)
        grads["b2"] = np.zeros(())
    grads["z0"] = dz0
    return grads


def valuator_backward(params, trace, upstream):
    """Gradient of ``upstream * y_hat``."""
    return backward(params, trace, [upstream] * params.n_blocks)


def mse_backward(params, trace, target):
    """Gradient of ``(y_hat - target)^2``."""
    return valuator_backward(params, trace, 2.0 * (trace.y_hat - target))


def shapley_backward(params, trace, g_phi, rf=None):
    """Gradient of ``g_phi . phi`` with phi from :func:`shapley_values`."""
    rf = receptive_fields(params) if rf is None else rf
    g_phi = np.asarray(g_phi, dtype=np.float64)
    coefs = [(r @ g_phi) / r.sum(axis=1) for r in rf]
    return backward(params, trace, coefs)
