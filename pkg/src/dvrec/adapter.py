"""Selection policy over Shapley values and its score-function update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import valuator as val
from .exceptions import ConfigError, NumericError, StructureError
from .metrics import METRICS

DEGENERATE_RANGE = 1e-12


@dataclass
class SelectionState:
    phi: np.ndarray
    w_hat: np.ndarray
    s: np.ndarray
    epsilon: float = 0.05


@dataclass
class RewardBaseline:
    """Exponential moving average of the signed cost."""

    delta: float = 0.0
    window: int = 20
    direction: str = "maximize"

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("baseline window must be >= 1")
        if self.direction not in ("maximize", "minimize"):
            raise ConfigError(f"unknown direction {self.direction!r}")


def direction_of(metric):
    try:
        return METRICS[metric]
    except KeyError:
        raise ConfigError(f"unknown metric {metric!r}; expected one of {sorted(METRICS)}") from None


def to_cost(value, direction):
    """Costs are always minimized: maximized metrics are negated."""
    return float(value) if direction == "minimize" else -float(value)


def _check_eps(epsilon):
    if not 0.0 < epsilon < 0.5:
        raise ConfigError("epsilon must lie in (0, 0.5)")


def normalize(phi, epsilon=0.05, sign=1):
    """Min-max scale ``sign * phi`` into [0, 1], then clamp to [eps, 1 - eps].

    A batch whose values span less than 1e-12 maps to 0.5 everywhere.
    """
    _check_eps(epsilon)
    if sign not in (1, -1):
        raise ConfigError("shapley_sign must be +1 or -1")
    x = sign * np.asarray(phi, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite Shapley values")
    lo, hi = x.min(), x.max()
    if hi - lo < DEGENERATE_RANGE:
        return np.full(x.shape, 0.5)
    return np.clip((x - lo) / (hi - lo), epsilon, 1.0 - epsilon)


def normalize_backward(phi, g_w, epsilon=0.05, sign=1):
    """Vector-Jacobian product of :func:`normalize` at ``phi``.

    Clamped coordinates pass no gradient; the min and max entries receive the
    gradient routed through the range.
    """
    x = sign * np.asarray(phi, dtype=np.float64)
    g_w = np.asarray(g_w, dtype=np.float64)
    lo_i, hi_i = int(np.argmin(x)), int(np.argmax(x))
    rng_ = x[hi_i] - x[lo_i]
    g_x = np.zeros_like(x)
    if rng_ < DEGENERATE_RANGE:
        return g_x
    raw = (x - x[lo_i]) / rng_
    free = (raw > epsilon) & (raw < 1.0 - epsilon)
    gf = np.where(free, g_w, 0.0)
    g_x += gf / rng_
    g_x[lo_i] -= gf.sum() / rng_
    # d raw_k / d(range) = -raw_k / range
    t = np.sum(gf * raw) / rng_
    g_x[hi_i] -= t
    g_x[lo_i] += t
    return sign * g_x


def draw_selection(w_hat, rng):
    """Independent Bernoulli(w_hat) draws as a 0/1 float vector."""
    return (rng.random(len(w_hat)) < w_hat).astype(np.float64)


def log_prob(w_hat, s):
    w_hat = np.asarray(w_hat, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if w_hat.shape != s.shape:
        raise StructureError("w_hat and s must have equal length")
    return float(np.sum(s * np.log(w_hat) + (1.0 - s) * np.log1p(-w_hat)))


def log_prob_grad_w(w_hat, s):
    """d log pi / d w_hat."""
    return s / w_hat - (1.0 - s) / (1.0 - w_hat)


def selection_policy(params, trace, rf=None, epsilon=0.05, sign=1):
    """Shapley values and selection probabilities for a forward trace."""
    rf = val.receptive_fields(params) if rf is None else rf
    phi = val.shapley_values(params, trace, rf)
    return phi, normalize(phi, epsilon, sign)


def grad_log_prob(params, trace, s, rf=None, epsilon=0.05, sign=1):
    """Gradient of log pi(s) over every valuator field.

    Chains d log pi / d w_hat through the normalization, the receptive-field
    Shapley extraction, the Harsanyi blocks and the encoder. Recommender
    embeddings, gates and masks are constants.
    """
    rf = val.receptive_fields(params) if rf is None else rf
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (params.n_players,) or trace.z0.shape != s.shape:
        raise StructureError("selection vector, trace and valuator disagree on batch size")
    phi, w_hat = selection_policy(params, trace, rf, epsilon, sign)
    g_phi = normalize_backward(phi, log_prob_grad_w(w_hat, s), epsilon, sign)
    grads = val.shapley_backward(params, trace, g_phi, rf)
    grads.pop("z0", None)
    return grads


def reinforce_update(params, opt, cost, baseline, grads):
    """Descend ``(cost - delta) * grads`` with one Adam step.

    ``params`` is a dict of named arrays updated in place (for a valuator,
    ``ValuatorParams.arrays()``). A zero advantage or an all-zero gradient
    leaves parameters and optimizer state untouched. Returns the advantage.
    """
    if not np.isfinite(cost):
        raise NumericError("non-finite reward cost")
    advantage = float(cost) - baseline.delta
    if advantage == 0.0 or all(not np.any(g) for g in grads.values()):
        return advantage
    scaled = {k: advantage * g for k, g in grads.items() if k in params}
    opt.apply(params, scaled)
    return advantage


def update_baseline(baseline, cost):
    w = baseline.window
    baseline.delta = (w - 1) / w * baseline.delta + float(cost) / w
    return baseline
