"""Brute-force Shapley values and Harsanyi dividends over small games.

These enumerate all 2^n coalitions and are used to certify the valuator's
one-pass attribution. Coalitions are bitmasks: bit ``m`` set means player
``m`` (0-based) is present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import valuator as val
from .exceptions import ComplexityError

MAX_PLAYERS = 16
TOLERANCE = 1e-5  # accepted |phi_net - phi_oracle|


def _check_n(n):
    if n < 1:
        raise ValueError("need at least one player")
    if n > MAX_PLAYERS:
        raise ComplexityError(f"exact enumeration over {n} players needs 2^{n} evaluations; limit is {MAX_PLAYERS}")


def coalition_masks(n):
    """(2^n, n) boolean matrix; row k is the coalition encoded by bitmask k."""
    k = np.arange(1 << n, dtype=np.int64)
    return ((k[:, None] >> np.arange(n)) & 1).astype(bool)


def tabulate(v, n):
    """Evaluate ``v`` on every coalition.

    ``v`` is either a callable taking a boolean membership array of length
    ``n``, or an array of 2^n precomputed values indexed by bitmask.
    """
    _check_n(n)
    if callable(v):
        masks = coalition_masks(n)
        return np.array([float(v(row)) for row in masks])
    values = np.asarray(v, dtype=np.float64)
    if values.shape != (1 << n,):
        raise ValueError(f"expected {1 << n} coalition values, got shape {values.shape}")
    return values


def _popcount(n):
    k = np.arange(1 << n, dtype=np.int64)
    return ((k[:, None] >> np.arange(n)) & 1).sum(axis=1)


def brute_force_shapley(v, n):
    """Exact Shapley values by enumerating marginal contributions.

    The weight |S|! (n-|S|-1)! / n! is kept as an exact integer numerator
    and divided by n! once per player.
    """
    values = tabulate(v, n)
    pop = _popcount(n)
    numer = np.array([math.factorial(s) * math.factorial(n - s - 1) for s in range(n)], dtype=np.float64)
    total = math.factorial(n)
    allmasks = np.arange(1 << n, dtype=np.int64)
    phi = np.zeros(n)
    for m in range(n):
        bit = 1 << m
        without = allmasks[(allmasks & bit) == 0]
        delta = values[without | bit] - values[without]
        weights = numer[pop[without]]
        phi[m] = math.fsum(weights * delta) / total
    return phi


def harsanyi_dividends(v, n):
    """Moebius transform I(S) = sum_{T <= S} (-1)^{|S|-|T|} v(T), by bitmask.

    Computed in place in O(n 2^n).
    """
    dividends = tabulate(v, n).copy()
    allmasks = np.arange(1 << n, dtype=np.int64)
    for m in range(n):
        bit = 1 << m
        has = allmasks[(allmasks & bit) != 0]
        dividends[has] -= dividends[has ^ bit]
    return dividends


def shapley_from_dividends(dividends, n):
    """phi_m = sum over coalitions S containing m of I(S) / |S|."""
    dividends = np.asarray(dividends, dtype=np.float64)
    pop = _popcount(n)
    allmasks = np.arange(1 << n, dtype=np.int64)
    phi = np.zeros(n)
    for m in range(n):
        sel = (allmasks >> m) & 1 == 1
        phi[m] = math.fsum(dividends[sel] / pop[sel])
    return phi


def subset_of(mask):
    """Bitmask -> tuple of 0-based player indices."""
    return tuple(k for k in range(int(mask).bit_length()) if (mask >> k) & 1)


@dataclass
class AuditReport:
    phi_net: np.ndarray
    phi_oracle: np.ndarray
    phi_dividends: np.ndarray
    v_full: float
    v_empty: float
    max_deviation: float
    efficiency_residual: float
    dividend_gap: float
    max_interaction_order: int
    max_receptive_field: int
    null_players: np.ndarray

    @property
    def passed(self):
        return self.max_deviation <= TOLERANCE

    def rows(self):
        for m in range(len(self.phi_net)):
            yield {
                "player": m,
                "phi_net": float(self.phi_net[m]),
                "phi_oracle": float(self.phi_oracle[m]),
                "abs_dev": float(abs(self.phi_net[m] - self.phi_oracle[m])),
                "null": bool(self.null_players[m]),
            }

    def to_text(self):
        lines = [f"{'player':>6} {'phi_net':>14} {'phi_oracle':>14} {'abs_dev':>10}"]
        for r in self.rows():
            lines.append(f"{r['player']:>6} {r['phi_net']:>14.8f} {r['phi_oracle']:>14.8f} {r['abs_dev']:>10.2e}")
        lines.append(f"max |phi_net - phi_oracle| = {self.max_deviation:.3e}")
        lines.append(f"efficiency residual        = {self.efficiency_residual:.3e}")
        lines.append(f"max interaction order      = {self.max_interaction_order} (receptive field <= {self.max_receptive_field})")
        return "\n".join(lines)


def audit_z0(params, z0, tol=1e-12):
    """Compare network Shapley values against enumeration for player signals ``z0``."""
    n = params.n_players
    _check_n(n)
    z0 = np.asarray(z0, dtype=np.float64)
    values = val.masked_values(params, z0, coalition_masks(n))
    phi_oracle = brute_force_shapley(values, n)
    dividends = harsanyi_dividends(values, n)
    phi_div = shapley_from_dividends(dividends, n)
    trace = val.harsanyi_forward(params, z0)
    rf = val.receptive_fields(params)
    phi_net = val.shapley_values(params, trace, rf)
    covered = np.zeros(n, dtype=bool)
    for r in rf:
        covered |= r.any(axis=0)
    significant = np.flatnonzero(np.abs(dividends) > tol)
    pop = _popcount(n)
    return AuditReport(
        phi_net=phi_net,
        phi_oracle=phi_oracle,
        phi_dividends=phi_div,
        v_full=float(values[-1]),
        v_empty=float(values[0]),
        max_deviation=float(np.max(np.abs(phi_net - phi_oracle))),
        efficiency_residual=float(abs(phi_net.sum() - values[-1] + values[0])),
        dividend_gap=float(np.max(np.abs(phi_div - phi_oracle))),
        max_interaction_order=int(pop[significant].max()) if len(significant) else 0,
        max_receptive_field=int(max(r.sum(axis=1).max() for r in rf)),
        null_players=~covered,
    )


def audit(params, batch, theta):
    """Audit the valuator on a real triplet batch (at most 16 triplets)."""
    if len(batch) > MAX_PLAYERS:
        raise ComplexityError(f"audit batch has {len(batch)} triplets; limit is {MAX_PLAYERS}")
    return audit_z0(params, val.encode_samples(params, theta, batch))
