import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvrec import oracle
from dvrec import valuator as val
from dvrec.exceptions import ComplexityError

# bitmask order: index = sum of 2^m over present players
HAND_GAME = [0.0, 1.0, 2.0, 4.0]


def test_hand_game():
    np.testing.assert_allclose(oracle.brute_force_shapley(HAND_GAME, 2), [1.5, 2.5], rtol=0, atol=1e-15)
    div = oracle.harsanyi_dividends(HAND_GAME, 2)
    np.testing.assert_array_equal(div, [0.0, 1.0, 2.0, 1.0])


def test_callable_game_matches_table():
    def v(mask):
        return HAND_GAME[int(mask[0]) + 2 * int(mask[1])]

    np.testing.assert_array_equal(oracle.brute_force_shapley(v, 2), oracle.brute_force_shapley(HAND_GAME, 2))


def test_additive_and_constant_games():
    c = np.array([0.3, -1.2, 2.5, 0.7])
    masks = oracle.coalition_masks(4)
    additive = masks @ c
    np.testing.assert_allclose(oracle.brute_force_shapley(additive, 4), c, atol=1e-14)
    div = oracle.harsanyi_dividends(additive, 4)
    order = masks.sum(axis=1)
    assert np.all(np.abs(div[order >= 2]) < 1e-14)
    assert np.all(oracle.brute_force_shapley(np.full(16, 7.0), 4) == 0)


def _naive_shapley(values, n):
    """Average marginal contribution over all n! orderings."""
    phi = np.zeros(n)
    for perm in itertools.permutations(range(n)):
        mask = 0
        for m in perm:
            phi[m] += values[mask | (1 << m)] - values[mask]
            mask |= 1 << m
    return phi / math.factorial(n)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_random_games(n, seed):
    values = np.random.default_rng(seed).normal(size=1 << n)
    phi = oracle.brute_force_shapley(values, n)
    np.testing.assert_allclose(phi, _naive_shapley(values, n), atol=1e-12)
    assert abs(phi.sum() - (values[-1] - values[0])) <= 1e-9
    div = oracle.harsanyi_dividends(values, n)
    assert abs(div.sum() - values[-1]) <= 1e-9
    np.testing.assert_allclose(oracle.shapley_from_dividends(div, n), phi, atol=1e-10)


def test_symmetry():
    # players 0 and 2 are interchangeable
    def v(mask):
        a, b, c = mask
        return 2.0 * (a + c) + 3.0 * b + 5.0 * (a and b) + 5.0 * (c and b)

    phi = oracle.brute_force_shapley(v, 3)
    assert phi[0] == pytest.approx(phi[2], abs=1e-15)


def test_complexity_guard():
    with pytest.raises(ComplexityError):
        oracle.brute_force_shapley(lambda m: 0.0, 17)
    with pytest.raises(ComplexityError):
        oracle.harsanyi_dividends(lambda m: 0.0, 17)


def test_subset_of():
    assert oracle.subset_of(0b1011) == (0, 1, 3)


class TestAudit:
    def test_fresh_network(self):
        params = val.init_valuator(6, d=4, seed=0)
        z0 = np.random.default_rng(0).uniform(0.1, 1, 6)
        report = oracle.audit_z0(params, z0)
        assert report.passed and report.max_deviation <= 1e-5
        assert report.efficiency_residual <= 1e-9
        assert "max |phi_net" in report.to_text()

    def test_single_child_network(self):
        params = val.init_valuator(5, d=4, n_blocks=2, widths=[5, 5], tau=1, seed=3)
        report = oracle.audit_z0(params, np.full(5, 0.5))
        assert report.max_interaction_order <= 1
        assert report.max_deviation <= 1e-12

    def test_zero_output_weights(self):
        params = val.init_valuator(4, d=4, seed=1)
        for blk in params.blocks:
            blk.v[:] = 0
        report = oracle.audit_z0(params, np.ones(4))
        assert np.all(report.phi_net == 0) and np.all(report.phi_oracle == 0)

    def test_real_batch(self, small_dataset):
        from dvrec.data import make_batch
        from dvrec.recmodel import init_model

        theta = init_model(small_dataset.n_users, small_dataset.n_items, d=4, seed=0)
        params = val.init_valuator(8, d=4, seed=2)
        report = oracle.audit(params, make_batch(small_dataset, 8, np.random.default_rng(0)), theta)
        assert report.passed

    def test_audit_batch_limit(self, small_dataset):
        from dvrec.data import make_batch
        from dvrec.recmodel import init_model

        theta = init_model(small_dataset.n_users, small_dataset.n_items, d=4, seed=0)
        params = val.init_valuator(17, d=4, seed=0)
        with pytest.raises(ComplexityError):
            oracle.audit(params, make_batch(small_dataset, 17, np.random.default_rng(0)), theta)
