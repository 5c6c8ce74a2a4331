import math

import numpy as np
import pytest
from fdcheck import numeric_grad, rel_err
from hypothesis import given, settings
from hypothesis import strategies as st

from dvrec.data import TripletBatch, make_batch
from dvrec.exceptions import ConfigError, NumericError, StructureError
from dvrec.recmodel import (
    AdamState,
    ModelParams,
    apply_selected_update,
    batch_bpr_loss,
    bpr_grad,
    bpr_loss,
    init_model,
    init_optimizer,
    normalized_adjacency,
    score,
    selected_gradient,
    softplus,
    triplet_losses,
)


def model(P, Q, **kw):
    return ModelParams(np.array(P, dtype=float), np.array(Q, dtype=float), **kw)


def diff_model(x):
    """One user [1,0]; item 0 scores x, item 1 scores 0."""
    return model([[1.0, 0.0]], [[x, 0.0], [0.0, 0.0]])


class TestScoreAndLoss:
    def test_dot_product(self):
        assert score(model([[1, 0]], [[0.5, 2]]), 0, 0) == 0.5

    def test_zero_item(self):
        th = model(np.random.default_rng(0).normal(size=(4, 3)), np.zeros((2, 3)))
        assert np.all(score(th, np.arange(4), np.zeros(4, dtype=int)) == 0)

    @pytest.mark.parametrize("x,expected", [(0.0, math.log(2)), (1.0, math.log1p(math.exp(-1)))])
    def test_values(self, x, expected):
        assert bpr_loss(diff_model(x), (0, 0, 1)) == pytest.approx(expected, rel=1e-12)
        assert round(bpr_loss(diff_model(1.0), (0, 0, 1)), 6) == 0.313262

    def test_large_difference_is_stable(self):
        val = bpr_loss(diff_model(50.0), (0, 0, 1))
        assert val == pytest.approx(math.exp(-50), rel=1e-9)
        assert softplus(np.array([-800.0]))[0] == 0.0 and softplus(np.array([800.0]))[0] == 800.0

    def test_batch_sums(self):
        th = diff_model(0.0)
        b = TripletBatch(np.zeros(3, int), np.zeros(3, int), np.ones(3, int))
        assert batch_bpr_loss(th, b) == pytest.approx(3 * math.log(2), abs=1e-12)
        rng = np.random.default_rng(1)
        th = model(rng.normal(size=(5, 4)), rng.normal(size=(6, 4)))
        b = TripletBatch(rng.integers(0, 5, 9), rng.integers(0, 6, 9), rng.integers(0, 6, 9))
        assert abs(batch_bpr_loss(th, b) - sum(bpr_loss(th, t) for t in b.as_array())) <= 1e-12
        single = b.subset([0])
        assert batch_bpr_loss(th, single) == bpr_loss(th, single.as_array()[0])

    def test_non_finite(self):
        with pytest.raises(NumericError):
            bpr_loss(model([[np.nan, 0]], [[0, 0], [0, 0]]), (0, 0, 1))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-30, 30), st.floats(0.01, 5))
    def test_positive_and_decreasing(self, x, dx):
        a, b = bpr_loss(diff_model(x), (0, 0, 1)), bpr_loss(diff_model(x + dx), (0, 0, 1))
        assert a > 0 and b > 0 and b < a


class TestGradients:
    def test_hand_value(self):
        # p_u . q_i = p_u . q_j = 0, so x = 0 and g = -1/2
        th = model([[1, 0]], [[0, 1], [0, 0]])
        g = bpr_grad(th, (0, 0, 1))
        np.testing.assert_array_equal(g["p_u"], [-0.0, -0.5])

    def test_equal_items_only_decay(self):
        th = model([[0.3, -0.2]], [[1.0, 2.0], [1.0, 2.0]])
        g = bpr_grad(th, (0, 0, 1), weight_decay=0.1)
        np.testing.assert_allclose(g["p_u"], 0.1 * th.P[0], rtol=0, atol=1e-15)

    def test_finite_differences_mf(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            th = model(rng.normal(size=(3, 4)), rng.normal(size=(5, 4)))
            u, i, j = 1, 2, 4
            wd = 0.01

            def f():
                reg = 0.5 * wd * (th.P[u] @ th.P[u] + th.Q[i] @ th.Q[i] + th.Q[j] @ th.Q[j])
                return bpr_loss(th, (u, i, j)) + reg

            g = bpr_grad(th, (u, i, j), weight_decay=wd)
            num_P = numeric_grad(f, th.P)
            num_Q = numeric_grad(f, th.Q)
            worst = max(worst, rel_err(g["p_u"], num_P[u]), rel_err(g["q_i"], num_Q[i]),
                        rel_err(g["q_j"], num_Q[j]))
        assert worst <= 1e-6

    def test_finite_differences_lightgcn(self):
        rng = np.random.default_rng(2)
        pairs = np.array([(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (2, 0)])
        th = init_model(3, 4, d=3, backbone="lightgcn", layers=2, train_pairs=pairs, rng=rng)
        t = (0, 1, 3)
        g = bpr_grad(th, t)
        assert rel_err(g["P"], numeric_grad(lambda: bpr_loss(th, t), th.P)) <= 1e-6
        assert rel_err(g["Q"], numeric_grad(lambda: bpr_loss(th, t), th.Q)) <= 1e-6

    def test_selected_half_batch_scaling(self):
        rng = np.random.default_rng(3)
        th = model(rng.normal(size=(3, 4)), rng.normal(size=(5, 4)))
        users, pos, neg = np.array([0, 1]), np.array([2, 3]), np.array([4, 0])
        gP2, gQ2, *_ = selected_gradient(th, users, pos, neg, np.array([1.0, 0.0]), 2)
        gP1, gQ1, *_ = selected_gradient(th, users[:1], pos[:1], neg[:1], np.ones(1), 1)
        np.testing.assert_allclose(gP2, 0.5 * gP1, rtol=1e-15)
        np.testing.assert_allclose(gQ2, 0.5 * gQ1, rtol=1e-15)


class TestLightGCN:
    def test_zero_layers_equals_mf(self):
        rng = np.random.default_rng(0)
        pairs = np.array([(0, 0), (1, 1), (1, 0)])
        th = init_model(2, 2, d=3, backbone="lightgcn", layers=0, train_pairs=pairs, rng=rng)
        mf = ModelParams(th.P, th.Q)
        assert np.array_equal(score(th, np.array([0, 1]), np.array([1, 0])), score(mf, np.array([0, 1]), np.array([1, 0])))

    def test_linearity_and_normalization(self):
        pairs = np.array([(0, 0), (0, 1), (1, 1)])
        adj = normalized_adjacency(pairs, 2, 2).toarray()
        assert np.allclose(adj, adj.T)
        # user 0 (deg 2) - item 1 (deg 2)
        assert adj[0, 3] == pytest.approx(1 / 2)
        th = init_model(2, 2, d=3, backbone="lightgcn", train_pairs=pairs, rng=np.random.default_rng(0))
        P, Q = th.embeddings()
        th2 = ModelParams(2 * th.P, 2 * th.Q, "lightgcn", th.layers, th.adjacency)
        P2, Q2 = th2.embeddings()
        np.testing.assert_allclose(P2, 2 * P, rtol=1e-14)
        np.testing.assert_allclose(Q2, 2 * Q, rtol=1e-14)

    def test_missing_adjacency(self):
        with pytest.raises(ConfigError):
            ModelParams(np.zeros((1, 2)), np.zeros((1, 2)), backbone="lightgcn")


class TestUpdates:
    def _setup(self):
        rng = np.random.default_rng(0)
        th = init_model(4, 6, d=4, rng=rng)
        opt = init_optimizer(th, lr=0.01)
        b = TripletBatch(np.array([0, 1, 2]), np.array([1, 2, 3]), np.array([4, 5, 0]))
        return th, opt, b

    def test_all_ones_is_plain_step(self):
        th, opt, b = self._setup()
        th2 = th.copy()
        apply_selected_update(th, opt, b, np.ones(3))
        gP, gQ, _, _ = selected_gradient(th2, b.users, b.pos, b.neg, np.ones(3), 3)
        full = AdamState.like({"P": th2.P, "Q": th2.Q}, lr=0.01)
        full.apply({"P": th2.P, "Q": th2.Q}, {"P": gP, "Q": gQ})
        touched_u = np.isin(np.arange(4), b.users)
        np.testing.assert_array_equal(th.P[touched_u], th2.P[touched_u])

    def test_all_zero_is_noop(self):
        th, opt, b = self._setup()
        P, Q = th.P.copy(), th.Q.copy()
        assert math.isnan(apply_selected_update(th, opt, b, np.zeros(3)))
        assert np.array_equal(P, th.P) and np.array_equal(Q, th.Q)
        assert opt.step == 1 and opt.skipped == 1

    def test_unselected_rows_do_not_move(self):
        th, opt, b = self._setup()
        P = th.P.copy()
        apply_selected_update(th, opt, b, np.array([1.0, 0.0, 0.0]))
        assert np.array_equal(P[[1, 2, 3]], th.P[[1, 2, 3]]) and not np.array_equal(P[0], th.P[0])

    def test_bad_selection(self):
        th, opt, b = self._setup()
        with pytest.raises(StructureError):
            apply_selected_update(th, opt, b, np.ones(2))
        with pytest.raises(ConfigError):
            apply_selected_update(th, opt, b, np.array([0.5, 1, 1]))

    def test_trainability_smoke(self):
        # four users, each liking one private item
        th = init_model(4, 4, d=8, rng=np.random.default_rng(0))
        opt = init_optimizer(th, lr=0.05)
        users = np.repeat(np.arange(4), 3)
        pos = users.copy()
        neg = np.array([j for u in range(4) for j in range(4) if j != u])
        b = TripletBatch(users, pos, neg)
        for _ in range(500):
            apply_selected_update(th, opt, b, np.ones(len(b)))
        assert triplet_losses(th, users, pos, neg).mean() < 0.1

    def test_xavier_bound(self):
        th = init_model(50, 60, d=64, seed=0)
        bound = math.sqrt(6 / 128)
        assert np.abs(th.P).max() <= bound and np.abs(th.Q).max() <= bound

    def test_batch_sampling_from_dataset(self, small_dataset):
        b = make_batch(small_dataset, 16, np.random.default_rng(0))
        th = init_model(small_dataset.n_users, small_dataset.n_items, d=4, seed=0)
        opt = init_optimizer(th, lr=1e-2, weight_decay=1e-3)
        loss = apply_selected_update(th, opt, b, np.ones(16))
        assert loss > 0
