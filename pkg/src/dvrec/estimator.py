"""scikit-learn style wrappers around preparation and training.

``InteractionFilter`` turns raw (user, item, rating) rows into dense index
pairs; ``DVRRecommender`` fits the bilevel trainer and exposes scoring,
top-K recommendation and batch valuation.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import adapter, metrics
from . import valuator as val
from .data import Dataset, RawInteraction, TripletBatch, binarize_and_filter, from_pairs
from .exceptions import StructureError
from .recmodel import score as _score
from .trainer import TrainConfig, Trainer
from .validation import check_index_pairs, check_interactions, check_triplets, check_users


class InteractionFilter(TransformerMixin, BaseEstimator):
    """Binarize ratings and k-core filter; maps surviving rows to index pairs.

    ``fit`` learns the surviving user and item vocabularies. ``transform``
    keeps rows whose user and item both survived and whose rating clears
    the threshold, returning an ``(k, 2)`` int64 array of dense indices.
    """

    def __init__(self, rating_threshold=4.0, core=10):
        self.rating_threshold = rating_threshold
        self.core = core

    def fit(self, X, y=None):
        rows = check_interactions(X)
        raw = [RawInteraction(_key(r[0]), _key(r[1]), float(r[2]) if len(r) > 2 else 1.0) for r in rows]
        catalog, positives = binarize_and_filter(raw, self.rating_threshold, self.core)
        self.catalog_ = catalog
        self.user_index_ = {u: k for k, u in enumerate(catalog.user_ids)}
        self.item_index_ = {i: k for k, i in enumerate(catalog.item_ids)}
        self.n_interactions_ = int(sum(len(p) for p in positives))
        return self

    def transform(self, X):
        check_is_fitted(self, "catalog_")
        rows = check_interactions(X)
        out = []
        seen = set()
        for r in rows:
            if self.rating_threshold is not None and len(r) > 2 and r[2] < self.rating_threshold:
                continue
            u = self.user_index_.get(_key(r[0]))
            i = self.item_index_.get(_key(r[1]))
            if u is None or i is None or (u, i) in seen:
                continue
            seen.add((u, i))
            out.append((u, i))
        return np.array(out, dtype=np.int64).reshape(-1, 2)


def _key(x):
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


class DVRRecommender(BaseEstimator):
    """Recommender trained with Shapley-based sample selection.

    ``fit`` accepts a prepared :class:`~dvrec.data.Dataset` or an array of
    dense (user, item) index pairs, which is split 8:1:1 with ``seed``.
    With ``use_valuator=False`` training reduces to plain BPR.
    """

    def __init__(self, seed=0, d=64, backbone="mf", lr=1e-3, weight_decay=1e-5, valuator_lr=1e-3,
                 outer_batch=256, inner_batch=256, inner_iters=1, epochs=10, pretrain_epochs=0, k=20,
                 metric="ndcg", use_valuator=True, shapley_sign=1, epsilon=0.05, patience=5,
                 reward_users=256):
        self.seed = seed
        self.d = d
        self.backbone = backbone
        self.lr = lr
        self.weight_decay = weight_decay
        self.valuator_lr = valuator_lr
        self.outer_batch = outer_batch
        self.inner_batch = inner_batch
        self.inner_iters = inner_iters
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.k = k
        self.metric = metric
        self.use_valuator = use_valuator
        self.shapley_sign = shapley_sign
        self.epsilon = epsilon
        self.patience = patience
        self.reward_users = reward_users

    def _config(self):
        p = self.get_params()
        p["valuator"] = p.pop("use_valuator")
        return TrainConfig(**p)

    def fit(self, X, y=None):
        config = self._config()
        dataset = X if isinstance(X, Dataset) else from_pairs(check_index_pairs(X), seed=self.seed)
        trainer = Trainer(config, dataset)
        trainer.pretrain()
        trainer.run()
        result = trainer.result(restore_best=True)
        self.dataset_ = dataset
        self.trainer_ = trainer
        self.theta_ = result.theta
        self.valuator_ = result.valuator
        self.best_metric_ = result.best_metric
        self.n_users_, self.n_items_ = dataset.n_users, dataset.n_items
        return self

    def predict(self, X):
        """Scores f(u, i) for (user, item) index pairs."""
        check_is_fitted(self, "theta_")
        pairs = check_index_pairs(X, self.n_users_, self.n_items_)
        return _score(self.theta_, pairs[:, 0], pairs[:, 1])

    def recommend(self, users, k=None):
        """Top-``k`` unseen items per user, shape (len(users), k)."""
        check_is_fitted(self, "theta_")
        users = check_users(users, self.n_users_)
        k = self.k if k is None else k
        return np.array(metrics.rank_all(self.theta_, self.dataset_.train_pos, users, k))

    def score(self, X=None, y=None):
        """Validation NDCG@k of the fitted model (``X`` is ignored)."""
        check_is_fitted(self, "theta_")
        return metrics.evaluate(self.theta_, self.dataset_, "val", self.k, ("ndcg",), seed=self.seed)["ndcg"]

    def transform(self, X):
        """Shapley values and selection probabilities for one batch of triplets.

        ``X`` must hold exactly ``outer_batch`` (u, i, j) rows. Returns an
        ``(outer_batch, 2)`` array with columns phi and w_hat.
        """
        check_is_fitted(self, "theta_")
        if self.valuator_ is None:
            raise StructureError("the model was fitted without a valuator")
        users, pos, neg = check_triplets(X, self.n_users_, self.n_items_)
        trace = val.forward(self.valuator_, self.theta_, TripletBatch(users, pos, neg))
        phi, w_hat = adapter.selection_policy(self.valuator_, trace, None, self.epsilon, self.shapley_sign)
        return np.column_stack([phi, w_hat])
