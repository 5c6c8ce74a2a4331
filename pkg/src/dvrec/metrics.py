"""Full-ranking top-K evaluation: Recall, NDCG, CC, ILD and Gini."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError
from .recmodel import softplus

# metric name -> direction of improvement
METRICS = {
    "loss": "minimize",
    "recall": "maximize",
    "ndcg": "maximize",
    "cc": "maximize",
    "ild": "maximize",
    "gini": "minimize",
}
RANKING_METRICS = ("recall", "ndcg", "cc", "ild", "gini")


def rank_all(theta, train_pos, users, k):
    """Top-``k`` items per user with training positives excluded.

    Ties are broken by ascending item index. Returns a list of int arrays,
    each of length ``min(k, n - |train_pos(u)|)``.
    """
    P, Q = theta.embeddings()
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    scores = P[users] @ Q.T
    return rank_scores(scores, [train_pos[u] for u in users], k)


def rank_scores(scores, exclusions, k):
    scores = np.array(scores, dtype=np.float64, copy=True)
    n = scores.shape[1]
    out = []
    for row, excl in zip(scores, exclusions):
        row[excl] = -np.inf
        order = np.argsort(-row, kind="stable")
        limit = min(k, n - len(np.unique(excl)))
        out.append(order[:limit].astype(np.int64))
    return out


def recall_at_k(ranked, targets):
    """Fraction of targets retrieved; None when there are no targets."""
    targets = set(int(t) for t in targets)
    if not targets:
        return None
    hits = sum(1 for x in ranked if int(x) in targets)
    return hits / len(targets)


def ndcg_at_k(ranked, targets, k=None):
    targets = set(int(t) for t in targets)
    if not targets:
        return None
    k = len(ranked) if k is None else k
    dcg = sum(1.0 / math.log2(r + 2) for r, x in enumerate(ranked[:k]) if int(x) in targets)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(targets))))
    return dcg / idcg


def category_coverage(ranked, categories, num_categories):
    if num_categories < 1:
        raise ConfigError("catalog has no categories")
    seen = set()
    for x in ranked:
        seen |= categories[int(x)]
    return len(seen) / num_categories


def jaccard_distance(a, b):
    union = len(a | b)
    return 0.0 if union == 0 else 1.0 - len(a & b) / union


def intra_list_distance(ranked, categories):
    """Mean pairwise Jaccard distance of category sets; None below 2 items."""
    k = len(ranked)
    if k < 2:
        return None
    sets = [categories[int(x)] for x in ranked]
    total = 0.0
    for a in range(k):
        for b in range(a + 1, k):
            total += jaccard_distance(sets[a], sets[b])
    return 2.0 * total / (k * (k - 1))


def gini_index(exposure):
    """Gini coefficient of per-item exposure counts over the whole catalog."""
    x = np.sort(np.asarray(exposure, dtype=np.float64))
    n = len(x)
    total = x.sum()
    if n == 0 or total <= 0:
        raise ValueError("Gini index is undefined for zero total exposure")
    ranks = np.arange(1, n + 1)
    return float(np.sum((2 * ranks - n - 1) * x) / (n * total))


def validation_bpr_loss(theta, dataset, split="val", seed=0, users=None):
    """Mean BPR loss over held-out pairs with fixed-seed uniform negatives."""
    from .data import _draw_negatives

    held = dataset.positives(split)
    users_all = np.arange(dataset.n_users) if users is None else np.asarray(users, dtype=np.int64)
    us = np.concatenate([np.full(len(held[u]), u, dtype=np.int64) for u in users_all])
    its = np.concatenate([held[u] for u in users_all])
    if len(us) == 0:
        raise ValueError(f"split {split!r} has no pairs for the requested users")
    rng = np.random.default_rng(seed)
    js = _draw_negatives(dataset, us, rng, "all")
    P, Q = theta.embeddings()
    x = np.sum(P[us] * Q[its], axis=1) - np.sum(P[us] * Q[js], axis=1)
    return float(np.mean(softplus(-x)))


@dataclass
class MetricReport:
    values: dict
    per_user: dict = field(default_factory=dict, repr=False)
    split: str = "val"
    k: int = 20
    seed: int = 0
    epoch: int | None = None

    def __getitem__(self, name):
        return self.values[name]

    def to_json(self):
        return {
            "split": self.split,
            "k": self.k,
            "seed": self.seed,
            "epoch": self.epoch,
            "metrics": {f"{name}@{self.k}" if name != "loss" else name: float(v) for name, v in self.values.items()},
        }

    def csv_rows(self):
        for name, v in self.values.items():
            yield {"epoch": self.epoch, "split": self.split, "metric": name, "k": self.k, "value": float(v)}


def _threads():
    try:
        return max(1, int(os.environ.get("DVR_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(theta, dataset, split="val", k=20, metrics=RANKING_METRICS, user_sample=None, seed=0,
             epoch=None, threads=None, chunk=1024):
    """Rank every (sampled) user once and average per-user metrics.

    Users without targets (or with a single-item list for ILD) are left out
    of the corresponding average. Gini pools exposure over all ranked lists.
    """
    if split not in ("val", "test"):
        raise ConfigError(f"evaluation split must be 'val' or 'test', got {split!r}")
    metrics = tuple(metrics)
    for name in metrics:
        if name not in METRICS:
            raise ConfigError(f"unknown metric {name!r}")
    targets = dataset.positives(split)
    train = dataset.train_pos
    users = np.flatnonzero([len(t) > 0 for t in targets])
    if len(users) == 0:
        raise ValueError(f"split {split!r} is empty")
    if user_sample is not None and user_sample < len(users):
        rng = np.random.default_rng(seed)
        users = np.sort(rng.choice(users, size=user_sample, replace=False))

    values, per_user = {}, {}
    ranking = [m for m in metrics if m != "loss"]
    if ranking:
        P, Q = theta.embeddings()
        chunks = [users[a:a + chunk] for a in range(0, len(users), chunk)]

        def work(us):
            return rank_scores(P[us] @ Q.T, [train[u] for u in us], k)

        threads = _threads() if threads is None else threads
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(work, chunks))
        else:
            parts = [work(us) for us in chunks]
        lists = [lst for part in parts for lst in part]

        cats = dataset.catalog.categories
        ncat = dataset.catalog.num_categories
        funcs = {
            "recall": lambda lst, u: recall_at_k(lst, targets[u]),
            "ndcg": lambda lst, u: ndcg_at_k(lst, targets[u], k),
            "cc": lambda lst, u: category_coverage(lst, cats, ncat),
            "ild": lambda lst, u: intra_list_distance(lst, cats),
        }
        for name in ranking:
            if name == "gini":
                exposure = np.zeros(dataset.n_items)
                for lst in lists:
                    exposure[lst] += 1
                values[name] = gini_index(exposure)
                continue
            vals = np.array([np.nan if (r := funcs[name](lst, u)) is None else r for lst, u in zip(lists, users)])
            per_user[name] = vals
            values[name] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
    if "loss" in metrics:
        values["loss"] = validation_bpr_loss(theta, dataset, split, seed=seed, users=users)
    ordered = {m: values[m] for m in metrics}
    return MetricReport(ordered, per_user, split, k, seed, epoch)
