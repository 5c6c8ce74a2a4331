"""Synthetic datasets with known structure for smoke tests and experiments."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Catalog, TripletBatch, split


@dataclass
class PlantedNoise:
    """A two-block preference dataset plus the pools used to corrupt negatives.

    ``held_out[u]`` lists the user's true positives that are not training
    positives (validation/test items and unobserved in-block items).
    """

    dataset: object
    held_out: tuple
    rate: float = 0.2

    def corruptor(self, batch, rng):
        """Replace each negative, with probability ``rate``, by a held-out true positive."""
        flip = rng.random(len(batch)) < self.rate
        neg = batch.neg.copy()
        for m in np.flatnonzero(flip):
            pool = self.held_out[batch.users[m]]
            neg[m] = pool[rng.integers(len(pool))]
        return TripletBatch(batch.users, batch.pos, neg, flip)


def planted_noise(seed=0, n_users=200, n_items=100, observed=40, rate=0.2):
    """Users and items split into two blocks; users like every item of their block.

    Each user observes ``observed`` random items from their own block; the
    observed set is split 8:1:1.
    """
    rng = np.random.default_rng(seed)
    half_u, half_i = n_users // 2, n_items // 2
    if observed > half_i:
        raise ValueError("cannot observe more items than the block holds")
    positives = []
    blocks = []
    for u in range(n_users):
        block = np.arange(half_i) if u < half_u else np.arange(half_i, n_items)
        blocks.append(block)
        positives.append(np.sort(rng.choice(block, size=observed, replace=False)))
    catalog = Catalog(
        tuple(f"u{u}" for u in range(n_users)),
        tuple(f"i{i}" for i in range(n_items)),
        tuple(frozenset({0 if i < half_i else 1}) for i in range(n_items)),
        ("block_a", "block_b"),
    )
    ds = split(positives, seed=seed, catalog=catalog)
    held = tuple(np.setdiff1d(blocks[u], ds.train_pos[u]) for u in range(n_users))
    return PlantedNoise(ds, held, rate)


def write_movielens_like(directory, seed=0, n_users=943, n_items=1682, n_ratings=100_000, n_genres=19, rank=8):
    """Write a MovieLens-100K-shaped rating log and genre file.

    Ratings (1-5) come from a low-rank latent model with Zipf item popularity
    and heavy-tailed user activity (at least 20 ratings per user). Returns the
    paths ``(ratings, genres)``; the ratings file is tab-separated
    ``user, item, rating, timestamp`` like ``u.data``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    genres = rng.integers(0, n_genres, size=n_items)
    U = rng.normal(size=(n_users, rank))
    V = rng.normal(size=(n_items, rank))
    # genre offsets give item factors categorical structure
    V += rng.normal(scale=1.0, size=(n_genres, rank))[genres]

    pop = 1.0 / np.arange(1, n_items + 1) ** 0.8
    pop = pop[rng.permutation(n_items)]
    pop /= pop.sum()
    activity = rng.pareto(1.2, size=n_users) + 1.0
    counts = np.maximum(20, np.round(activity / activity.sum() * n_ratings)).astype(int)
    counts = np.minimum(counts, n_items // 2)

    rows = []
    for u in range(n_users):
        affinity = V @ U[u]
        w = pop * np.exp(0.5 * affinity / np.sqrt(rank))
        w /= w.sum()
        items = rng.choice(n_items, size=counts[u], replace=False, p=w)
        z = affinity[items] / np.sqrt(rank) + rng.normal(scale=0.7, size=len(items))
        ratings = np.clip(np.round(3.3 + 1.1 * z), 1, 5).astype(int)
        ts = 874_724_710 + rng.integers(0, 20_000_000, size=len(items))
        rows.extend(zip([u + 1] * len(items), items + 1, ratings, ts))
    order = rng.permutation(len(rows))
    ratings_path = directory / "u.data"
    with open(ratings_path, "w", encoding="utf-8") as fh:
        for k in order:
            u, i, r, t = rows[k]
            fh.write(f"{u}\t{i}\t{r}\t{t}\n")

    genre_path = directory / "u.genre"
    with open(genre_path, "w", encoding="utf-8") as fh:
        for i in range(n_items):
            labels = {genres[i]}
            if rng.random() < 0.4:
                labels.add(int(rng.integers(n_genres)))
            fh.write("\t".join([str(i + 1)] + [f"g{g}" for g in sorted(labels)]) + "\n")
    return ratings_path, genre_path
