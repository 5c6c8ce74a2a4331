"""Interaction logs, k-core filtering, per-user splits and triplet batches."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import CacheFormatError, ConfigError, DataError, FilterError

_logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
UNKNOWN_CATEGORY = "unknown"
DEFAULT_MAX_BATCH = 4096


@dataclass(frozen=True, slots=True)
class RawInteraction:
    user_id: str
    item_id: str
    rating: float = 1.0
    timestamp: int = 0


class InteractionLog(list):
    """List of :class:`RawInteraction` that also remembers parse statistics."""

    def __init__(self, records=(), malformed=0, has_ratings=False):
        super().__init__(records)
        self.malformed = malformed
        self.has_ratings = has_ratings


def _split_line(line, delimiter):
    if delimiter is None:
        return line.split()
    return line.split(delimiter)


def load_interactions(path, delimiter="\t", strict=False):
    """Parse a delimiter-separated interaction file.

    Columns are ``user_id, item_id[, rating[, timestamp]]``. Lines starting
    with ``#`` and blank lines are skipped. A missing rating defaults to 1.0
    and a missing timestamp to 0. Malformed lines are counted and skipped,
    or raise :class:`DataError` when ``strict`` is set.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read interaction file {path}: {exc}") from exc

    records = []
    malformed = 0
    first_bad = None
    has_ratings = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in _split_line(line, delimiter)]
        try:
            if len(parts) < 2 or not parts[0] or not parts[1]:
                raise ValueError("fewer than two fields")
            rating = 1.0
            timestamp = 0
            if len(parts) >= 3 and parts[2]:
                rating = float(parts[2])
                has_ratings = True
                if not math.isfinite(rating):
                    raise ValueError("non-finite rating")
            if len(parts) >= 4 and parts[3]:
                timestamp = int(float(parts[3]))
        except ValueError as exc:
            malformed += 1
            if first_bad is None:
                first_bad = (lineno, line, str(exc))
            continue
        records.append(RawInteraction(parts[0], parts[1], rating, timestamp))

    if malformed:
        lineno, line, reason = first_bad
        if strict:
            raise DataError(f"{path}:{lineno}: malformed line {line!r} ({reason})")
        _logger.warning("%s: skipped %d malformed line(s); first at line %d", path, malformed, lineno)
    if not records:
        _logger.warning("%s: no interactions found", path)
    return InteractionLog(records, malformed=malformed, has_ratings=has_ratings)


@dataclass(frozen=True)
class Catalog:
    """Dense index bijections for users, items and categories."""

    user_ids: tuple
    item_ids: tuple
    categories: tuple = ()
    category_names: tuple = ()

    def __post_init__(self):
        if len(set(self.user_ids)) != len(self.user_ids):
            raise DataError("duplicate user ids in catalog")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise DataError("duplicate item ids in catalog")
        if not self.categories:
            # every item in one "unknown" category keeps CC/ILD total
            object.__setattr__(self, "categories", tuple(frozenset({0}) for _ in self.item_ids))
            object.__setattr__(self, "category_names", (UNKNOWN_CATEGORY,))
        if len(self.categories) != len(self.item_ids):
            raise DataError("categories must list one set per item")
        object.__setattr__(self, "user_index", {u: k for k, u in enumerate(self.user_ids)})
        object.__setattr__(self, "item_index", {i: k for k, i in enumerate(self.item_ids)})

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    @property
    def num_categories(self):
        return len(self.category_names)

    def with_categories(self, item_categories):
        """Return a copy whose categories come from ``item_categories``.

        ``item_categories`` maps external item id to an iterable of category
        names. Items absent from the map receive the ``unknown`` category.
        """
        names = []
        name_index = {}

        def code(name):
            if name not in name_index:
                name_index[name] = len(names)
                names.append(name)
            return name_index[name]

        cats = []
        for item in self.item_ids:
            labels = sorted(c for c in item_categories.get(item, ()) if c)
            if not labels:
                labels = [UNKNOWN_CATEGORY]
            cats.append(frozenset(code(c) for c in labels))
        return Catalog(self.user_ids, self.item_ids, tuple(cats), tuple(names))


def load_categories(path, delimiter="\t"):
    """Read ``item_id, category_1[, category_2 ...]`` rows into a dict."""
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in _split_line(line, delimiter)]
        if len(parts) < 2:
            continue
        out.setdefault(parts[0], set()).update(p for p in parts[1:] if p)
    return out


def binarize_and_filter(raw, rating_threshold=4.0, core=10):
    """Binarize ratings and apply iterative k-core filtering.

    Duplicate (user, item) rows collapse to their maximum rating before the
    threshold is applied. Users and items with fewer than ``core`` positives
    are removed repeatedly until nothing changes. Dense indices follow the
    first appearance of each surviving entity in ``raw``.

    Returns ``(catalog, positives)`` where ``positives[u]`` is a sorted int64
    array of item indices.
    """
    if len(raw) == 0:
        raise DataError("no interactions to filter")
    if core < 1:
        raise ConfigError("core must be >= 1")

    best = {}
    order = []
    for r in raw:
        key = (r.user_id, r.item_id)
        if key not in best:
            best[key] = r.rating
            order.append(key)
        elif r.rating > best[key]:
            best[key] = r.rating
    if rating_threshold is not None:
        order = [k for k in order if best[k] >= rating_threshold]

    user_codes = {}
    item_codes = {}
    for u, i in order:
        user_codes.setdefault(u, len(user_codes))
        item_codes.setdefault(i, len(item_codes))
    us = np.fromiter((user_codes[u] for u, _ in order), dtype=np.int64, count=len(order))
    its = np.fromiter((item_codes[i] for _, i in order), dtype=np.int64, count=len(order))

    keep = np.ones(len(order), dtype=bool)
    n_rounds = 0
    while True:
        ucount = np.bincount(us[keep], minlength=len(user_codes))
        icount = np.bincount(its[keep], minlength=len(item_codes))
        still = keep & (ucount[us] >= core) & (icount[its] >= core)
        if still.sum() == keep.sum():
            break
        n_rounds += 1
        last = (int((ucount > 0).sum()), int((icount > 0).sum()), int(keep.sum()))
        keep = still
        if not keep.any():
            raise FilterError(
                "dataset eliminated by filtering (core=%d); last surviving counts: "
                "%d users, %d items, %d interactions" % ((core,) + last)
            )
    if not keep.any():
        raise FilterError("dataset eliminated by filtering: no interactions above threshold")
    _logger.debug("k-core reached fixpoint after %d round(s)", n_rounds)

    kept = [order[k] for k in np.flatnonzero(keep)]
    users, items = {}, {}
    for u, i in kept:
        users.setdefault(u, len(users))
        items.setdefault(i, len(items))
    catalog = Catalog(tuple(users), tuple(items))
    per_user = [[] for _ in users]
    for u, i in kept:
        per_user[users[u]].append(items[i])
    positives = [np.array(sorted(p), dtype=np.int64) for p in per_user]
    return catalog, positives


@dataclass(eq=False)
class Dataset:
    """Per-user train/validation/test positives over a fixed catalog.

    ``positives(split)`` is the guarded accessor: every call is counted in
    ``split_reads`` so training code can prove it never touched test data.
    """

    train_pos: tuple
    val_pos: tuple
    test_pos: tuple
    catalog: Catalog
    seed: int = 0
    split_reads: dict = field(default_factory=lambda: {s: 0 for s in SPLITS}, repr=False)

    def __post_init__(self):
        m = self.catalog.n_users
        if not (len(self.train_pos) == len(self.val_pos) == len(self.test_pos) == m):
            raise DataError("per-user split lists must have one entry per user")
        self.train_pos = tuple(np.asarray(p, dtype=np.int64) for p in self.train_pos)
        self.val_pos = tuple(np.asarray(p, dtype=np.int64) for p in self.val_pos)
        self.test_pos = tuple(np.asarray(p, dtype=np.int64) for p in self.test_pos)
        for arr in self.train_pos + self.val_pos + self.test_pos:
            arr.setflags(write=False)
        n = self.catalog.n_items
        counts = np.array([len(p) for p in self.train_pos], dtype=np.int64)
        users = np.repeat(np.arange(m, dtype=np.int64), counts)
        items = np.concatenate(self.train_pos) if m else np.zeros(0, dtype=np.int64)
        self._train_pairs = np.stack([users, items], axis=1) if len(items) else np.zeros((0, 2), np.int64)
        self._train_pairs.setflags(write=False)
        self._train_counts = counts
        self._train_keys = np.sort(users * n + items)
        all_items = [np.concatenate([a, b, c]) for a, b, c in zip(self.train_pos, self.val_pos, self.test_pos)]
        all_counts = np.array([len(a) for a in all_items], dtype=np.int64)
        all_users = np.repeat(np.arange(m, dtype=np.int64), all_counts)
        flat = np.concatenate(all_items) if m else np.zeros(0, dtype=np.int64)
        self._all_keys = np.sort(all_users * n + flat)
        self._all_counts = all_counts

    @property
    def n_users(self):
        return self.catalog.n_users

    @property
    def n_items(self):
        return self.catalog.n_items

    @property
    def train_pairs(self):
        """(N, 2) array of (user, item) training pairs, user-major."""
        return self._train_pairs

    def positives(self, split):
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
        self.split_reads[split] += 1
        return {"train": self.train_pos, "val": self.val_pos, "test": self.test_pos}[split]

    def is_excluded(self, users, items, exclude="train"):
        """Vectorized membership test of (user, item) in the exclusion set."""
        keys = self._train_keys if exclude == "train" else self._all_keys
        q = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, len(keys) - 1) if len(keys) else pos
        return (keys[pos] == q) if len(keys) else np.zeros(q.shape, dtype=bool)

    def excluded_count(self, users, exclude="train"):
        counts = self._train_counts if exclude == "train" else self._all_counts
        return counts[np.asarray(users, dtype=np.int64)]

    def stats(self):
        n_inter = sum(len(a) + len(b) + len(c) for a, b, c in zip(self.train_pos, self.val_pos, self.test_pos))
        m, n = self.n_users, self.n_items
        return {
            "users": m,
            "items": n,
            "interactions": int(n_inter),
            "train": int(sum(len(a) for a in self.train_pos)),
            "val": int(sum(len(a) for a in self.val_pos)),
            "test": int(sum(len(a) for a in self.test_pos)),
            "density": n_inter / (m * n) if m and n else 0.0,
            "categories": self.catalog.num_categories,
        }


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def split(positives, ratios=(0.8, 0.1, 0.1), seed=0, catalog=None):
    """Shuffle each user's positives and cut them into train/val/test.

    Validation and test each receive ``round(ratio * n)`` items (half-up,
    at least one); training keeps the rest. Users are processed in index
    order from a single generator seeded with ``seed``.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    if catalog is None:
        n_items = 1 + max((int(p.max()) for p in positives if len(p)), default=-1)
        catalog = Catalog(tuple(str(u) for u in range(len(positives))), tuple(str(i) for i in range(n_items)))
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for u, items in enumerate(positives):
        items = np.asarray(items, dtype=np.int64)
        n = len(items)
        n_val = max(1, _round_half_up(ratios[1] * n))
        n_test = max(1, _round_half_up(ratios[2] * n))
        if n - n_val - n_test < 1:
            raise DataError(f"user {u} has {n} positives; too few to split into train/val/test")
        perm = items[rng.permutation(n)]
        val.append(np.sort(perm[:n_val]))
        test.append(np.sort(perm[n_val:n_val + n_test]))
        train.append(np.sort(perm[n_val + n_test:]))
    return Dataset(tuple(train), tuple(val), tuple(test), catalog, seed=int(seed))


def sample_negatives(dataset, u, count, rng, exclude="train"):
    """Draw ``count`` items uniformly from those not excluded for user ``u``."""
    if count < 0:
        raise ConfigError("count must be non-negative")
    if dataset.excluded_count([u], exclude)[0] >= dataset.n_items:
        raise DataError(f"no negative candidates for user {u}")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    users = np.full(count, u, dtype=np.int64)
    return _draw_negatives(dataset, users, rng, exclude)


def _draw_negatives(dataset, users, rng, exclude):
    n = dataset.n_items
    j = rng.integers(0, n, size=len(users))
    bad = dataset.is_excluded(users, j, exclude)
    while bad.any():
        idx = np.flatnonzero(bad)
        j[idx] = rng.integers(0, n, size=len(idx))
        bad[idx] = dataset.is_excluded(users[idx], j[idx], exclude)
    return j.astype(np.int64)


@dataclass(frozen=True)
class TripletBatch:
    """Aligned arrays of (user, positive item, negative item)."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    corrupted: np.ndarray | None = None

    def __post_init__(self):
        if not (len(self.users) == len(self.pos) == len(self.neg)):
            raise DataError("triplet arrays must have equal length")
        if len(self.users) < 1:
            raise DataError("a triplet batch needs at least one triplet")

    def __len__(self):
        return len(self.users)

    def subset(self, idx):
        idx = np.asarray(idx)
        corrupted = None if self.corrupted is None else self.corrupted[idx]
        return TripletBatch(self.users[idx], self.pos[idx], self.neg[idx], corrupted)

    def as_array(self):
        return np.stack([self.users, self.pos, self.neg], axis=1)


def make_batch(dataset, batch_size, rng, exclude="train", max_batch=DEFAULT_MAX_BATCH):
    """Sample training pairs uniformly and attach one uniform negative each."""
    if batch_size < 1 or batch_size > max_batch:
        raise ConfigError(f"batch_size must lie in [1, {max_batch}], got {batch_size}")
    pairs = dataset.train_pairs
    if len(pairs) == 0:
        raise DataError("dataset has no training pairs")
    idx = rng.integers(0, len(pairs), size=batch_size)
    users = pairs[idx, 0].copy()
    pos = pairs[idx, 1].copy()
    if (dataset.excluded_count(users, exclude) >= dataset.n_items).any():
        raise DataError("no negative candidates for a sampled user")
    neg = _draw_negatives(dataset, users, rng, exclude)
    return TripletBatch(users, pos, neg)


# --- prepared-dataset cache ----------------------------------------------

CACHE_MAGIC = b"DVR1"
CACHE_VERSION = 1


def _pairs(per_user):
    counts = np.array([len(p) for p in per_user], dtype=np.int64)
    users = np.repeat(np.arange(len(per_user), dtype=np.int64), counts)
    items = np.concatenate(per_user) if len(per_user) else np.zeros(0, np.int64)
    return np.stack([users, items.astype(np.int64)], axis=1)


def _unpairs(pairs, m):
    out = [[] for _ in range(m)]
    for u, i in pairs:
        out[u].append(i)
    return tuple(np.array(sorted(x), dtype=np.int64) for x in out)


def save_dataset(path, dataset):
    """Write ``dataset`` to the versioned DVR1 container."""
    cat = dataset.catalog
    tr, va, te = _pairs(dataset.train_pos), _pairs(dataset.val_pos), _pairs(dataset.test_pos)
    cat_pairs = np.array(
        [(i, c) for i, cs in enumerate(cat.categories) for c in sorted(cs)], dtype=np.int64
    ).reshape(-1, 2)
    meta = json.dumps(
        {"users": list(cat.user_ids), "items": list(cat.item_ids), "categories": list(cat.category_names)},
        ensure_ascii=False,
        separators=(",", ":"),
    ).encode("utf-8")
    header = np.array(
        [CACHE_VERSION, cat.n_users, cat.n_items, len(tr), len(va), len(te), len(cat_pairs),
         cat.num_categories, dataset.seed, len(meta)],
        dtype="<i8",
    )
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(header.tobytes())
        for arr in (tr, va, te, cat_pairs):
            fh.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        fh.write(meta)


def load_dataset(path):
    """Read a DVR1 container written by :func:`save_dataset`."""
    blob = Path(path).read_bytes()
    if blob[:4] != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: not a prepared-dataset cache (bad magic)")
    hsize = 10 * 8
    if len(blob) < 4 + hsize:
        raise CacheFormatError(f"{path}: truncated header")
    header = np.frombuffer(blob, dtype="<i8", count=10, offset=4)
    version, m, n, ntr, nva, nte, ncat, ncats, seed, nmeta = (int(x) for x in header)
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {version}")
    expected = 4 + hsize + 16 * (ntr + nva + nte + ncat) + nmeta
    if len(blob) != expected:
        raise CacheFormatError(f"{path}: size {len(blob)} does not match header ({expected})")
    off = 4 + hsize
    arrays = []
    for k in (ntr, nva, nte, ncat):
        arrays.append(np.frombuffer(blob, dtype="<i8", count=2 * k, offset=off).reshape(k, 2).astype(np.int64))
        off += 16 * k
    meta = json.loads(blob[off:off + nmeta].decode("utf-8"))
    cats = [set() for _ in range(n)]
    for i, c in arrays[3]:
        cats[i].add(int(c))
    catalog = Catalog(
        tuple(meta["users"]), tuple(meta["items"]),
        tuple(frozenset(c) for c in cats), tuple(meta["categories"]),
    )
    if catalog.n_users != m or catalog.n_items != n or catalog.num_categories != ncats:
        raise CacheFormatError(f"{path}: catalog does not match header counts")
    return Dataset(_unpairs(arrays[0], m), _unpairs(arrays[1], m), _unpairs(arrays[2], m), catalog, seed=seed)


def prepare(raw, rating_threshold=4.0, core=10, ratios=(0.8, 0.1, 0.1), seed=0, item_categories=None):
    """Binarize, k-core filter, attach categories and split in one call."""
    catalog, positives = binarize_and_filter(raw, rating_threshold=rating_threshold, core=core)
    if item_categories is not None:
        catalog = catalog.with_categories(item_categories)
    return split(positives, ratios=ratios, seed=seed, catalog=catalog)


def from_pairs(pairs: Sequence, n_users=None, n_items=None, ratios=(0.8, 0.1, 0.1), seed=0):
    """Build a Dataset from already-indexed (user, item) pairs, no filtering."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    m = int(pairs[:, 0].max()) + 1 if n_users is None else n_users
    n = int(pairs[:, 1].max()) + 1 if n_items is None else n_items
    per_user = [set() for _ in range(m)]
    for u, i in pairs:
        per_user[u].add(int(i))
    catalog = Catalog(tuple(str(u) for u in range(m)), tuple(str(i) for i in range(n)))
    positives = [np.array(sorted(p), dtype=np.int64) for p in per_user]
    return split(positives, ratios=ratios, seed=seed, catalog=catalog)

