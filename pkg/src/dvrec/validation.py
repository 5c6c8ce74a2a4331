"""Input checks shared by the estimator wrappers and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DataError, StructureError


def check_interactions(X, min_columns=2):
    """Return ``X`` as a 2-D float array of (user, item[, rating[, timestamp]]) rows."""
    try:
        arr = check_array(X, dtype=np.float64, ensure_2d=True, ensure_min_samples=1)
    except ValueError as exc:
        raise DataError(f"invalid interaction array: {exc}") from exc
    if not min_columns <= arr.shape[1] <= 4:
        raise DataError(f"interaction rows need {min_columns} to 4 columns, got {arr.shape[1]}")
    return arr


def check_index_pairs(X, n_users=None, n_items=None):
    """Integer (user, item) index pairs, range-checked against the catalog."""
    arr = check_interactions(X)[:, :2]
    if not np.all(arr == np.round(arr)):
        raise DataError("user and item indices must be integers")
    pairs = arr.astype(np.int64)
    if pairs.min() < 0:
        raise DataError("indices must be non-negative")
    if n_users is not None and pairs[:, 0].max() >= n_users:
        raise DataError(f"user index out of range (n_users={n_users})")
    if n_items is not None and pairs[:, 1].max() >= n_items:
        raise DataError(f"item index out of range (n_items={n_items})")
    return pairs


def check_triplets(X, n_users, n_items):
    """Integer (u, i, j) rows as three index arrays."""
    try:
        arr = check_array(X, dtype=None, ensure_2d=True, ensure_min_samples=1)
    except ValueError as exc:
        raise DataError(f"invalid triplet array: {exc}") from exc
    if arr.shape[1] != 3:
        raise StructureError(f"triplets need exactly 3 columns, got {arr.shape[1]}")
    arr = check_index_pairs(arr[:, [0, 1]], n_users, n_items), check_index_pairs(arr[:, [0, 2]], n_users, n_items)
    return arr[0][:, 0], arr[0][:, 1], arr[1][:, 1]


def check_users(users, n_users):
    users = np.atleast_1d(np.asarray(users))
    if users.ndim != 1 or not np.issubdtype(users.dtype, np.integer):
        raise DataError("users must be a 1-D integer array")
    if users.size and (users.min() < 0 or users.max() >= n_users):
        raise DataError(f"user index out of range (n_users={n_users})")
    return users.astype(np.int64)
