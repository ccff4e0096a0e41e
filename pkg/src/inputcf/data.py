"""Sparse interaction storage, dataset ingestion, splits, negative sampling.

An interaction matrix holds one entry per observed (user, item) pair. A stored
value is always strictly positive: zero means "unknown" and is never stored.
Entries live in a fixed canonical order (sorted by user, then item), and a
column-major permutation of the same entry set provides per-item access, so
row and column views always describe identical data.
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

from .rng import STREAM_NEGATIVES, STREAM_SPLIT, stream

INGEST_FORMATS = ("movielens-tab", "movielens-double-colon", "csv")


class InteractionMatrix:
    """Immutable sparse m x n matrix of user/item interactions.

    Entries are stored in row-major (CSR-like) canonical order; ``csc_order``
    permutes them into column-major (CSC-like) order. Learnable input values
    align one-to-one with these orders.
    """

    def __init__(self, m, n, users, items, values, timestamps=None,
                 user_ids=None, item_ids=None):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if not (users.shape == items.shape == values.shape) or users.ndim != 1:
            raise ValueError("users, items, values must be equal-length 1-D arrays")
        if users.size and (users.min() < 0 or users.max() >= m):
            raise ValueError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= n):
            raise ValueError("item index out of range")
        if np.any(values <= 0):
            raise ValueError("stored interaction values must be strictly positive")
        if timestamps is not None:
            timestamps = np.asarray(timestamps, dtype=np.int64)
            if timestamps.shape != users.shape:
                raise ValueError("timestamps length mismatch")

        # Canonical row-major order, and reject duplicate (user, item) pairs.
        order = np.lexsort((items, users))
        users, items, values = users[order], items[order], values[order]
        if timestamps is not None:
            timestamps = timestamps[order]
        if users.size > 1:
            same = (users[1:] == users[:-1]) & (items[1:] == items[:-1])
            if np.any(same):
                dup = int(np.flatnonzero(same)[0])
                raise ValueError(f"duplicate (user,item) pair ({users[dup]},{items[dup]})")

        self.m = int(m)
        self.n = int(n)
        self.users = users
        self.items = items
        self.values = values
        self.timestamps = timestamps
        self.user_ids = user_ids  # raw id per dense index, or None
        self.item_ids = item_ids

        self.csr_indptr = np.zeros(self.m + 1, dtype=np.int64)
        np.add.at(self.csr_indptr, users + 1, 1)
        np.cumsum(self.csr_indptr, out=self.csr_indptr)
        # Column-major permutation of the same entries.
        self.csc_order = np.lexsort((users, items))
        self.csc_indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.add.at(self.csc_indptr, items + 1, 1)
        np.cumsum(self.csc_indptr, out=self.csc_indptr)
        self._mask = None

    @property
    def nnz(self) -> int:
        return self.values.size

    def user_slice(self, j):
        """(item indices, entry positions) of user j's row, canonical order."""
        lo, hi = self.csr_indptr[j], self.csr_indptr[j + 1]
        return self.items[lo:hi], np.arange(lo, hi)

    def item_slice(self, k):
        """(user indices, column-order entry positions) of item k's column."""
        lo, hi = self.csc_indptr[k], self.csc_indptr[k + 1]
        return self.users[self.csc_order[lo:hi]], np.arange(lo, hi)

    def position_of(self, j, k):
        """Canonical entry position of (j, k), or None if structurally absent."""
        lo, hi = self.csr_indptr[j], self.csr_indptr[j + 1]
        row_items = self.items[lo:hi]
        i = np.searchsorted(row_items, k)
        if i < row_items.size and row_items[i] == k:
            return int(lo + i)
        return None

    def dense_mask(self) -> np.ndarray:
        """Boolean m x n interaction mask (cached; desk-scale datasets only)."""
        if self._mask is None:
            mask = np.zeros((self.m, self.n), dtype=bool)
            mask[self.users, self.items] = True
            self._mask = mask
        return self._mask

    def dense_row(self, j) -> np.ndarray:
        row = np.zeros(self.n, dtype=np.float64)
        lo, hi = self.csr_indptr[j], self.csr_indptr[j + 1]
        row[self.items[lo:hi]] = self.values[lo:hi]
        return row

    def with_entries(self, keep_positions) -> "InteractionMatrix":
        """Same-shape matrix holding only the given canonical positions."""
        keep_positions = np.asarray(keep_positions, dtype=np.int64)
        return InteractionMatrix(
            self.m, self.n,
            self.users[keep_positions], self.items[keep_positions],
            self.values[keep_positions],
            None if self.timestamps is None else self.timestamps[keep_positions],
            user_ids=self.user_ids, item_ids=self.item_ids,
        )

    def id_map_hash(self) -> str:
        """Stable hash of (m, n, raw id maps); guards checkpoint/data pairing."""
        h = hashlib.sha256()
        h.update(f"{self.m},{self.n};".encode())
        for ids in (self.user_ids, self.item_ids):
            if ids is None:
                h.update(b"none;")
            else:
                h.update(";".join(str(i) for i in ids).encode())
                h.update(b";")
        return h.hexdigest()


@dataclass
class LearnableInputSet:
    """Trainable input values aligned with the non-zero pattern of a matrix.

    ``u_values[p]`` is the input weight of canonical entry p (user-side view);
    ``v_values[q]`` is the weight of column-order entry q (item-side view).
    Positions outside the pattern do not exist here and can never be read or
    updated. Total learnable inputs = 2 * nnz.
    """

    pattern: InteractionMatrix
    u_values: np.ndarray
    v_values: np.ndarray
    init_mode: str
    value_max: float

    def initial_u_values(self) -> np.ndarray:
        return _initial_values(self.pattern.values, self.init_mode, self.value_max,
                               self.u_values.dtype)

    def initial_v_values(self) -> np.ndarray:
        vals = self.pattern.values[self.pattern.csc_order]
        return _initial_values(vals, self.init_mode, self.value_max, self.v_values.dtype)

    def get_user_input(self, j, k):
        """Current U value at (j, k), or None when structurally absent."""
        pos = self.pattern.position_of(j, k)
        return None if pos is None else float(self.u_values[pos])

    def get_item_input(self, k, j):
        """Current V value at (item k, user j), or None when absent."""
        pos = self.pattern.position_of(j, k)
        if pos is None:
            return None
        inv = getattr(self, "_csc_inverse", None)
        if inv is None:
            # csc_order is a permutation; invert it once and cache.
            inv = np.empty_like(self.pattern.csc_order)
            inv[self.pattern.csc_order] = np.arange(self.pattern.csc_order.size)
            self._csc_inverse = inv
        return float(self.v_values[inv[pos]])


def _initial_values(raw, mode, value_max, dtype):
    if mode == "ratings":
        return (raw / value_max).astype(dtype)
    if mode == "implicit":
        return np.ones(raw.size, dtype=dtype)
    raise ValueError(f"unknown input init mode: {mode!r}")


def init_inputs(matrix: InteractionMatrix, mode: str, value_max: float = 5.0,
                dtype=np.float32) -> LearnableInputSet:
    """Initial input weights: ratings / value_max, or all ones for implicit."""
    u = _initial_values(matrix.values, mode, value_max, np.dtype(dtype))
    v = _initial_values(matrix.values[matrix.csc_order], mode, value_max, np.dtype(dtype))
    return LearnableInputSet(pattern=matrix, u_values=u, v_values=v,
                             init_mode=mode, value_max=float(value_max))


@dataclass
class SplitBundle:
    train: InteractionMatrix
    validation: InteractionMatrix
    test: InteractionMatrix
    protocol: str
    seed: int | None


def _sorted_unique_ids(raw_ids):
    """Deterministic raw-id ordering: numeric when every id parses as int."""
    unique = sorted(set(raw_ids))
    try:
        return sorted(unique, key=int)
    except ValueError:
        return unique


def ingest(path, format: str) -> InteractionMatrix:
    """Parse an interactions file into a matrix with dense 0-based indices.

    Raw user/item ids are remapped to dense indices (sorted raw-id order); the
    mapping is kept on the matrix for sidecar persistence. Duplicate
    (user, item) pairs keep the latest timestamp with a warning. Ratings from
    the movielens formats are validated to lie in [1, 5].
    """
    if format not in INGEST_FORMATS:
        raise ValueError(f"unknown format {format!r}, expected one of {INGEST_FORMATS}")
    records = []  # (raw_user, raw_item, value, timestamp or None)
    if format == "csv":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise ValueError(f"{path}: no interactions")
            cols = [c.strip().lower() for c in header]
            if cols[:3] != ["user", "item", "rating"]:
                raise ValueError(f"{path}: line 1: expected header user,item,rating[,timestamp]")
            has_ts = len(cols) > 3 and cols[3] == "timestamp"
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    value = float(row[2])
                    ts = int(row[3]) if has_ts else None
                except (IndexError, ValueError) as exc:
                    raise ValueError(f"{path}: line {lineno}: malformed record: {row!r}") from exc
                records.append((row[0].strip(), row[1].strip(), value, ts))
    else:
        sep = "\t" if format == "movielens-tab" else "::"
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split(sep)
                if len(parts) != 4:
                    raise ValueError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
                try:
                    value = float(parts[2])
                    ts = int(parts[3])
                except ValueError as exc:
                    raise ValueError(f"{path}: line {lineno}: malformed record: {line!r}") from exc
                if not 1.0 <= value <= 5.0:
                    raise ValueError(f"{path}: line {lineno}: rating {value} outside [1, 5]")
                records.append((parts[0].strip(), parts[1].strip(), value, ts))

    if not records:
        raise ValueError(f"{path}: no interactions")

    user_ids = _sorted_unique_ids(r[0] for r in records)
    item_ids = _sorted_unique_ids(r[1] for r in records)
    user_index = {raw: i for i, raw in enumerate(user_ids)}
    item_index = {raw: i for i, raw in enumerate(item_ids)}

    best = {}  # (user, item) -> (value, timestamp)
    duplicates = 0
    for raw_u, raw_i, value, ts in records:
        key = (user_index[raw_u], item_index[raw_i])
        if key in best:
            duplicates += 1
            if ts is not None and (best[key][1] is None or ts >= best[key][1]):
                best[key] = (value, ts)
        else:
            best[key] = (value, ts)
    if duplicates:
        warnings.warn(f"{path}: {duplicates} duplicate (user,item) records; kept latest timestamp")

    keys = sorted(best)
    users = np.array([k[0] for k in keys], dtype=np.int64)
    items = np.array([k[1] for k in keys], dtype=np.int64)
    values = np.array([best[k][0] for k in keys], dtype=np.float64)
    ts_list = [best[k][1] for k in keys]
    timestamps = None if any(t is None for t in ts_list) else np.array(ts_list, dtype=np.int64)
    return InteractionMatrix(len(user_ids), len(item_ids), users, items, values,
                             timestamps, user_ids=user_ids, item_ids=item_ids)


def write_id_maps(matrix: InteractionMatrix, user_path, item_path) -> None:
    """Persist the raw-id -> dense-index sidecar mappings as CSV."""
    for path, ids in ((user_path, matrix.user_ids), (item_path, matrix.item_ids)):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["raw_id", "dense_index"])
            for idx, raw in enumerate(ids if ids is not None else []):
                writer.writerow([raw, idx])


def write_entries(matrix: InteractionMatrix, path) -> None:
    """Write interactions as a CSV entry list readable by ingest("csv").

    Uses the original raw ids when the matrix has them, dense indices
    otherwise; the timestamp column appears only when timestamps exist.
    """
    has_ts = matrix.timestamps is not None
    user_ids = matrix.user_ids if matrix.user_ids is not None \
        else [str(i) for i in range(matrix.m)]
    item_ids = matrix.item_ids if matrix.item_ids is not None \
        else [str(i) for i in range(matrix.n)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "item", "rating", "timestamp"] if has_ts
                        else ["user", "item", "rating"])
        for pos in range(matrix.nnz):
            row = [user_ids[matrix.users[pos]], item_ids[matrix.items[pos]],
                   f"{matrix.values[pos]:.10g}"]
            if has_ts:
                row.append(int(matrix.timestamps[pos]))
            writer.writerow(row)


def to_implicit(matrix: InteractionMatrix) -> InteractionMatrix:
    """Same sparsity pattern with every stored value set to 1 (idempotent)."""
    return InteractionMatrix(
        matrix.m, matrix.n, matrix.users, matrix.items,
        np.ones(matrix.nnz, dtype=np.float64), matrix.timestamps,
        user_ids=matrix.user_ids, item_ids=matrix.item_ids,
    )


def _largest_remainder_counts(total: int, ratios) -> list[int]:
    exact = [total * r for r in ratios]
    base = [int(np.floor(e)) for e in exact]
    short = total - sum(base)
    remainders = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in remainders[:short]:
        base[i] += 1
    return base


def split_random(matrix: InteractionMatrix, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitBundle:
    """Seeded shuffle of the entry set partitioned into train/val/test.

    Counts follow the largest-remainder rule, so they are exact whenever the
    proportions divide evenly and within one entry otherwise.
    """
    if len(ratios) != 3:
        raise ValueError("ratios must have three parts")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    gen = stream(seed, STREAM_SPLIT)
    perm = gen.permutation(matrix.nnz)
    n_train, n_val, n_test = _largest_remainder_counts(matrix.nnz, ratios)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    train, val, test = (matrix.with_entries(np.sort(p)) for p in parts)
    return SplitBundle(train=train, validation=val, test=test,
                       protocol="random-ratio", seed=seed)


def split_leave_one_out(matrix: InteractionMatrix) -> SplitBundle:
    """Hold out each user's latest interaction; remainder trains.

    Timestamp ties are broken toward the highest item index. Users with a
    single interaction stay train-only (with a warning) and contribute no
    test entry. Validation comes back empty under this protocol.
    """
    if matrix.timestamps is None:
        raise ValueError("leave-one-out requires timestamps")
    test_positions = []
    single_users = 0
    for j in range(matrix.m):
        lo, hi = matrix.csr_indptr[j], matrix.csr_indptr[j + 1]
        if hi - lo == 0:
            continue
        if hi - lo == 1:
            single_users += 1
            continue
        ts = matrix.timestamps[lo:hi]
        row_items = matrix.items[lo:hi]
        # argmax over (timestamp, item index): items are sorted ascending per
        # row, so the last occurrence of the max timestamp is the tie winner.
        best = np.flatnonzero(ts == ts.max())[-1]
        del row_items
        test_positions.append(lo + best)
    if single_users:
        warnings.warn(f"{single_users} users with a single interaction stay train-only")
    test_positions = np.array(sorted(test_positions), dtype=np.int64)
    keep = np.ones(matrix.nnz, dtype=bool)
    keep[test_positions] = False
    train = matrix.with_entries(np.flatnonzero(keep))
    test = matrix.with_entries(test_positions)
    empty = matrix.with_entries(np.array([], dtype=np.int64))
    return SplitBundle(train=train, validation=empty, test=test,
                       protocol="leave-one-out", seed=None)


def sample_negatives(matrix: InteractionMatrix, j: int, count: int, seed_or_gen,
                     exclude=None) -> np.ndarray:
    """Uniformly sample ``count`` distinct items user j never interacted with.

    ``exclude`` removes extra items from the legal pool (the ranking protocol
    excludes the held-out test item as well).
    """
    if isinstance(seed_or_gen, np.random.Generator):
        gen = seed_or_gen
    else:
        gen = stream(int(seed_or_gen), STREAM_NEGATIVES)
    lo, hi = matrix.csr_indptr[j], matrix.csr_indptr[j + 1]
    row_items = matrix.items[lo:hi]
    if exclude is not None:
        row_items = np.union1d(row_items, np.asarray(exclude, dtype=np.int64))
    legal = np.setdiff1d(np.arange(matrix.n, dtype=np.int64), row_items,
                         assume_unique=True)
    if count > legal.size:
        raise ValueError(f"user {j}: requested {count} negatives, only {legal.size} legal items")
    if count == 0:
        return np.array([], dtype=np.int64)
    return np.sort(gen.choice(legal, size=count, replace=False))


def sample_negatives_per_positive(matrix: InteractionMatrix, users: np.ndarray,
                                  per_positive: int, gen: np.random.Generator) -> np.ndarray:
    """Vectorized negative draw for training: ``per_positive`` items per row.

    Duplicates across rows are allowed (each slot is an independent uniform
    draw over the user's non-interacted items), matching the usual implicit
    training protocol. Returns shape (len(users), per_positive).
    """
    mask = matrix.dense_mask()
    out = gen.integers(0, matrix.n, size=(users.size, per_positive), dtype=np.int64)
    bad = mask[np.repeat(users, per_positive), out.ravel()].reshape(out.shape)
    while bad.any():
        redraw = gen.integers(0, matrix.n, size=int(bad.sum()), dtype=np.int64)
        out[bad] = redraw
        bad = mask[np.repeat(users, per_positive), out.ravel()].reshape(out.shape)
    return out


def row_distance(matrix: InteractionMatrix, j1: int, j2: int) -> float:
    """Euclidean distance between two users' dense interaction rows."""
    diff = matrix.dense_row(j1) - matrix.dense_row(j2)
    return float(np.sqrt(np.dot(diff, diff)))
