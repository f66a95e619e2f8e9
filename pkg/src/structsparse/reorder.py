"""Matrix reorder: group rows with identical sparsity keys, compact columns per group.

After reordering, each group is a small dense block over its shared column
support, so the sparse product becomes a sequence of dense micro-GEMMs.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .lowering import dense_gemm

__all__ = [
    "Permutation",
    "LayoutGroup",
    "ReorderedLayout",
    "LoadStats",
    "reorder_rows",
    "compact_columns",
    "build_layout",
    "apply_layout",
    "assign_groups",
    "load_balance_stats",
    "contiguous_split_stats",
]


@dataclass(frozen=True, eq=False)
class Permutation:
    """``perm[new] = old``; ``inv[old] = new``."""

    perm: np.ndarray
    inv: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.perm, dtype=np.int64)
        q = np.asarray(self.inv, dtype=np.int64)
        n = p.size
        if q.size != n or not np.array_equal(np.sort(p), np.arange(n)):
            raise ValueError("perm is not a bijection")
        if not np.array_equal(q[p], np.arange(n)):
            raise ValueError("inv is not the inverse of perm")
        object.__setattr__(self, "perm", p)
        object.__setattr__(self, "inv", q)

    @classmethod
    def from_perm(cls, perm) -> "Permutation":
        p = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(p)
        inv[p] = np.arange(p.size)
        return cls(p, inv)

    def __len__(self) -> int:
        return int(self.perm.size)


@dataclass(frozen=True, eq=False)
class LayoutGroup:
    start: int
    stop: int
    support: np.ndarray
    values: np.ndarray

    @property
    def rows(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True, eq=False)
class ReorderedLayout:
    n_rows: int
    n_cols: int
    row_perm: Permutation
    groups: tuple[LayoutGroup, ...]

    def __post_init__(self):
        pos = 0
        for g in self.groups:
            if g.start != pos or g.stop <= g.start:
                raise ValueError("group row ranges must partition all rows in order")
            if g.values.shape != (g.rows, g.support.size):
                raise ValueError("group values do not match its rows x support")
            pos = g.stop
        if pos != self.n_rows or len(self.row_perm) != self.n_rows:
            raise ValueError("groups do not cover every row")

    def row_work(self) -> np.ndarray:
        """Support size of each row, in reordered position."""
        out = np.empty(self.n_rows, dtype=np.int64)
        for g in self.groups:
            out[g.start:g.stop] = g.support.size
        return out

    @property
    def macs_per_column(self) -> int:
        return int(sum(g.rows * g.support.size for g in self.groups))


def reorder_rows(row_keys: Sequence[Hashable], row_nnz: Sequence[int] | None = None) -> Permutation:
    """Stable grouping of rows with equal keys.

    Groups are ordered by size (largest first), then by their densest row's
    nonzero count (descending), then by first occurrence. Rows inside a group
    go by nonzero count (descending), then original index.
    """
    keys = list(row_keys)
    nnz = [0] * len(keys) if row_nnz is None else [int(v) for v in row_nnz]
    groups: dict[Hashable, list[int]] = {}
    for idx, key in enumerate(keys):
        groups.setdefault(key, []).append(idx)
    ordered = sorted(groups.values(),
                     key=lambda rows: (-len(rows), -max(nnz[r] for r in rows), rows[0]))
    perm = [r for rows in ordered for r in sorted(rows, key=lambda r: (-nnz[r], r))]
    return Permutation.from_perm(perm)


def compact_columns(rows, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Sorted union of nonzero columns and the rows gathered over it.

    ``mask`` overrides which positions count as occupied (defaults to
    ``rows != 0``).
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float32))
    occ = rows != 0 if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
    support = np.flatnonzero(occ.any(axis=0))
    return support, rows[:, support]


def build_layout(W, row_keys=None, mask=None) -> ReorderedLayout:
    """Reorder ``W``'s rows by key and compact each group's columns.

    By default a row's key is its support (the tuple of occupied columns).
    """
    W = np.asarray(W, dtype=np.float32)
    if W.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {W.shape}")
    occ = W != 0 if mask is None else np.asarray(mask, dtype=bool).reshape(W.shape)
    if row_keys is None:
        row_keys = [tuple(np.flatnonzero(r).tolist()) for r in occ]
    if len(row_keys) != W.shape[0]:
        raise ValueError("need one key per row")
    perm = reorder_rows(row_keys, occ.sum(axis=1))
    keys = [row_keys[i] for i in perm.perm]
    groups = []
    start = 0
    for j in range(1, len(keys) + 1):
        if j == len(keys) or keys[j] != keys[start]:
            rows = perm.perm[start:j]
            support, values = compact_columns(W[rows], occ[rows])
            groups.append(LayoutGroup(start, j, support, values))
            start = j
    return ReorderedLayout(W.shape[0], W.shape[1], perm, tuple(groups))


def assign_groups(layout: ReorderedLayout, workers: int) -> list[list[int]]:
    """Greedy longest-first assignment of groups to workers (by MAC weight)."""
    loads = [0] * max(1, workers)
    buckets: list[list[int]] = [[] for _ in loads]
    order = sorted(range(len(layout.groups)),
                   key=lambda i: (-layout.groups[i].rows * layout.groups[i].support.size, i))
    for gi in order:
        w = loads.index(min(loads))
        buckets[w].append(gi)
        loads[w] += layout.groups[gi].rows * layout.groups[gi].support.size
    return [sorted(b) for b in buckets]


def apply_layout(x, layout: ReorderedLayout, workers: int = 1) -> np.ndarray:
    """Compute ``W @ x`` from the reordered layout."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[0] != layout.n_cols:
        raise ValueError(f"dimension mismatch: layout has {layout.n_cols} columns, x is {x.shape}")
    out = np.zeros((layout.n_rows, x.shape[1]), dtype=np.float32)
    perm = layout.row_perm.perm

    def run(group_ids):
        for gi in group_ids:
            g = layout.groups[gi]
            out[perm[g.start:g.stop]] = dense_gemm(g.values, x[g.support])

    buckets = [b for b in assign_groups(layout, workers) if b]
    if len(buckets) <= 1:
        run(range(len(layout.groups)))
    else:
        with ThreadPoolExecutor(len(buckets)) as pool:
            list(pool.map(run, buckets))
    return out


@dataclass(frozen=True)
class LoadStats:
    max_nnz: int
    min_nnz: int

    @property
    def imbalance(self) -> float:
        if self.max_nnz == self.min_nnz:
            return 1.0
        return self.max_nnz / max(1, self.min_nnz)


def load_balance_stats(layout: ReorderedLayout, worker_count: int) -> LoadStats:
    """Per-worker work after greedy assignment of reordered rows.

    Rows are taken largest first (stable in reordered order) and each goes to
    the currently least-loaded worker.
    """
    if worker_count < 1:
        raise ValueError("worker_count must be >= 1")
    work = layout.row_work()
    loads = np.zeros(worker_count, dtype=np.int64)
    for j in sorted(range(work.size), key=lambda j: (-work[j], j)):
        loads[int(np.argmin(loads))] += work[j]
    return LoadStats(int(loads.max()), int(loads.min()))


def contiguous_split_stats(row_nnz, worker_count: int) -> LoadStats:
    """Baseline: rows in original order split into equal contiguous chunks."""
    if worker_count < 1:
        raise ValueError("worker_count must be >= 1")
    nnz = np.asarray(row_nnz, dtype=np.int64)
    loads = np.array([c.sum() for c in np.array_split(nnz, worker_count)], dtype=np.int64)
    return LoadStats(int(loads.max()), int(loads.min()))
