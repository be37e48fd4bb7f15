"""Exact top-K similarity search over a leaf-index matrix.

The similarity between two leaf vectors is the fraction of trees on which
they agree, i.e. ``mean(x1 == x2)``. Scans are exact: every candidate row
is compared against the query, and the K best are selected under the
deterministic (score descending, row ascending) order.

``oracle_top_k`` is a deliberately naive reference used only by tests; it
shares no selection machinery with the production scan.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import (
    DimensionError,
    EmptyIndexError,
    LeafSimError,
    ValidationError,
)
from .model import LeafMatrix, QueryHit

__all__ = ["SimIndex", "leaf_similarity", "top_k", "top_k_batch", "oracle_top_k"]

# Row blocks sized so a block plus its comparison buffer stay cache-resident.
_BLOCK_BYTES = 8 * 2**20


def leaf_similarity(x1, x2) -> float:
    """Fraction of positions where the two leaf vectors agree, in [0, 1]."""
    a = np.asarray(x1)
    b = np.asarray(x2)
    if a.ndim != 1 or b.ndim != 1:
        raise DimensionError("leaf vectors must be 1-D")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"leaf vector lengths differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] == 0:
        raise DimensionError("leaf vectors must be non-empty")
    return int(np.count_nonzero(a == b)) / a.shape[0]


class SimIndex:
    """Immutable queryable view over a LeafMatrix.

    ``row_filter`` restricts the searchable rows (the knowledge base) while
    hit row IDs stay expressed in the full matrix' coordinates. ``shas``
    optionally binds each row to its sample identity, enabling self-hit
    exclusion. ``digest`` ties the index to the content it was built from;
    see :meth:`require_digest`.
    """

    def __init__(
        self,
        matrix: LeafMatrix,
        row_filter: Optional[Sequence[int]] = None,
        shas: Optional[Sequence[str]] = None,
        digest: Optional[str] = None,
    ) -> None:
        self._matrix = matrix
        n = matrix.n_samples
        if row_filter is None:
            self._rows = None
        else:
            rows = np.unique(np.asarray(row_filter, dtype=np.int64))
            if rows.size and (rows[0] < 0 or rows[-1] >= n):
                raise ValidationError(
                    f"row_filter entries must lie in [0, {n}), got range "
                    f"[{rows[0]}, {rows[-1]}]"
                )
            self._rows = rows
        if shas is not None:
            shas = tuple(shas)
            if len(shas) != n:
                raise DimensionError(
                    f"shas length {len(shas)} does not match matrix rows {n}"
                )
        self._shas = shas
        self._digest = digest
        self._sha_to_rows: Optional[Dict[str, List[int]]] = None

    @property
    def matrix(self) -> LeafMatrix:
        return self._matrix

    @property
    def n_trees(self) -> int:
        return self._matrix.n_trees

    @property
    def digest(self) -> Optional[str]:
        return self._digest

    @property
    def indexable_rows(self) -> np.ndarray:
        if self._rows is None:
            return np.arange(self._matrix.n_samples, dtype=np.int64)
        return self._rows

    @property
    def shas(self) -> Optional[Tuple[str, ...]]:
        return self._shas

    def require_digest(self, expected: str) -> None:
        """Reject queries against an index built from different content."""
        if self._digest != expected:
            raise ValidationError(
                f"stale index digest: index was built from {self._digest}, "
                f"caller expects {expected}"
            )

    def rows_for_sha(self, sha: str) -> List[int]:
        if self._shas is None:
            raise ValidationError("index has no sample identities attached")
        if self._sha_to_rows is None:
            mapping: Dict[str, List[int]] = {}
            for row, s in enumerate(self._shas):
                mapping.setdefault(s, []).append(row)
            self._sha_to_rows = mapping
        return self._sha_to_rows.get(sha, [])


def _agreement_counts(
    data: np.ndarray, rows: Optional[np.ndarray], query: np.ndarray
) -> np.ndarray:
    """Per-candidate count of trees agreeing with ``query``."""
    n = data.shape[0] if rows is None else rows.shape[0]
    t = data.shape[1]
    counts = np.empty(n, dtype=np.int64)
    block = max(1, _BLOCK_BYTES // (t * data.itemsize))
    for start in range(0, n, block):
        end = min(start + block, n)
        chunk = data[start:end] if rows is None else data[rows[start:end]]
        counts[start:end] = np.count_nonzero(chunk == query, axis=1)
    return counts


def _select_top(
    counts: np.ndarray,
    candidate_rows: np.ndarray,
    k: int,
    t: int,
    banned: Optional[np.ndarray] = None,
) -> List[QueryHit]:
    """K best candidates under (count desc, row asc), after removing bans.

    ``candidate_rows`` is ascending, so the composite integer key
    ``count * n + (n - 1 - position)`` sorts exactly by that order.
    """
    n = counts.shape[0]
    key = counts * np.int64(n) + (np.int64(n - 1) - np.arange(n, dtype=np.int64))
    if banned is not None and banned.size:
        key[banned] = -1
        available = n - int(banned.size)
    else:
        available = n
    if available <= 0:
        raise EmptyIndexError("no candidate rows remain after exclusions")
    take = min(k, available)
    if take < n:
        part = np.argpartition(key, n - take)[n - take:]
        order = part[np.argsort(key[part])[::-1]]
    else:
        order = np.argsort(key)[::-1]
    hits = []
    for pos in order[:take]:
        hits.append(QueryHit(int(candidate_rows[pos]), int(counts[pos]) / t))
    return hits


def _check_query(query, t: int) -> np.ndarray:
    q = np.asarray(query)
    if q.ndim != 1:
        raise DimensionError("query must be a 1-D leaf vector")
    if q.shape[0] != t:
        raise DimensionError(f"query length {q.shape[0]} does not match tree count {t}")
    return q


def top_k(
    index: SimIndex,
    query,
    k: int,
    exclude: Optional[Iterable[int]] = None,
) -> List[QueryHit]:
    """Exact K most similar rows, sorted by (score descending, row ascending).

    ``exclude`` removes matrix rows from consideration before truncation,
    so fewer than ``k`` hits are returned only when the remaining knowledge
    base is smaller than ``k``.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    q = _check_query(query, index.n_trees)
    candidates = index.indexable_rows
    if candidates.size == 0:
        raise EmptyIndexError("index has no candidate rows")
    banned = None
    if exclude:
        excluded = np.asarray(sorted(set(exclude)), dtype=np.int64)
        banned = np.nonzero(np.isin(candidates, excluded))[0]
    counts = _agreement_counts(index.matrix.data, index._rows, q)
    return _select_top(counts, candidates, k, index.n_trees, banned)


def _batch_counts(
    data: np.ndarray, rows: Optional[np.ndarray], queries: np.ndarray
) -> np.ndarray:
    """Agreement counts for every (query, candidate) pair, blocked over rows
    so each data block is compared against all queries while cache-hot."""
    n = data.shape[0] if rows is None else rows.shape[0]
    n_queries, t = queries.shape
    counts = np.empty((n_queries, n), dtype=np.int32)
    block = max(1, _BLOCK_BYTES // (t * data.itemsize))
    buf = np.empty((min(block, n), t), dtype=bool)
    for start in range(0, n, block):
        end = min(start + block, n)
        chunk = data[start:end] if rows is None else data[rows[start:end]]
        view = buf[: end - start]
        for qi in range(n_queries):
            np.equal(chunk, queries[qi], out=view)
            counts[qi, start:end] = np.count_nonzero(view, axis=1)
    return counts


def top_k_batch(
    index: SimIndex,
    queries: LeafMatrix,
    k: int,
    exclude_self_by_sha: bool = False,
    query_shas: Optional[Sequence[str]] = None,
    n_threads: int = 1,
) -> List[List[QueryHit]]:
    """Run :func:`top_k` for every row of ``queries``.

    Results are elementwise identical to per-query calls regardless of
    batch order or thread count. With ``exclude_self_by_sha`` set, hits
    whose sample identity equals the query's are dropped before truncation
    (both the index and the queries must then carry sha256 identities).
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if queries.n_trees != index.n_trees:
        raise DimensionError(
            f"query tree count {queries.n_trees} does not match index {index.n_trees}"
        )
    if exclude_self_by_sha:
        if query_shas is None:
            raise ValidationError("exclude_self_by_sha requires query_shas")
        if index.shas is None:
            raise ValidationError("exclude_self_by_sha requires an index with sample identities")
        if len(query_shas) != queries.n_samples:
            raise DimensionError(
                f"query_shas length {len(query_shas)} does not match query rows "
                f"{queries.n_samples}"
            )
    candidates = index.indexable_rows
    if candidates.size == 0:
        raise EmptyIndexError("index has no candidate rows")

    def run_chunk(span: Tuple[int, int]) -> List[List[QueryHit]]:
        lo, hi = span
        counts = _batch_counts(index.matrix.data, index._rows, queries.data[lo:hi])
        out: List[List[QueryHit]] = []
        for j in range(hi - lo):
            banned = None
            if exclude_self_by_sha:
                self_rows = np.asarray(
                    index.rows_for_sha(query_shas[lo + j]), dtype=np.int64
                )
                if self_rows.size:
                    banned = np.nonzero(np.isin(candidates, self_rows))[0]
            try:
                out.append(
                    _select_top(counts[j], candidates, k, index.n_trees, banned)
                )
            except LeafSimError as exc:
                raise type(exc)(f"query {lo + j}: {exc}") from exc
        return out

    n_queries = queries.n_samples
    workers = max(1, int(n_threads))
    if workers == 1 or n_queries == 1:
        return run_chunk((0, n_queries))
    step = -(-n_queries // workers)
    spans = [(lo, min(lo + step, n_queries)) for lo in range(0, n_queries, step)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(run_chunk, spans))
    return [hits for part in parts for hits in part]


def oracle_top_k(matrix: LeafMatrix, query, k: int) -> List[QueryHit]:
    """Reference top-K: one unblocked scan plus an explicit full sort.

    Kept intentionally simple and separate from the production path; used
    by tests as the ground truth for hit sets, scores and tie order.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    q = _check_query(query, matrix.n_trees)
    counts = (matrix.data == q).sum(axis=1)
    order = sorted(range(matrix.n_samples), key=lambda i: (-counts[i], i))
    t = matrix.n_trees
    return [QueryHit(i, int(counts[i]) / t) for i in order[:k]]
