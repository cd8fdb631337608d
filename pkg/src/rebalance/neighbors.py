"""Brute-force Minkowski nearest neighbours.

Ties in distance are always broken by ascending row index so that every
query is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# rows per block when building distance matrices
_CHUNK = 512


@dataclass(frozen=True)
class NeighborQuery:
    k: int = 5
    r: float = 2.0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.r < 1:
            raise ValueError(f"Minkowski order r must be >= 1, got {self.r}")


def minkowski_distance(a, b, r: float = 2.0) -> float:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    diff = np.abs(a - b)
    if r == 1:
        return float(diff.sum())
    if r == 2:
        return float(np.sqrt(np.dot(diff, diff)))
    return float(np.sum(diff**r) ** (1.0 / r))


def pairwise_distances(queries: np.ndarray, points: np.ndarray, r: float = 2.0) -> np.ndarray:
    """Minkowski distance matrix of shape (len(queries), len(points))."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if queries.shape[1] != points.shape[1]:
        raise ValueError(f"width mismatch: {queries.shape[1]} vs {points.shape[1]}")
    out = np.empty((queries.shape[0], points.shape[0]))
    for start in range(0, queries.shape[0], _CHUNK):
        block = np.abs(queries[start : start + _CHUNK, None, :] - points[None, :, :])
        if r == 1:
            out[start : start + _CHUNK] = block.sum(axis=2)
        elif r == 2:
            out[start : start + _CHUNK] = np.sqrt(np.einsum("ijk,ijk->ij", block, block))
        else:
            out[start : start + _CHUNK] = np.sum(block**r, axis=2) ** (1.0 / r)
    return out


def knn_query(
    points: np.ndarray,
    query,
    q: NeighborQuery,
    self_index: int | None = None,
) -> np.ndarray:
    """Indices of the ``q.k`` rows of ``points`` closest to ``query``.

    When ``self_index`` is given that row is never reported (the query is
    one of the points and should not be its own neighbour).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        raise ValueError("empty point set")
    available = points.shape[0] - (self_index is not None)
    if q.k > available:
        raise ValueError(f"k={q.k} exceeds the {available} candidate neighbours")
    d = pairwise_distances(np.asarray(query, dtype=float).reshape(1, -1), points, q.r)[0]
    order = np.argsort(d, kind="stable")
    if self_index is not None:
        order = order[order != self_index]
    return order[: q.k]


def kneighbors(
    points: np.ndarray,
    q: NeighborQuery,
    queries: np.ndarray | None = None,
    return_distance: bool = False,
):
    """Batch neighbour search.

    With ``queries=None`` every row of ``points`` is queried against the
    others, excluding itself. Returns an index array of shape (n_queries, k)
    and, optionally, the matching distances.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    exclude_self = queries is None
    qs = points if exclude_self else np.atleast_2d(np.asarray(queries, dtype=float))
    available = points.shape[0] - exclude_self
    if q.k > available:
        raise ValueError(f"k={q.k} exceeds the {available} candidate neighbours")
    d = pairwise_distances(qs, points, q.r)
    if exclude_self:
        # push self to the end; stable sort keeps index order among real ties
        np.fill_diagonal(d, np.inf)
    idx = np.argsort(d, axis=1, kind="stable")[:, : q.k]
    if return_distance:
        return idx, np.take_along_axis(d, idx, axis=1)
    return idx
