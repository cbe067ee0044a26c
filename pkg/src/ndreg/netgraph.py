"""Undirected graphs, path distances and neighborhood statistics.

Distances are computed lazily per source with a radius cap, so nothing of
size n x n is ever materialized except the (sparse) bandwidth indicator.
"""

from __future__ import annotations

import csv
import hashlib
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

__all__ = [
    "Graph",
    "GeometricGraph",
    "NeighborhoodStats",
    "bfs_distances",
    "bandwidth_pairs",
    "bandwidth_matrix",
    "neighborhood_stats",
    "rgg_generate",
    "row_normalized_apply",
    "read_edge_csv",
    "read_coords_csv",
]


class Graph:
    """Immutable undirected simple graph on units ``0..n-1``.

    Parameters
    ----------
    n : int
        Number of units.
    edges : iterable of (int, int)
        Undirected edges. Both orientations and duplicates are accepted and
        collapsed; self-loops are rejected.
    """

    def __init__(self, n: int, edges=()):
        if n < 0:
            raise ValueError("n must be nonnegative")
        self.n = int(n)
        e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        e = e.reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise ValueError(f"edge endpoint outside [0, {n})")
        if np.any(e[:, 0] == e[:, 1]):
            raise ValueError("self-loops are not allowed")
        both = np.concatenate([e, e[:, ::-1]]) if e.size else e
        adj = sp.coo_matrix(
            (np.ones(len(both), dtype=np.int8), (both[:, 0], both[:, 1])), shape=(n, n)
        ).tocsr()
        adj.sum_duplicates()
        adj.data[:] = 1
        adj.sort_indices()
        self._adj = adj

    @classmethod
    def from_neighbors(cls, neighbors: Sequence[Sequence[int]]) -> "Graph":
        given = [set(int(j) for j in nb) for nb in neighbors]
        for i, nb in enumerate(given):
            for j in nb:
                if not 0 <= j < len(given) or i not in given[j]:
                    raise ValueError(f"neighbor lists not symmetric at ({i}, {j})")
        return cls(len(neighbors), [(i, j) for i, nb in enumerate(given) for j in nb])

    @property
    def adjacency(self) -> sp.csr_matrix:
        """Sparse 0/1 adjacency matrix (read-only view)."""
        return self._adj

    @cached_property
    def neighbors(self) -> tuple[np.ndarray, ...]:
        ip, ix = self._adj.indptr, self._adj.indices
        return tuple(ix[ip[i]:ip[i + 1]].copy() for i in range(self.n))

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self._adj.indptr)

    @property
    def num_edges(self) -> int:
        return int(self._adj.nnz // 2)

    def edge_array(self) -> np.ndarray:
        """Edges as an (m, 2) array with ``i < j``, lexicographically sorted."""
        coo = sp.triu(self._adj, k=1).tocoo()
        out = np.column_stack([coo.row, coo.col]).astype(np.int64)
        return out[np.lexsort((out[:, 1], out[:, 0]))]

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.n).tobytes())
        h.update(self.edge_array().tobytes())
        return h.hexdigest()[:16]

    def ball(self, i: int, radius: int) -> np.ndarray:
        """Sorted units within path distance ``radius`` of ``i``."""
        dist = bfs_distances(self, i, radius)
        return np.flatnonzero(np.isfinite(dist))

    def subgraph(self, nodes: Sequence[int]) -> "Graph":
        """Induced subgraph, relabelled in the order of ``nodes``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        sub = self._adj[nodes][:, nodes].tocoo()
        keep = sub.row < sub.col
        return Graph(len(nodes), np.column_stack([sub.row[keep], sub.col[keep]]))

    @cached_property
    def _bandwidth_cache(self) -> dict:
        return {}

    @cached_property
    def memo(self) -> dict:
        """Scratch cache for derived operators keyed by their parameters."""
        return {}

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, edges={self.num_edges})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.edge_array(), other.edge_array())

    __hash__ = None


@dataclass(frozen=True)
class NeighborhoodStats:
    """Average boundary sizes and moments of closed neighborhood sizes.

    ``boundary_sizes[s]`` is the mean number of units at distance exactly
    ``s``; ``moments[(s, k)]`` is the mean of ``|N(i, s)|**k``.
    """

    boundary_sizes: np.ndarray
    moments: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GeometricGraph:
    """A pruned random geometric graph and its retained coordinates.

    ``kept[new] = old`` maps each retained unit to its index before isolated
    units were removed.
    """

    graph: Graph
    coords: np.ndarray
    kept: np.ndarray
    radius: float


def bfs_distances(g: Graph, source: int, cap: int | float = np.inf) -> np.ndarray:
    """Shortest path lengths from ``source``, ``inf`` beyond ``cap`` or unreachable."""
    if not 0 <= source < g.n:
        raise IndexError(f"source {source} out of range for n={g.n}")
    if cap < 0:
        raise ValueError("cap must be nonnegative")
    dist = np.full(g.n, np.inf)
    dist[source] = 0
    ip, ix = g.adjacency.indptr, g.adjacency.indices
    queue = deque([source])
    while queue:
        u = queue.popleft()
        du = dist[u]
        if du >= cap:
            continue
        for v in ix[ip[u]:ip[u + 1]]:
            if dist[v] == np.inf:
                dist[v] = du + 1
                queue.append(v)
    return dist


def _check_mode(mode: str) -> bool:
    if mode not in ("inclusive", "strict"):
        raise ValueError(f"unknown bandwidth mode {mode!r}")
    return mode == "inclusive"


def bandwidth_pairs(g: Graph, b_n: int, mode: str = "inclusive") -> Iterator[tuple[int, int]]:
    """Yield ordered pairs ``(i, j)`` with ``l(i, j) <= b_n`` (or ``< b_n`` if strict)."""
    inclusive = _check_mode(mode)
    if b_n < 0:
        raise ValueError("b_n must be nonnegative")
    reach = b_n if inclusive else b_n - 1
    if reach < 0:
        return
    for i in range(g.n):
        dist = bfs_distances(g, i, reach)
        for j in np.flatnonzero(np.isfinite(dist)):
            yield i, int(j)


def bandwidth_matrix(g: Graph, b_n: int, mode: str = "inclusive") -> sp.csr_matrix:
    """Sparse symmetric 0/1 matrix of the uniform HAC kernel.

    Built from powers of ``I + A``: an entry of ``(I + A)**r`` is positive
    iff the path distance is at most ``r``. Cached on the graph.
    """
    inclusive = _check_mode(mode)
    if b_n < 0:
        raise ValueError("b_n must be nonnegative")
    reach = int(b_n) if inclusive else int(b_n) - 1
    cache = g._bandwidth_cache
    if reach in cache:
        return cache[reach]
    if reach < 0:
        out = sp.csr_matrix((g.n, g.n), dtype=np.float64)
    else:
        step = (sp.identity(g.n, dtype=np.int64, format="csr") + g.adjacency.astype(np.int64)).tocsr()
        cur = sp.identity(g.n, dtype=np.int64, format="csr")
        for _ in range(reach):
            cur = cur @ step
            cur.data[:] = 1
        out = cur.astype(np.float64).tocsr()
        out.sort_indices()
    cache[reach] = out
    return out


def neighborhood_stats(g: Graph, max_s: int, ks: Sequence[int] = (1, 2)) -> NeighborhoodStats:
    """Exact ``M_n^boundary(s)`` for ``s <= max_s`` and ``M_n(s, k)`` by BFS."""
    if max_s < 0:
        raise ValueError("max_s must be nonnegative")
    counts = np.zeros((g.n, max_s + 1))
    for i in range(g.n):
        dist = bfs_distances(g, i, max_s)
        finite = dist[np.isfinite(dist)].astype(np.int64)
        counts[i] = np.bincount(finite, minlength=max_s + 1)
    n = max(g.n, 1)
    boundary = counts.sum(axis=0) / n
    closed = np.cumsum(counts, axis=1)
    moments = {(s, k): float(np.mean(closed[:, s] ** k)) for s in range(max_s + 1) for k in ks}
    return NeighborhoodStats(boundary_sizes=boundary, moments=moments)


def rgg_generate(n: int, density_factor: float = 1.5, rng=None) -> GeometricGraph:
    """Random geometric graph on the unit square with isolated units removed.

    Units ``i, j`` are joined when ``||rho_i - rho_j|| <= sqrt(density_factor / (pi n))``,
    so the expected degree before pruning is about ``density_factor``.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    if density_factor <= 0:
        raise ValueError("density_factor must be positive")
    rng = np.random.default_rng(rng)
    coords = rng.uniform(0.0, 1.0, size=(n, 2))
    radius = float(np.sqrt(density_factor / (np.pi * n)))
    pairs = cKDTree(coords).query_pairs(radius, output_type="ndarray")
    deg = np.bincount(pairs.ravel(), minlength=n)
    kept = np.flatnonzero(deg > 0)
    if kept.size == 0:
        raise ValueError("every unit is isolated; increase density_factor")
    relabel = np.full(n, -1, dtype=np.int64)
    relabel[kept] = np.arange(kept.size)
    graph = Graph(kept.size, relabel[pairs])
    return GeometricGraph(graph=graph, coords=coords[kept], kept=kept, radius=radius)


def row_normalized_apply(g: Graph, v: np.ndarray) -> np.ndarray:
    """Neighbor averages ``(O v)_i``; ``v`` may be (n,) or batched as (R, n).

    Raises ``ValueError`` if any unit is isolated.
    """
    if np.any(g.degree == 0):
        raise ValueError("row normalization undefined: graph has isolated units")
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != g.n:
        raise ValueError("vector length does not match graph")
    if v.ndim == 1:
        return (g.adjacency @ v) / g.degree
    return np.asarray(g.adjacency @ v.T).T / g.degree


def read_edge_csv(path, ids: Sequence | None = None, n: int | None = None) -> Graph:
    """Read an undirected ``src,dst`` edge list (header optional).

    With ``ids`` given, endpoints are looked up in it and relabelled to their
    position; otherwise they are taken as integer indices and ``n`` defaults
    to one past the largest endpoint.
    """
    lookup = None if ids is None else {str(u): k for k, u in enumerate(ids)}
    edges = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise ValueError(f"{path}:{lineno}: expected two columns")
            a, b = row[0].strip(), row[1].strip()
            if lineno == 1 and not (_is_int(a) and _is_int(b)) and (lookup is None or a not in lookup):
                continue  # header
            if lookup is not None:
                if a not in lookup or b not in lookup:
                    raise ValueError(f"{path}:{lineno}: unknown unit id {a if a not in lookup else b!r}")
                i, j = lookup[a], lookup[b]
            else:
                i, j = int(a), int(b)
            if i != j:
                edges.append((i, j))
    if lookup is not None:
        n = len(lookup)
    elif n is None:
        n = 1 + max((max(e) for e in edges), default=-1)
    return Graph(n, edges)


def read_coords_csv(path) -> np.ndarray:
    """Read ``id,x,y`` rows into an array ordered by integer id."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or not _is_int(row[0].strip()):
                continue
            rows.append((int(row[0]), float(row[1]), float(row[2])))
    rows.sort()
    return np.array([[x, y] for _, x, y in rows])


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True
