"""Bernoulli designs, exposure mappings and exposure propensities."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .netgraph import Graph

__all__ = [
    "Design",
    "ExposureSpec",
    "Direct",
    "NeighborCountThreshold",
    "EligibleNeighborAny",
    "CustomExposure",
    "PropensityTable",
    "OverlapReport",
    "sample_assignment",
    "exposure_eval",
    "poisson_binomial_pmf",
    "propensity_exact",
    "propensity_mc",
    "overlap_check",
    "local_assignments",
    "exposure_from_dict",
]

MAX_LOCAL_UNITS = 20


@dataclass(frozen=True, eq=False)
class Design:
    """Independent Bernoulli assignment with per-unit probabilities ``p``."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64).ravel()
        if p.size == 0:
            raise ValueError("design needs at least one unit")
        if not np.all((p > 0) & (p < 1)):
            bad = np.flatnonzero(~((p > 0) & (p < 1)))
            raise ValueError(f"treatment probabilities must lie in (0, 1); violated at units {bad[:10].tolist()}")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @classmethod
    def uniform(cls, n: int, p: float = 0.5) -> "Design":
        return cls(np.full(n, p))

    @property
    def n(self) -> int:
        return self.p.size

    def log_prob(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d)
        return (d * np.log(self.p) + (1 - d) * np.log1p(-self.p)).sum(axis=-1)


def sample_assignment(d: Design, rng, size: int | None = None) -> np.ndarray:
    """Draw ``D`` (shape (n,), or (size, n) when ``size`` is given) as int8."""
    rng = np.random.default_rng(rng)
    shape = d.p.shape if size is None else (size, d.n)
    return (rng.random(shape) < d.p).astype(np.int8)


# ---------------------------------------------------------------------------
# exposure mappings


class ExposureSpec:
    """A K-local exposure mapping with a finite ordered set of scalar codes.

    Subclasses implement ``_evaluate(D2, g)`` on a batch of assignments of
    shape (R, n) and return integer codes of the same shape.
    """

    values: tuple = (0, 1)
    radius: int | None = 1

    def evaluate(self, D, g: Graph) -> np.ndarray:
        D = np.asarray(D)
        if D.shape[-1] != g.n:
            raise ValueError(f"assignment has length {D.shape[-1]}, graph has {g.n} units")
        out = self._evaluate(np.atleast_2d(D), g)
        return out[0] if D.ndim == 1 else out

    def _evaluate(self, D2, g):  # pragma: no cover - abstract
        raise NotImplementedError

    def restrict(self, nodes: np.ndarray, g: Graph):
        """Same mapping on the subgraph induced by ``nodes``, or None if unsupported."""
        return None

    def to_dict(self) -> dict:  # pragma: no cover - overridden
        raise TypeError(f"{type(self).__name__} is not serializable")


@dataclass(frozen=True, eq=False)
class Direct(ExposureSpec):
    """``T_i = D_i``."""

    values: tuple = (0, 1)
    radius: int = 0

    def _evaluate(self, D2, g):
        return D2.astype(np.int64)

    def restrict(self, nodes, g):
        return self

    def to_dict(self):
        return {"kind": "direct"}


@dataclass(frozen=True, eq=False)
class NeighborCountThreshold(ExposureSpec):
    """``T_i = 1(number of treated neighbors > threshold_i)``."""

    thresholds: np.ndarray
    values: tuple = (0, 1)
    radius: int = 1

    def __post_init__(self):
        object.__setattr__(self, "thresholds", np.asarray(self.thresholds, dtype=np.int64).ravel())

    @classmethod
    def half_degree(cls, g: Graph) -> "NeighborCountThreshold":
        """Majority rule: more than ``floor(deg_i / 2)`` treated neighbors."""
        return cls(g.degree // 2)

    def _evaluate(self, D2, g):
        if self.thresholds.size != g.n:
            raise ValueError("threshold vector does not match graph size")
        counts = np.asarray(g.adjacency @ D2.T.astype(np.int64)).T
        return (counts > self.thresholds).astype(np.int64)

    def restrict(self, nodes, g):
        return NeighborCountThreshold(self.thresholds[nodes])

    def to_dict(self):
        return {"kind": "neighbor_threshold", "threshold": self.thresholds.tolist()}


@dataclass(frozen=True, eq=False)
class EligibleNeighborAny(ExposureSpec):
    """``T_i = 1(sum_j A'_ij m_j D_j > 0)`` over an eligibility mask ``m``.

    ``out_neighbors[i]`` lists the (possibly directed) contacts of ``i``; when
    omitted the undirected graph neighbors are used.
    """

    mask: np.ndarray
    out_neighbors: tuple | None = None
    values: tuple = (0, 1)
    radius: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=np.int8).ravel())
        if self.out_neighbors is not None:
            object.__setattr__(
                self, "out_neighbors", tuple(np.asarray(a, dtype=np.int64) for a in self.out_neighbors)
            )

    def contact_matrix(self, g: Graph) -> sp.csr_matrix:
        if self.mask.size != g.n:
            raise ValueError("eligibility mask does not match graph size")
        if self.out_neighbors is None:
            a = g.adjacency.astype(np.int64)
        else:
            if len(self.out_neighbors) != g.n:
                raise ValueError("out-neighbor lists do not match graph size")
            rows = np.repeat(np.arange(g.n), [len(a) for a in self.out_neighbors])
            cols = np.concatenate(self.out_neighbors) if rows.size else np.zeros(0, dtype=np.int64)
            if cols.size and (cols.min() < 0 or cols.max() >= g.n):
                raise ValueError("out-neighbor list references a unit absent from the graph")
            a = sp.csr_matrix((np.ones(rows.size, dtype=np.int64), (rows, cols)), shape=(g.n, g.n))
            a.data[:] = 1
        return (a @ sp.diags(self.mask.astype(np.int64))).tocsr()

    def _evaluate(self, D2, g):
        s = np.asarray(self.contact_matrix(g) @ D2.T.astype(np.int64)).T
        return (s > 0).astype(np.int64)

    def restrict(self, nodes, g):
        nodes = np.asarray(nodes)
        pos = {int(u): k for k, u in enumerate(nodes)}
        if self.out_neighbors is None:
            return EligibleNeighborAny(self.mask[nodes])
        for u in nodes:
            if not np.isin(self.out_neighbors[u], g.neighbors[u]).all():
                raise ValueError(f"unit {u} has contacts outside its graph neighborhood; local enumeration does not apply")
        sub = tuple(
            np.array([pos[int(j)] for j in self.out_neighbors[u] if int(j) in pos], dtype=np.int64)
            for u in nodes
        )
        return EligibleNeighborAny(self.mask[nodes], sub)

    def to_dict(self):
        d = {"kind": "eligible_any", "mask": self.mask.tolist()}
        if self.out_neighbors is not None:
            d["out_neighbors"] = [a.tolist() for a in self.out_neighbors]
        return d


@dataclass(frozen=True, eq=False)
class CustomExposure(ExposureSpec):
    """Caller-supplied mapping ``fn(D2, g) -> T2`` on batches of assignments.

    ``radius`` is the declared locality; ``None`` means undeclared, which
    rules out exact local enumeration.
    """

    fn: Callable
    values: tuple = (0, 1)
    radius: int | None = None

    def _evaluate(self, D2, g):
        return np.asarray(self.fn(D2, g)).astype(np.int64).reshape(D2.shape)


def exposure_eval(spec: ExposureSpec, D, g: Graph) -> np.ndarray:
    """Exposure codes for one assignment (n,) or a batch (R, n)."""
    return spec.evaluate(D, g)


def exposure_from_dict(cfg: dict, g: Graph, columns: dict | None = None) -> ExposureSpec:
    """Build an exposure mapping from its JSON form.

    ``columns`` supplies node-table columns referenced by name (masks,
    thresholds).
    """
    kind = cfg.get("kind")
    columns = columns or {}
    if kind == "direct":
        return Direct()
    if kind == "neighbor_threshold":
        th = cfg.get("threshold", "half_degree")
        if th == "half_degree":
            return NeighborCountThreshold.half_degree(g)
        if isinstance(th, str):
            return NeighborCountThreshold(np.asarray(columns[th]))
        return NeighborCountThreshold(np.broadcast_to(np.asarray(th), (g.n,)))
    if kind == "eligible_any":
        if "mask_column" in cfg:
            mask = np.asarray(columns[cfg["mask_column"]])
        else:
            mask = np.asarray(cfg.get("mask", np.ones(g.n)))
        out = cfg.get("out_neighbors")
        return EligibleNeighborAny(mask, None if out is None else tuple(out))
    raise ValueError(f"unknown exposure kind {kind!r}")


# ---------------------------------------------------------------------------
# propensities


@dataclass(frozen=True, eq=False)
class PropensityTable:
    """``probs[i, k] = P(T_i = values[k])``."""

    values: tuple
    probs: np.ndarray
    se: np.ndarray | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] != len(self.values):
            raise ValueError("probs must be (n, number of exposure values)")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "values", tuple(self.values))

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    def pi(self, t) -> np.ndarray:
        try:
            k = self.values.index(t)
        except ValueError:
            raise KeyError(f"exposure value {t!r} not in {self.values}") from None
        return self.probs[:, k]

    def at(self, T: np.ndarray) -> np.ndarray:
        """``pi_i(T_i)`` for realized codes."""
        idx = np.searchsorted(np.asarray(self.values), T)
        return self.probs[np.arange(self.n), idx]

    def subset(self, units) -> "PropensityTable":
        return PropensityTable(self.values, self.probs[units], None if self.se is None else self.se[units])


def poisson_binomial_pmf(p: Sequence[float]) -> np.ndarray:
    """PMF of a sum of independent Bernoulli(p_j) by direct convolution."""
    pmf = np.ones(1)
    for q in p:
        nxt = np.empty(pmf.size + 1)
        nxt[:-1] = pmf * (1.0 - q)
        nxt[-1] = 0.0
        nxt[1:] += pmf * q
        pmf = nxt
    return pmf


def propensity_exact(spec: ExposureSpec, d: Design, g: Graph) -> PropensityTable:
    """Closed-form propensities for Direct, threshold and eligible-any mappings."""
    if d.n != g.n:
        raise ValueError("design and graph sizes differ")
    if isinstance(spec, Direct):
        p1 = d.p.copy()
    elif isinstance(spec, NeighborCountThreshold):
        if spec.thresholds.size != g.n:
            raise ValueError("threshold vector does not match graph size")
        p1 = np.empty(g.n)
        for i, nb in enumerate(g.neighbors):
            pmf = poisson_binomial_pmf(d.p[nb])
            th = spec.thresholds[i]
            p1[i] = pmf[max(th + 1, 0):].sum()
    elif isinstance(spec, EligibleNeighborAny):
        m = spec.contact_matrix(g).tocsr()
        p1 = np.empty(g.n)
        logq = np.log1p(-d.p)
        for i in range(g.n):
            cols = m.indices[m.indptr[i]:m.indptr[i + 1]][m.data[m.indptr[i]:m.indptr[i + 1]] > 0]
            p1[i] = -np.expm1(logq[cols].sum())
    else:
        raise TypeError(f"no closed form for {type(spec).__name__}; use propensity_mc")
    p1 = np.clip(p1, 0.0, 1.0)
    return PropensityTable((0, 1), np.column_stack([1.0 - p1, p1]))


def propensity_mc(spec: ExposureSpec, d: Design, g: Graph, reps: int, rng, batch: int = 1000) -> PropensityTable:
    """Empirical exposure frequencies over ``reps`` independent draws.

    The per-cell standard error is at most ``0.5 / sqrt(reps)``; the
    plug-in estimate is stored in ``se``.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    rng = np.random.default_rng(rng)
    values = np.asarray(spec.values)
    counts = np.zeros((g.n, values.size))
    done = 0
    while done < reps:
        r = min(batch, reps - done)
        T = spec.evaluate(sample_assignment(d, rng, size=r), g)
        for k, v in enumerate(values):
            counts[:, k] += (T == v).sum(axis=0)
        done += r
    probs = counts / reps
    se = np.sqrt(probs * (1 - probs) / reps)
    return PropensityTable(tuple(spec.values), probs, se)


@dataclass(frozen=True)
class OverlapReport:
    eps: float
    contrast: tuple
    units: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.units

    def __str__(self):
        if self.passed:
            return f"overlap ok at eps={self.eps}"
        head = ", ".join(map(str, self.units[:20]))
        more = "" if len(self.units) <= 20 else f", ... ({len(self.units)} total)"
        return f"overlap violated at eps={self.eps} for units {head}{more}"


def overlap_check(pi: PropensityTable, contrast, eps: float = 0.01) -> OverlapReport:
    """Units whose ``pi_i(t)`` or ``pi_i(t')`` fall outside ``[eps, 1 - eps]``."""
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 0.5)")
    t, tp = contrast
    bad = np.zeros(pi.n, dtype=bool)
    for v in (t, tp):
        col = pi.pi(v)
        bad |= (col < eps) | (col > 1 - eps)
    return OverlapReport(eps=eps, contrast=(t, tp), units=np.flatnonzero(bad).tolist())


# ---------------------------------------------------------------------------
# local enumeration


def local_assignments(g: Graph, d: Design, center: int, radius: int, max_units: int = MAX_LOCAL_UNITS):
    """All assignments of the ``radius``-ball around ``center``.

    Returns ``(nodes, patterns, probs)`` where ``patterns`` is (2**m, m) int8
    over ``nodes`` (sorted) and ``probs`` their design probabilities.
    """
    nodes = g.ball(center, radius)
    m = nodes.size
    if m > max_units:
        raise ValueError(f"neighborhood of unit {center} has {m} units (> {max_units}); enumeration infeasible")
    codes = np.arange(2 ** m, dtype=np.int64)
    patterns = ((codes[:, None] >> np.arange(m)) & 1).astype(np.int8)
    p = d.p[nodes]
    probs = np.exp(patterns @ np.log(p) + (1 - patterns) @ np.log1p(-p))
    return nodes, patterns, probs


def local_exposure(spec: ExposureSpec, g: Graph, nodes: np.ndarray, patterns: np.ndarray, center: int) -> np.ndarray:
    """``T_center`` for each local pattern, other units held at 0."""
    sub = spec.restrict(nodes, g)
    if sub is not None:
        sg = g.subgraph(nodes)
        pos = int(np.searchsorted(nodes, center))
        return sub.evaluate(patterns, sg)[:, pos]
    full = np.zeros((patterns.shape[0], g.n), dtype=np.int8)
    full[:, nodes] = patterns
    return spec.evaluate(full, g)[:, center]
