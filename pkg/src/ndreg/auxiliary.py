"""Auxiliary regressors built from covariates, treatments and the graph, and their
per-unit decorrelation from the HT weight.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ._streams import CompensatedSum, as_seed, ordered_map, stream
from .design import Design, ExposureSpec, PropensityTable, local_assignments, local_exposure, sample_assignment
from .errors import OverlapError
from .netgraph import Graph

__all__ = [
    "AuxiliarySpec",
    "RawCovariates",
    "ExposureInteracted",
    "LinearInMeansSet",
    "InteractedLinearInMeansSet",
    "CustomAuxiliary",
    "Phi0Normalizer",
    "build_auxiliary",
    "phi0_fit",
    "phi0_exact",
    "phi0_apply",
    "hte_weights",
]

MIN_DENOM = 1e-8


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X[:, None] if X.ndim == 1 else X


def _neighbor_mean(g: Graph, V: np.ndarray) -> np.ndarray:
    """Neighbor averages of the last-but-one axis of a (R, n) or (n, k) array."""
    if np.any(g.degree == 0):
        raise ValueError("neighbor averages undefined: graph has isolated units")
    return np.asarray(g.adjacency @ V) / g.degree[:, None]


class AuxiliarySpec:
    """Maps (X, D, graph) to an n x Q matrix of auxiliary regressors.

    ``build`` works on a batch of assignments (R, n) and returns (R, n, Q).
    """

    radius: int | None = 0

    def dim(self, X) -> int:  # pragma: no cover - abstract
        raise NotImplementedError

    def names(self, X) -> list[str]:
        return [f"g{k}" for k in range(self.dim(X))]

    def build(self, X, D2, g: Graph) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def restrict(self, nodes, g: Graph):
        return None

    def to_dict(self) -> dict:  # pragma: no cover - overridden
        raise TypeError(f"{type(self).__name__} is not serializable")


@dataclass(frozen=True, eq=False)
class RawCovariates(AuxiliarySpec):
    """``G_i = X_i``."""

    radius: int = 0

    def dim(self, X):
        return _as_matrix(X).shape[1]

    def names(self, X):
        return [f"x{k}" for k in range(self.dim(X))]

    def build(self, X, D2, g):
        Xm = _as_matrix(X)
        return np.broadcast_to(Xm, (D2.shape[0],) + Xm.shape).copy()

    def restrict(self, nodes, g):
        return self

    def to_dict(self):
        return {"kind": "raw"}


@dataclass(frozen=True, eq=False)
class LinearInMeansSet(AuxiliarySpec):
    """``(D_i, treated-neighbor share, X_i, neighbor-mean X_i)``."""

    radius: int = 1

    def dim(self, X):
        return 2 + 2 * _as_matrix(X).shape[1]

    def names(self, X):
        p = _as_matrix(X).shape[1]
        return ["D", "share_treated"] + [f"x{k}" for k in range(p)] + [f"nbr_x{k}" for k in range(p)]

    def build(self, X, D2, g):
        Xm = _as_matrix(X)
        R, n = D2.shape
        D = D2.astype(np.float64)
        share = _neighbor_mean(g, D.T).T
        nbx = _neighbor_mean(g, Xm)
        const = np.hstack([Xm, nbx])
        out = np.empty((R, n, self.dim(X)))
        out[:, :, 0] = D
        out[:, :, 1] = share
        out[:, :, 2:] = const
        return out

    def restrict(self, nodes, g):
        return self

    def to_dict(self):
        return {"kind": "linear_in_means"}


@dataclass(frozen=True, eq=False)
class ExposureInteracted(AuxiliarySpec):
    """``base`` repeated once per exposure value, zeroed outside that exposure."""

    base: AuxiliarySpec
    exposure: ExposureSpec
    values: tuple = (1, 0)

    @property
    def radius(self):
        if self.base.radius is None or self.exposure.radius is None:
            return None
        return max(self.base.radius, self.exposure.radius)

    def dim(self, X):
        return self.base.dim(X) * len(self.values)

    def names(self, X):
        return [f"{c}*1(T={v})" for v in self.values for c in self.base.names(X)]

    def build(self, X, D2, g):
        G = self.base.build(X, D2, g)
        T = self.exposure.evaluate(D2, g)
        return np.concatenate([G * (T == v)[:, :, None] for v in self.values], axis=2)

    def restrict(self, nodes, g):
        b, e = self.base.restrict(nodes, g), self.exposure.restrict(nodes, g)
        if b is None or e is None:
            return None
        return type(self)(b, e, self.values) if type(self) is ExposureInteracted else type(self)(e, self.values)

    def to_dict(self):
        return {"kind": "interacted", "base": self.base.to_dict(), "values": list(self.values)}


class InteractedLinearInMeansSet(ExposureInteracted):
    """The linear-in-means set split by the two contrast exposures."""

    def __init__(self, exposure: ExposureSpec, values: tuple = (1, 0)):
        super().__init__(LinearInMeansSet(), exposure, tuple(values))

    def to_dict(self):
        return {"kind": "interacted_linear_in_means", "values": list(self.values)}


@dataclass(frozen=True, eq=False)
class CustomAuxiliary(AuxiliarySpec):
    """Caller evaluator ``fn(X, D2, g) -> (R, n, Q)``.

    ``radius`` declares locality (None rules out exact enumeration) and
    ``bound``, if given, is checked on every build.
    """

    fn: Callable
    q: int
    radius: int | None = None
    bound: float | None = None

    def dim(self, X):
        return self.q

    def build(self, X, D2, g):
        out = np.asarray(self.fn(X, D2, g), dtype=np.float64).reshape(D2.shape[0], D2.shape[1], self.q)
        if self.bound is not None and np.abs(out).max(initial=0.0) > self.bound:
            raise ValueError(f"auxiliary exceeds its declared bound {self.bound}")
        return out


def build_auxiliary(spec: AuxiliarySpec, X, D, g: Graph) -> np.ndarray:
    """Auxiliary matrix (n, Q) for one assignment, or (R, n, Q) for a batch."""
    D = np.asarray(D)
    if D.shape[-1] != g.n:
        raise ValueError("assignment length does not match graph")
    if _as_matrix(X).shape[0] != g.n:
        raise ValueError("covariate rows do not match graph")
    out = spec.build(X, np.atleast_2d(D), g)
    return out[0] if D.ndim == 1 else out


def hte_weights(T: np.ndarray, pi: PropensityTable, contrast) -> np.ndarray:
    """HT weights for exposures ``T`` of shape (n,) or (R, n)."""
    t, tp = contrast
    return (T == t) / pi.pi(t) - (T == tp) / pi.pi(tp)


# ---------------------------------------------------------------------------
# decorrelation


@dataclass(frozen=True, eq=False)
class Phi0Normalizer:
    """Per-unit coefficients ``gamma`` (n, Q) of G on the HT weight.

    ``se`` is the delta-method Monte Carlo standard error (zeros when exact).
    """

    gamma: np.ndarray
    mc_reps: int
    se: np.ndarray
    method: str = "mc"


def phi0_apply(norm: Phi0Normalizer, G, ds) -> np.ndarray:
    """``G_i - gamma_i * w_HT,i`` at the realized assignment."""
    from .estimators import ht_weights

    G = _as_matrix(G)
    if G.shape != norm.gamma.shape:
        raise ValueError(f"G has shape {G.shape}, normalizer expects {norm.gamma.shape}")
    return G - norm.gamma * ht_weights(ds)[:, None]


def _fit_key(spec, exposure, design, g, X, contrast, reps, seed, batch) -> str:
    h = hashlib.sha256()
    h.update(g.fingerprint.encode())
    h.update(json.dumps(spec.to_dict(), sort_keys=True).encode())
    h.update(json.dumps(exposure.to_dict(), sort_keys=True).encode())
    h.update(design.p.tobytes())
    h.update(np.ascontiguousarray(_as_matrix(X)).tobytes())
    h.update(repr((tuple(contrast), int(reps), int(seed), int(batch))).encode())
    return h.hexdigest()[:24]


def phi0_fit(
    spec: AuxiliarySpec,
    exposure: ExposureSpec,
    design: Design,
    g: Graph,
    X,
    pi: PropensityTable,
    contrast=(1, 0),
    reps: int = 100_000,
    rng=None,
    batch: int = 1000,
    threads: int = 1,
    cache_dir=None,
) -> Phi0Normalizer:
    """Monte Carlo ratio estimate of ``E[w G] / E[w^2]`` for every unit.

    All units share each assignment draw. Batch ``k`` uses its own stream
    derived from the root seed, so the result does not depend on
    ``threads``.
    """
    if reps < 2:
        raise ValueError("reps must be at least 2")
    seed = as_seed(rng)
    path = None
    if cache_dir is not None:
        try:
            key = _fit_key(spec, exposure, design, g, X, contrast, reps, seed, batch)
            path = Path(cache_dir) / f"phi0-{key}.npz"
            if path.exists():
                with np.load(path) as f:
                    return Phi0Normalizer(f["gamma"], int(f["reps"]), f["se"], "mc")
        except TypeError:
            path = None

    n, q = g.n, spec.dim(X)
    sizes = [min(batch, reps - s) for s in range(0, reps, batch)]

    def one(k):
        rng_k = stream(seed, k)
        D = sample_assignment(design, rng_k, size=sizes[k])
        w = hte_weights(exposure.evaluate(D, g), pi, contrast)
        G = spec.build(X, D, g)
        wg = w[:, :, None] * G
        w2 = w * w
        return (
            w2.sum(axis=0),
            wg.sum(axis=0),
            (w2 * w2).sum(axis=0),
            (wg * wg).sum(axis=0),
            (wg * w2[:, :, None]).sum(axis=0),
        )

    acc = [CompensatedSum(n), CompensatedSum((n, q)), CompensatedSum(n), CompensatedSum((n, q)), CompensatedSum((n, q))]
    # ordered reduction, computed in chunks to bound memory
    chunk = max(1, threads) * 4
    for start in range(0, len(sizes), chunk):
        parts = ordered_map(one, range(start, min(start + chunk, len(sizes))), threads)
        for part in parts:
            for a, v in zip(acc, part):
                a.add(v)
    s_w2, s_wg, s_w4, s_wg2, s_wgw2 = (a.value / reps for a in acc)
    if np.any(s_w2 < MIN_DENOM):
        bad = np.flatnonzero(s_w2 < MIN_DENOM)
        raise OverlapError(f"E[w^2] below {MIN_DENOM} for units {bad[:10].tolist()}", bad)
    gamma = s_wg / s_w2[:, None]
    b = s_w2[:, None]
    var_a = s_wg2 - s_wg**2
    var_b = (s_w4 - s_w2**2)[:, None]
    cov_ab = s_wgw2 - s_wg * b
    var_gamma = (var_a - 2 * gamma * cov_ab + gamma**2 * var_b) / (reps * b**2)
    se = np.sqrt(np.clip(var_gamma, 0, None))
    out = Phi0Normalizer(gamma, reps, se, "mc")
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, gamma=gamma, se=se, reps=reps)
    return out


def _local_aux(spec, g, X, nodes, patterns, center):
    sub = spec.restrict(nodes, g)
    if sub is not None:
        sg = g.subgraph(nodes)
        pos = int(np.searchsorted(nodes, center))
        return sub.build(_as_matrix(X)[nodes], patterns, sg)[:, pos, :]
    full = np.zeros((patterns.shape[0], g.n), dtype=np.int8)
    full[:, nodes] = patterns
    return spec.build(X, full, g)[:, center, :]


def phi0_exact(
    spec: AuxiliarySpec,
    exposure: ExposureSpec,
    design: Design,
    g: Graph,
    X,
    contrast=(1, 0),
    max_units: int = 20,
) -> Phi0Normalizer:
    """``gamma`` by enumerating every assignment of each unit's local ball."""
    if spec.radius is None or exposure.radius is None:
        raise ValueError("exact decorrelation needs declared locality radii for both G and the exposure")
    K = max(spec.radius, exposure.radius)
    t, tp = contrast
    q = spec.dim(X)
    gamma = np.zeros((g.n, q))
    for i in range(g.n):
        nodes, patterns, probs = local_assignments(g, design, i, K, max_units)
        T = local_exposure(exposure, g, nodes, patterns, i)
        pt, ptp = probs @ (T == t), probs @ (T == tp)
        if pt <= 0 or ptp <= 0:
            raise OverlapError(f"unit {i} cannot reach both contrast exposures", [i])
        w = (T == t) / pt - (T == tp) / ptp
        G = _local_aux(spec, g, X, nodes, patterns, i)
        denom = probs @ (w * w)
        if denom < MIN_DENOM:
            raise OverlapError(f"E[w^2] below {MIN_DENOM} for unit {i}", [i])
        gamma[i] = (probs * w) @ G / denom
    return Phi0Normalizer(gamma, 0, np.zeros_like(gamma), "exact")
