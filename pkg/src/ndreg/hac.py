"""Influence terms, HAC variances and the variance-minimizing adjustment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
from scipy.stats import norm

from .errors import NegativeVarianceError, SingularSystemError
from .estimators import AdjustedEstimate, Dataset, _check_star, mean_star, tau_adjusted
from .netgraph import Graph, bandwidth_matrix

__all__ = [
    "InfluenceTerms",
    "NDSystem",
    "influence_terms",
    "nd_system",
    "hac_sigma2",
    "nd_solve",
    "wald_ci",
    "bias_term_R",
    "interact",
]

SINGULAR_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class InfluenceTerms:
    """Per-unit influence of the outcome (``V``) and of each regressor (``VZ``)."""

    V: np.ndarray
    VZ: np.ndarray
    star: str

    @property
    def n(self) -> int:
        return self.V.size

    def residual(self, beta) -> np.ndarray:
        if beta is None or self.VZ.shape[1] == 0:
            return self.V
        return self.V - self.VZ @ np.asarray(beta, dtype=np.float64).ravel()


@dataclass(frozen=True, eq=False)
class NDSystem:
    """HAC variance as a quadratic in the coefficient: ``c - 2 b'L + b'H b``."""

    H: np.ndarray
    L: np.ndarray
    c: float

    def sigma2(self, beta) -> float:
        b = np.asarray(beta, dtype=np.float64).ravel()
        return float(self.c - 2.0 * b @ self.L + b @ self.H @ b)


def _centered(values: np.ndarray, ds: Dataset, star: str) -> np.ndarray:
    t, tp = ds.contrast
    it, itp = ds.inv_pi(t), ds.inv_pi(tp)
    if values.ndim == 1:
        it_, itp_ = it, itp
    else:
        it_, itp_ = it[:, None], itp[:, None]
    if star == "Haj":
        return (values - mean_star(values, ds, "Haj", t)) * it_ - (values - mean_star(values, ds, "Haj", tp)) * itp_
    return values * (it_ - itp_) - (mean_star(values, ds, "HT", t) - mean_star(values, ds, "HT", tp))


def influence_terms(ds: Dataset, star: str) -> InfluenceTerms:
    """Plug-in influence terms of ``Y`` and of every column of ``Z``."""
    _check_star(star)
    V = _centered(ds.Y, ds, star)
    VZ = _centered(ds.Z, ds, star) if ds.q else np.zeros((ds.n, 0))
    return InfluenceTerms(V, VZ, star)


def _kernel(g: Graph, b_n: int, mode: str, n: int):
    if g.n != n:
        raise ValueError(f"graph has {g.n} units, data has {n}")
    return bandwidth_matrix(g, b_n, mode)


def hac_sigma2(terms: InfluenceTerms, beta, g: Graph, b_n: int, mode: str = "inclusive") -> float:
    """``(1/n) sum_ij B_ij r_i r_j`` with ``r = V - VZ beta``; may be negative."""
    r = terms.residual(beta)
    B = _kernel(g, b_n, mode, terms.n)
    return float(r @ (B @ r) / terms.n)


def nd_system(terms: InfluenceTerms, g: Graph, b_n: int, mode: str = "inclusive") -> NDSystem:
    B = _kernel(g, b_n, mode, terms.n)
    n = terms.n
    BV = B @ terms.V
    BZ = B @ terms.VZ
    H = terms.VZ.T @ BZ / n
    H = 0.5 * (H + H.T)
    L = terms.VZ.T @ BV / n
    c = float(terms.V @ BV / n)
    return NDSystem(H, L, c)


def interact(Z: np.ndarray, T: np.ndarray, values) -> np.ndarray:
    """Blocks ``[Z * 1(T = v) for v in values]`` side by side."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    return np.hstack([Z * (T == v)[:, None] for v in values])


def _describe_direction(vec: np.ndarray, names: list[str]) -> str:
    order = np.argsort(-np.abs(vec))
    parts = [f"{vec[k]:+.3g}*{names[k]}" for k in order if abs(vec[k]) > 1e-6 * np.abs(vec).max()]
    return " ".join(parts[:6])


def _solve(system: NDSystem, names: list[str]) -> np.ndarray:
    H = system.H
    q = H.shape[0]
    evals, evecs = la.eigh(H)
    top = evals[-1] if q else 0.0
    if q == 0:
        return np.zeros(0)
    if top <= 0 or evals[0] < SINGULAR_TOL * top:
        direction = evecs[:, 0]
        what = "singular" if evals[0] >= 0 else "not positive definite, so it has no minimizer"
        raise SingularSystemError(
            f"HAC quadratic form is {what} (smallest eigenvalue {evals[0]:.3g} vs largest {top:.3g}); "
            f"offending direction: {_describe_direction(direction, names)}",
            direction,
        )
    return la.solve(H, system.L, assume_a="sym")


def nd_solve(
    ds: Dataset,
    star: str = "Haj",
    g: Graph | None = None,
    b_n: int = 3,
    mode: str = "pooled",
    bandwidth_mode: str = "inclusive",
    level: float = 0.95,
    method: str | None = None,
) -> AdjustedEstimate:
    """Coefficient minimizing the HAC variance estimate, and the resulting estimate.

    ``mode="per_exposure"`` interacts ``Z`` with the two contrast indicators
    so each arm gets its own slope.
    """
    if g is None:
        raise ValueError("a graph is required for the HAC kernel")
    if mode not in ("pooled", "per_exposure"):
        raise ValueError(f"unknown mode {mode!r}")
    if ds.q == 0:
        raise SingularSystemError("no adjustment columns supplied", None)
    names = ds.column_names()
    work = ds
    if mode == "per_exposure":
        t, tp = ds.contrast
        work = ds.with_Z(interact(ds.Z, ds.T, ds.contrast), [f"{c}*1(T={v})" for v in (t, tp) for c in names])
        names = work.column_names()
    terms = influence_terms(work, star)
    system = nd_system(terms, g, b_n, bandwidth_mode)
    beta = _solve(system, names)
    sigma2 = float(system.c - system.L @ beta)
    tau = tau_adjusted(work, star, beta)
    out_beta = beta
    if mode == "per_exposure":
        q = ds.q
        out_beta = {ds.contrast[0]: beta[:q], ds.contrast[1]: beta[q:]}
    tag = method or ("ND-F" if mode == "pooled" else "ND-L")
    return AdjustedEstimate(tag, tau, sigma2, ds.n, out_beta, level, b_n, ds.contrast)


def wald_ci(tau_hat: float, sigma2_hat: float, n: int, level: float = 0.95) -> tuple[float, float]:
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if sigma2_hat < 0:
        raise NegativeVarianceError(f"negative variance estimate {sigma2_hat:.4g}")
    half = norm.ppf(0.5 + level / 2) * np.sqrt(sigma2_hat / n)
    return (float(tau_hat - half), float(tau_hat + half))


def bias_term_R(
    g: Graph,
    b_n: int,
    tau_i,
    tau: float | None = None,
    z_effects=None,
    beta=None,
    mode: str = "inclusive",
) -> float:
    """Kernel-weighted second moment of unit-level effect deviations.

    With ``z_effects`` (per-unit effects of the adjustment columns) and
    ``beta``, the deviations are ``tau_i - tau - beta'(z_i - mean z)``.
    """
    tau_i = np.asarray(tau_i, dtype=np.float64)
    if tau is None:
        tau = tau_i.mean()
    dev = tau_i - tau
    if z_effects is not None:
        if beta is None:
            raise ValueError("beta is required with z_effects")
        z = np.asarray(z_effects, dtype=np.float64)
        if z.ndim == 1:
            z = z[:, None]
        dev = dev - (z - z.mean(axis=0)) @ np.asarray(beta, dtype=np.float64).ravel()
    B = _kernel(g, b_n, mode, tau_i.size)
    return float(dev @ (B @ dev) / tau_i.size)
