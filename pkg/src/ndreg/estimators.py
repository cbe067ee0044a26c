"""Horvitz-Thompson and Hajek estimators, residualized variants and WLS benchmarks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg as la

from .design import PropensityTable
from .errors import EmptyArmError, OverlapError, RankDeficientError

__all__ = [
    "Dataset",
    "AdjustedEstimate",
    "ht_weights",
    "haj_weights",
    "mean_star",
    "tau_unadjusted",
    "tau_adjusted",
    "fisher_wls",
    "lin_wls",
    "wls_qr",
]

STARS = ("HT", "Haj")
RANK_TOL = 1e-10


def _check_star(star: str) -> str:
    if star not in STARS:
        raise ValueError(f"estimator type must be one of {STARS}, got {star!r}")
    return star


@dataclass(frozen=True, eq=False)
class Dataset:
    """One realized experiment for the contrast ``t`` versus ``t_prime``.

    ``Z`` holds whatever regressors the caller adjusts with (covariates,
    auxiliaries or their normalized versions); it is used as given.
    """

    Y: np.ndarray
    T: np.ndarray
    pi: PropensityTable
    contrast: tuple = (1, 0)
    Z: np.ndarray | None = None
    D: np.ndarray | None = None
    z_names: tuple | None = None

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=np.float64).ravel()
        T = np.asarray(self.T).ravel()
        n = Y.size
        if T.size != n or self.pi.n != n:
            raise ValueError(f"length mismatch: Y={n}, T={T.size}, pi={self.pi.n}")
        t, tp = self.contrast
        if t == tp:
            raise ValueError("contrast needs two distinct exposure values")
        for v in (t, tp):
            if v not in self.pi.values:
                raise ValueError(f"exposure value {v!r} not among {self.pi.values}")
        pt, ptp = self.pi.pi(t), self.pi.pi(tp)
        bad = np.flatnonzero((pt <= 0) | (pt >= 1) | (ptp <= 0) | (ptp >= 1))
        if bad.size:
            raise OverlapError(f"propensities outside (0, 1) for units {bad[:10].tolist()}", bad)
        Z = self.Z
        if Z is not None:
            Z = np.asarray(Z, dtype=np.float64)
            if Z.ndim == 1:
                Z = Z[:, None]
            if Z.shape[0] != n:
                raise ValueError(f"Z has {Z.shape[0]} rows, expected {n}")
            if self.z_names is not None and len(self.z_names) != Z.shape[1]:
                raise ValueError("z_names length does not match Z columns")
        if self.D is not None and np.asarray(self.D).size != n:
            raise ValueError("D length mismatch")
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "contrast", (t, tp))

    @property
    def n(self) -> int:
        return self.Y.size

    @property
    def q(self) -> int:
        return 0 if self.Z is None else self.Z.shape[1]

    def column_names(self) -> list[str]:
        if self.z_names is not None:
            return list(self.z_names)
        return [f"z{k}" for k in range(self.q)]

    def with_Z(self, Z, names=None) -> "Dataset":
        return Dataset(self.Y, self.T, self.pi, self.contrast, Z, self.D, names)

    def arm(self, t) -> np.ndarray:
        return (self.T == t).astype(np.float64)

    def inv_pi(self, t) -> np.ndarray:
        return self.arm(t) / self.pi.pi(t)


@dataclass
class AdjustedEstimate:
    """Point estimate with its HAC variance of ``sqrt(n) (tau_hat - tau)``."""

    method: str
    tau_hat: float
    sigma2_hat: float
    n: int
    beta: np.ndarray | dict | None = None
    level: float = 0.95
    b_n: int | None = None
    contrast: tuple = (1, 0)
    negative_variance: bool = False
    ci: tuple = field(default=(np.nan, np.nan))

    def __post_init__(self):
        from .hac import wald_ci

        self.negative_variance = bool(self.sigma2_hat < 0)
        if np.isfinite(self.sigma2_hat) and not self.negative_variance:
            self.ci = wald_ci(self.tau_hat, self.sigma2_hat, self.n, self.level)

    @property
    def se(self) -> float:
        if self.negative_variance or not np.isfinite(self.sigma2_hat):
            return float("nan")
        return float(np.sqrt(self.sigma2_hat / self.n))

    def to_record(self) -> dict:
        if isinstance(self.beta, dict):
            beta = {str(k): np.asarray(v).tolist() for k, v in self.beta.items()}
        elif self.beta is None:
            beta = None
        else:
            beta = np.asarray(self.beta).tolist()
        return {
            "method": self.method,
            "tau_hat": float(self.tau_hat),
            "se": _none_if_nan(self.se),
            "ci_low": _none_if_nan(self.ci[0]),
            "ci_high": _none_if_nan(self.ci[1]),
            "beta": beta,
            "n": int(self.n),
            "b_n": self.b_n,
            "contrast": list(self.contrast),
        }


def _none_if_nan(x):
    x = float(x)
    return None if np.isnan(x) else x


# ---------------------------------------------------------------------------
# weights and means


def ht_weights(ds: Dataset) -> np.ndarray:
    t, tp = ds.contrast
    return ds.inv_pi(t) - ds.inv_pi(tp)


def _arm_mass(ds: Dataset, t) -> float:
    mass = ds.inv_pi(t).sum() / ds.n
    if mass == 0:
        raise EmptyArmError(f"no unit has exposure {t!r}")
    return mass


def haj_weights(ds: Dataset) -> np.ndarray:
    """HT weights with each arm rescaled so its weights average to one."""
    t, tp = ds.contrast
    return ds.inv_pi(t) / _arm_mass(ds, t) - ds.inv_pi(tp) / _arm_mass(ds, tp)


def weights(ds: Dataset, star: str) -> np.ndarray:
    return ht_weights(ds) if _check_star(star) == "HT" else haj_weights(ds)


def mean_star(values, ds: Dataset, star: str, t):
    """Weighted arm mean of ``values`` (vector or n x k matrix) at exposure ``t``."""
    _check_star(star)
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] != ds.n:
        raise ValueError("values length mismatch")
    wt = ds.inv_pi(t)
    if star == "HT":
        return wt @ v / ds.n
    # shifting by one arm member's value keeps constant inputs exact
    mass = _arm_mass(ds, t)
    pivot = v[np.flatnonzero(wt)[0]]
    return pivot + (wt @ (v - pivot) / ds.n) / mass


def _contrast(values, ds: Dataset, star: str) -> float:
    if star == "HT":
        return float(ht_weights(ds) @ values / ds.n)
    t, tp = ds.contrast
    return float(mean_star(values, ds, "Haj", t) - mean_star(values, ds, "Haj", tp))


def tau_unadjusted(ds: Dataset, star: str) -> float:
    return _contrast(ds.Y, ds, _check_star(star))


def _residual(ds: Dataset, beta) -> np.ndarray:
    if beta is None:
        return ds.Y
    if isinstance(beta, Mapping):
        out = ds.Y.copy()
        for t, b in beta.items():
            b = np.asarray(b, dtype=np.float64).ravel()
            if b.size != ds.q:
                raise ValueError(f"coefficient for exposure {t!r} has length {b.size}, Z has {ds.q} columns")
            mask = ds.T == t
            out[mask] -= ds.Z[mask] @ b
        return out
    b = np.asarray(beta, dtype=np.float64).ravel()
    if b.size != ds.q:
        raise ValueError(f"coefficient has length {b.size}, Z has {ds.q} columns")
    return ds.Y - (ds.Z @ b if ds.q else 0.0)


def tau_adjusted(ds: Dataset, star: str, beta) -> float:
    """Weighted estimator applied to ``Y - Z beta(T)``; ``beta`` is a vector or a dict by exposure."""
    return _contrast(_residual(ds, beta), ds, _check_star(star))


# ---------------------------------------------------------------------------
# weighted least squares


def wls_qr(X: np.ndarray, y: np.ndarray, w: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
    """Weighted least squares by pivoted QR with a relative rank tolerance.

    Raises ``RankDeficientError`` naming the columns dropped by the pivoting.
    """
    sw = np.sqrt(w)
    A = X * sw[:, None]
    b = y * sw
    Q, R, piv = la.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        rank = 0
    else:
        rank = int(np.sum(diag > RANK_TOL * diag[0]))
    if rank < X.shape[1]:
        names = list(names) if names is not None else [f"col{k}" for k in range(X.shape[1])]
        dropped = [names[k] for k in piv[rank:]]
        raise RankDeficientError(f"design matrix is rank deficient; collinear columns: {', '.join(dropped)}", dropped)
    coef = np.empty(X.shape[1])
    coef[piv] = la.solve_triangular(R, Q.T @ b)
    return coef


def _hac_for(ds_adj: Dataset, beta, g, b_n, mode):
    from .hac import hac_sigma2, influence_terms

    return hac_sigma2(influence_terms(ds_adj, "Haj"), beta, g, b_n, mode)


def fisher_wls(ds: Dataset, g=None, b_n: int = 3, mode: str = "inclusive", level: float = 0.95) -> AdjustedEstimate:
    """Intercept per observed exposure value plus shared slopes, weights ``1 / pi_i(T_i)``.

    With ``g`` given the HAC variance of the equivalent Hajek form is
    attached; otherwise ``sigma2_hat`` is NaN.
    """
    t, tp = ds.contrast
    values = [v for v in ds.pi.values if np.any(ds.T == v)]
    for v in (t, tp):
        if v not in values:
            raise EmptyArmError(f"no unit has exposure {v!r}")
    pi_own = ds.pi.at(ds.T)
    if np.any(pi_own <= 0):
        raise OverlapError("zero propensity at a realized exposure", np.flatnonzero(pi_own <= 0))
    arms = np.column_stack([(ds.T == v).astype(np.float64) for v in values])
    X = np.hstack([arms, ds.Z]) if ds.q else arms
    names = [f"T={v}" for v in values] + ds.column_names()
    coef = wls_qr(X, ds.Y, 1.0 / pi_own, names)
    beta = coef[len(values):]
    tau = coef[values.index(t)] - coef[values.index(tp)]
    tau_rep = tau_adjusted(ds, "Haj", beta)
    if not np.isclose(tau, tau_rep, rtol=0, atol=1e-10 * max(1.0, abs(tau))):
        raise AssertionError(f"Fisher estimate {tau} differs from its weighted form {tau_rep}")
    sigma2 = _hac_for(ds, beta, g, b_n, mode) if g is not None else float("nan")
    return AdjustedEstimate("F", float(tau), sigma2, ds.n, beta, level, b_n if g is not None else None, ds.contrast)


def lin_wls(ds: Dataset, g=None, b_n: int = 3, mode: str = "inclusive", level: float = 0.95) -> AdjustedEstimate:
    """Separate intercept and slopes in each contrast arm, weights ``1 / pi_i(t)``."""
    from .hac import interact

    intercepts, betas = {}, {}
    names = ["intercept"] + ds.column_names()
    for v in ds.contrast:
        mask = ds.T == v
        if not mask.any():
            raise EmptyArmError(f"no unit has exposure {v!r}")
        Xa = np.ones((int(mask.sum()), 1))
        if ds.q:
            Xa = np.hstack([Xa, ds.Z[mask]])
        try:
            coef = wls_qr(Xa, ds.Y[mask], 1.0 / ds.pi.pi(v)[mask], names)
        except RankDeficientError as exc:
            raise RankDeficientError(f"arm T={v}: {exc}", exc.columns) from None
        intercepts[v], betas[v] = coef[0], coef[1:]
    t, tp = ds.contrast
    tau = intercepts[t] - intercepts[tp]
    tau_rep = tau_adjusted(ds, "Haj", betas)
    if not np.isclose(tau, tau_rep, rtol=0, atol=1e-10 * max(1.0, abs(tau))):
        raise AssertionError(f"Lin estimate {tau} differs from its weighted form {tau_rep}")
    if g is not None:
        ds_int = ds.with_Z(interact(ds.Z, ds.T, ds.contrast)) if ds.q else ds
        stacked = np.concatenate([betas[t], betas[tp]])
        sigma2 = _hac_for(ds_int, stacked, g, b_n, mode)
    else:
        sigma2 = float("nan")
    return AdjustedEstimate("L", float(tau), sigma2, ds.n, betas, level, b_n if g is not None else None, ds.contrast)
