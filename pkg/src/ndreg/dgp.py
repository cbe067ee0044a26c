"""Outcome models, noise, ground-truth effects and SUTVA variance formulas."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from ._streams import CompensatedSum, as_seed, ordered_map, stream
from .design import Design, ExposureSpec, PropensityTable, local_assignments, local_exposure, sample_assignment
from .errors import ConvergenceError
from .netgraph import Graph, row_normalized_apply

__all__ = [
    "LinearInMeans",
    "NonlinearContagion",
    "SutvaCounterexample",
    "NoiseModel",
    "TruthEstimate",
    "SutvaVariances",
    "generate_outcomes",
    "ground_truth_tau",
    "exact_tau_linear",
    "sutva_asymptotic_variances",
]

DENSE_LIMIT = 4000
_MEMO_LOCK = threading.Lock()


def _covariate_term(alpha4, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        return alpha4 * X
    return X @ np.broadcast_to(np.asarray(alpha4, dtype=np.float64), (X.shape[1],))


def _row_operator(g: Graph):
    import scipy.sparse as sp

    if np.any(g.degree == 0):
        raise ValueError("row normalization undefined: graph has isolated units")
    return (sp.diags(1.0 / g.degree) @ g.adjacency.astype(np.float64)).tocsr()


@dataclass(frozen=True)
class LinearInMeans:
    """``Y = (I - a1 O)^{-1} [a0 + (a2 O + a3 I) D + a4 X + eps]``."""

    alpha: tuple = (-1.0, 0.1, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.alpha) != 5:
            raise ValueError("need five coefficients")
        if abs(self.alpha[1]) >= 1:
            raise ValueError("peer coefficient must satisfy |alpha1| < 1")
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))

    def _rhs(self, g, D2, X, eps):
        a0, _, a2, a3, a4 = self.alpha
        D = D2.astype(np.float64)
        return a0 + a2 * row_normalized_apply(g, D) + a3 * D + _covariate_term(a4, X) + eps

    def _solve(self, g: Graph, rhs: np.ndarray) -> np.ndarray:
        a1 = self.alpha[1]
        if a1 == 0:
            return rhs
        if g.n < DENSE_LIMIT:
            # concurrent LAPACK solves on large systems are not safe with every
            # BLAS build, so the inverse is formed once and applied by matmul
            key = ("lim_inverse", a1)
            with _MEMO_LOCK:
                if key not in g.memo:
                    g.memo[key] = la.inv(np.eye(g.n) - a1 * _row_operator(g).toarray())
            return rhs @ g.memo[key].T
        # Neumann series: sum_k a1^k O^k rhs, converges since ||a1 O||_inf = |a1| < 1
        Y = rhs.copy()
        term = rhs
        for _ in range(10_000):
            term = a1 * row_normalized_apply(g, term)
            Y += term
            if np.abs(term).max() < 1e-12:
                break
        return Y

    def generate(self, g: Graph, D, X, eps) -> np.ndarray:
        D2 = np.atleast_2d(D)
        rhs = self._rhs(g, D2, X, eps)
        Y = self._solve(g, rhs)
        resid = Y - self.alpha[1] * row_normalized_apply(g, Y) - rhs
        if np.abs(resid).max(initial=0.0) >= 1e-8:
            raise ConvergenceError(f"linear-in-means solve residual {np.abs(resid).max():.3g}")
        return Y[0] if np.ndim(D) == 1 else Y

    def linear_form(self, g: Graph, X, eps) -> tuple[np.ndarray, np.ndarray]:
        """``(c, K)`` with ``Y(d) = c + K d`` for every assignment ``d``."""
        a0, a1, a2, a3, a4 = self.alpha
        O = _row_operator(g).toarray()
        M = la.inv(np.eye(g.n) - a1 * O)
        K = M @ (a2 * O + a3 * np.eye(g.n))
        c = M @ (a0 + _covariate_term(a4, X) + eps)
        return c, K


@dataclass(frozen=True)
class NonlinearContagion:
    """Binary outcomes from the fixed point of a monotone threshold update.

    Iterates ``Y <- 1(a0 + a1 O Y + a2 O D + a3 D + a4 X + eps > 0)`` from
    ``Y = 0``. With ``a1 >= 0`` the sequence is nondecreasing, so it stops
    within ``n`` steps.
    """

    alpha: tuple = (-1.0, 1.5, 1.0, 1.0, 1.0)
    max_iters: int | None = None

    def __post_init__(self):
        if len(self.alpha) != 5:
            raise ValueError("need five coefficients")
        if self.alpha[1] < 0:
            raise ValueError("contagion coefficient alpha1 must be nonnegative")
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))

    def generate(self, g: Graph, D, X, eps, return_iters: bool = False):
        a0, a1, a2, a3, a4 = self.alpha
        D2 = np.atleast_2d(D).astype(np.float64)
        base = a0 + a2 * row_normalized_apply(g, D2) + a3 * D2 + _covariate_term(a4, X) + eps
        Y = np.zeros_like(base)
        limit = self.max_iters if self.max_iters is not None else g.n
        iters = 0
        while True:
            nxt = (base + a1 * row_normalized_apply(g, Y) > 0).astype(np.float64)
            iters += 1
            if np.any(nxt < Y):
                raise ConvergenceError("contagion iterates are not monotone")
            if np.array_equal(nxt, Y):
                break
            if iters > limit:
                raise ConvergenceError(f"contagion did not converge in {limit} iterations")
            Y = nxt
        out = Y[0] if np.ndim(D) == 1 else Y
        # the last sweep only confirms the fixed point
        return (out, max(iters - 1, 1)) if return_iters else out


@dataclass(frozen=True, eq=False)
class SutvaCounterexample:
    """``Y_i = X_i (-(1 - D_i) + D_i pi_i / (1 - pi_i)) + eps_i`` with fixed ``pi``."""

    p: np.ndarray

    def generate(self, g: Graph, D, X, eps) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 1:
            raise ValueError("the counterexample uses a single covariate")
        p = np.asarray(self.p, dtype=np.float64)
        D = np.asarray(D, dtype=np.float64)
        return X * (-(1 - D) + (p / (1 - p)) * D) + eps

    def potential_outcomes(self, X, eps) -> tuple[np.ndarray, np.ndarray]:
        """``(mu(1), mu(0))`` per unit."""
        p = np.asarray(self.p, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        return X * p / (1 - p) + eps, -X + eps


def generate_outcomes(model, g: Graph, D, X, eps) -> np.ndarray:
    return model.generate(g, D, X, eps)


@dataclass(frozen=True)
class NoiseModel:
    """``coordinate_shift``: ``v_i + x_coord_i - 0.5``; ``normal``: iid N(0, sd^2)."""

    kind: str = "coordinate_shift"
    sd: float = 1.0

    def __post_init__(self):
        if self.kind not in ("coordinate_shift", "normal"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sd < 0:
            raise ValueError("sd must be nonnegative")

    def draw(self, rng, n: int, coords=None) -> np.ndarray:
        rng = np.random.default_rng(rng)
        v = rng.normal(0.0, self.sd, size=n)
        if self.kind == "normal":
            return v
        if coords is None:
            raise ValueError("coordinate_shift noise needs unit coordinates")
        return v + np.asarray(coords)[:, 0] - 0.5


# ---------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True, eq=False)
class TruthEstimate:
    tau: float
    se: float
    reps: int
    mu_t: np.ndarray | None = None
    mu_tp: np.ndarray | None = None

    @property
    def tau_i(self):
        return None if self.mu_t is None else self.mu_t - self.mu_tp


def ground_truth_tau(
    model,
    g: Graph,
    exposure: ExposureSpec,
    design: Design,
    contrast,
    X,
    eps,
    pi: PropensityTable,
    mc_reps: int = 100_000,
    rng=None,
    batch: int = 1000,
    threads: int = 1,
) -> TruthEstimate:
    """Monte Carlo average of the HT estimate, with per-unit arm means.

    Unbiased because ``E[Y_i 1(T_i = t)] = pi_i(t) mu_i(t)``.
    """
    if mc_reps < 1:
        raise ValueError("mc_reps must be at least 1")
    seed = as_seed(rng)
    t, tp = contrast
    it, itp = 1.0 / pi.pi(t), 1.0 / pi.pi(tp)
    sizes = [min(batch, mc_reps - s) for s in range(0, mc_reps, batch)]

    def one(k):
        D = sample_assignment(design, stream(seed, k), size=sizes[k])
        Y = model.generate(g, D, X, eps)
        T = exposure.evaluate(D, g)
        yt = Y * (T == t) * it
        ytp = Y * (T == tp) * itp
        est = (yt - ytp).mean(axis=1)
        return yt.sum(axis=0), ytp.sum(axis=0), est.sum(), (est * est).sum()

    acc_t, acc_tp = CompensatedSum(g.n), CompensatedSum(g.n)
    acc_e, acc_e2 = CompensatedSum(), CompensatedSum()
    for part in ordered_map(one, range(len(sizes)), threads):
        acc_t.add(part[0])
        acc_tp.add(part[1])
        acc_e.add(part[2])
        acc_e2.add(part[3])
    tau = float(acc_e.value / mc_reps)
    if mc_reps > 1:
        var = max(float(acc_e2.value - mc_reps * tau * tau) / (mc_reps - 1), 0.0)
        se = float(np.sqrt(var / mc_reps))
    else:
        se = float("nan")
    return TruthEstimate(tau, se, mc_reps, acc_t.value / mc_reps, acc_tp.value / mc_reps)


def exact_tau_linear(
    model: LinearInMeans,
    g: Graph,
    exposure: ExposureSpec,
    design: Design,
    contrast,
    X,
    eps,
    max_units: int = 20,
) -> TruthEstimate:
    """Exact effect for an outcome linear in the assignment.

    ``mu_i(t) = c_i + sum_j K_ij E[D_j | T_i = t]``; only units in the
    exposure's locality ball have conditional means different from ``p_j``.
    """
    if exposure.radius is None:
        raise ValueError("exposure locality radius must be declared")
    c, K = model.linear_form(g, X, eps)
    p = design.p
    base = c + K @ p
    t, tp = contrast
    mu = {t: base.copy(), tp: base.copy()}
    for i in range(g.n):
        nodes, patterns, probs = local_assignments(g, design, i, exposure.radius, max_units)
        T = local_exposure(exposure, g, nodes, patterns, i)
        for v in (t, tp):
            mass = probs @ (T == v)
            if mass <= 0:
                raise ValueError(f"unit {i} never reaches exposure {v!r}")
            cond = (probs * (T == v)) @ patterns / mass
            mu[v][i] += K[i, nodes] @ (cond - p[nodes])
    tau = float(np.mean(mu[t] - mu[tp]))
    return TruthEstimate(tau, 0.0, 0, mu[t], mu[tp])


# ---------------------------------------------------------------------------
# SUTVA asymptotic variances


@dataclass(frozen=True, eq=False)
class SutvaVariances:
    sigma2_haj: float
    sigma2_f: float
    sigma2_l: float
    beta_l1: np.ndarray
    beta_l0: np.ndarray
    beta_f: np.ndarray
    beta_tilde1: np.ndarray | None = None
    beta_tilde0: np.ndarray | None = None


def sutva_asymptotic_variances(X, p1, mu1, mu0) -> SutvaVariances:
    """Limiting variances of the Hajek, Fisher and Lin estimators under SUTVA.

    Covariates are centered here, matching the centered-covariate setting
    the formulas assume.
    """
    Xm = _as_matrix(X)
    Xm = Xm - Xm.mean(axis=0)
    p1 = np.asarray(p1, dtype=np.float64)
    p0 = 1.0 - p1
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu0 = np.asarray(mu0, dtype=np.float64)
    if np.any((p1 <= 0) | (p1 >= 1)):
        raise ValueError("propensities must lie in (0, 1)")
    n = Xm.shape[0]
    S = Xm.T @ Xm
    b1 = la.solve(S, Xm.T @ mu1, assume_a="pos")
    b0 = la.solve(S, Xm.T @ mu0, assume_a="pos")
    bf = 0.5 * (b1 + b0)
    core = (mu1 - mu1.mean()) / p1 + (mu0 - mu0.mean()) / p0
    weight = p0 * p1

    def avg(resid):
        return float(np.sum(weight * resid**2) / n)

    s_haj = avg(core)
    s_l = avg(core - Xm @ b1 / p1 - Xm @ b0 / p0)
    s_f = avg(core - (Xm @ bf) / (p1 * p0))

    q = Xm.shape[1]
    A11 = (Xm * (p0 / p1)[:, None]).T @ Xm
    A22 = (Xm * (p1 / p0)[:, None]).T @ Xm
    block = np.block([[A11, S], [S, A22]])
    rhs = np.concatenate([Xm.T @ (p0 / p1 * mu1) + Xm.T @ mu0, Xm.T @ mu1 + Xm.T @ (p1 / p0 * mu0)])
    bt1 = bt0 = None
    try:
        cond = np.linalg.cond(block)
        if np.isfinite(cond) and cond < 1e12:
            sol = la.solve(block, rhs)
            bt1, bt0 = sol[:q], sol[q:]
    except la.LinAlgError:
        pass
    return SutvaVariances(s_haj, s_f, s_l, b1, b0, bf, bt1, bt0)


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X[:, None] if X.ndim == 1 else X
