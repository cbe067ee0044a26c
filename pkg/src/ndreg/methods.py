"""Named estimation methods and their evaluation on one realized experiment."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .auxiliary import AuxiliarySpec, build_auxiliary, phi0_apply
from .design import PropensityTable
from .errors import EstimationError, SingularSystemError
from .estimators import AdjustedEstimate, Dataset, fisher_wls, lin_wls, tau_unadjusted
from .hac import hac_sigma2, influence_terms, nd_solve
from .netgraph import Graph

__all__ = ["MethodSpec", "parse_method", "EstimationContext", "evaluate_methods"]

_PATTERN = re.compile(
    r"^(?:(?P<plain>HT|Haj|F|L|ND-F|ND-L)"
    r"|(?P<family>F|ND)-phi0\((?P<aux>[A-Za-z_][\w]*)\)"
    r"|ND-(?P<raw>[A-Za-z_][\w]*))"
    r"(?:\[(?P<star>HT|Haj)\])?$"
)


@dataclass(frozen=True)
class MethodSpec:
    """``kind`` is one of HT, Haj, F, L, ND-F, ND-L, F-phi0, ND-phi0, ND-raw."""

    name: str
    kind: str
    aux: str | None = None
    star: str = "Haj"


def parse_method(name: str) -> MethodSpec:
    canon = name.strip().replace("φ₀", "phi0").replace("φ0", "phi0")
    m = _PATTERN.match(canon)
    if m is None:
        raise ValueError(f"unrecognized method {name!r}")
    star = m["star"]
    if m["plain"]:
        kind = m["plain"]
        if kind in ("HT", "Haj"):
            if star is not None and star != kind:
                raise ValueError(f"method {name!r} has a conflicting estimator type")
            return MethodSpec(canon, kind, None, kind)
        return MethodSpec(canon, kind, None, star or "Haj")
    if m["family"]:
        return MethodSpec(canon, f"{m['family']}-phi0", m["aux"], star or "Haj")
    return MethodSpec(canon, "ND-raw", m["raw"], star or "Haj")


@dataclass(eq=False)
class EstimationContext:
    """Fixed inputs shared by every replication of a study or one analysis."""

    g: Graph
    pi: PropensityTable
    contrast: tuple
    X: np.ndarray
    b_n: int = 3
    bandwidth_mode: str = "inclusive"
    level: float = 0.95
    aux: dict = field(default_factory=dict)
    normalizers: dict = field(default_factory=dict)
    x_names: list | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        self.X = X[:, None] if X.ndim == 1 else X
        if self.x_names is None:
            self.x_names = [f"x{k}" for k in range(self.X.shape[1])]

    def needed_aux(self, methods) -> set:
        return {m.aux for m in methods if m.aux is not None}


def _unadjusted(ds: Dataset, spec: MethodSpec, ctx: EstimationContext) -> AdjustedEstimate:
    tau = tau_unadjusted(ds, spec.star)
    sigma2 = hac_sigma2(influence_terms(ds, spec.star), None, ctx.g, ctx.b_n, ctx.bandwidth_mode)
    return AdjustedEstimate(spec.name, tau, sigma2, ds.n, None, ctx.level, ctx.b_n, ds.contrast)


def _one(spec: MethodSpec, base: Dataset, ctx: EstimationContext, aux_values: dict) -> AdjustedEstimate:
    kind = spec.kind
    if kind in ("HT", "Haj"):
        return _unadjusted(base, spec, ctx)
    if kind in ("F", "L", "ND-F", "ND-L"):
        ds = base.with_Z(ctx.X, ctx.x_names)
    else:
        if spec.aux not in aux_values:
            raise KeyError(f"method {spec.name!r} refers to unknown auxiliary {spec.aux!r}")
        G, names = aux_values[spec.aux]
        if kind != "ND-raw":
            if spec.aux not in ctx.normalizers:
                raise KeyError(f"no fitted normalizer for auxiliary {spec.aux!r}")
            G = phi0_apply(ctx.normalizers[spec.aux], G, base)
            names = [f"phi0({c})" for c in names]
        ds = base.with_Z(G, names)
    if kind in ("F", "F-phi0"):
        est = fisher_wls(ds, ctx.g, ctx.b_n, ctx.bandwidth_mode, ctx.level)
    elif kind == "L":
        est = lin_wls(ds, ctx.g, ctx.b_n, ctx.bandwidth_mode, ctx.level)
    elif kind == "ND-L":
        est = nd_solve(ds, spec.star, ctx.g, ctx.b_n, "per_exposure", ctx.bandwidth_mode, ctx.level, spec.name)
    else:
        est = nd_solve(ds, spec.star, ctx.g, ctx.b_n, "pooled", ctx.bandwidth_mode, ctx.level, spec.name)
    est.method = spec.name
    return est


def evaluate_methods(ctx: EstimationContext, methods, Y, T, D) -> list:
    """Estimate for each method; failures are returned as exception instances.

    Only estimation failures (empty arms, rank or singularity problems) are
    captured; anything else propagates.
    """
    base = Dataset(Y, T, ctx.pi, ctx.contrast, None, D)
    D = np.asarray(D)
    aux_values = {}
    for name in ctx.needed_aux(methods):
        spec: AuxiliarySpec = ctx.aux[name] if name in ctx.aux else None
        if spec is None:
            continue
        aux_values[name] = (build_auxiliary(spec, ctx.X, D, ctx.g), spec.names(ctx.X))
    out = []
    for spec in methods:
        try:
            out.append(_one(spec, base, ctx, aux_values))
        except (EstimationError, SingularSystemError) as exc:
            out.append(exc)
    return out
