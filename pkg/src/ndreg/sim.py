"""Repeated-sampling studies: fixture construction, replication loop and reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.stats import norm

from ._streams import ordered_map, stream, subseed
from .auxiliary import (
    ExposureInteracted,
    InteractedLinearInMeansSet,
    LinearInMeansSet,
    RawCovariates,
    phi0_exact,
    phi0_fit,
)
from .design import Design, Direct, exposure_from_dict, overlap_check, propensity_exact, propensity_mc, sample_assignment
from .dgp import (
    LinearInMeans,
    NoiseModel,
    NonlinearContagion,
    SutvaCounterexample,
    TruthEstimate,
    exact_tau_linear,
    ground_truth_tau,
)
from .errors import EstimationError, OverlapError
from .methods import EstimationContext, evaluate_methods, parse_method
from .netgraph import Graph, rgg_generate

__all__ = [
    "Scenario",
    "Fixture",
    "Report",
    "MethodRow",
    "StudyError",
    "load_scenario",
    "bundled_scenario",
    "build_fixture",
    "run_study",
    "emit_report",
    "REPORT_COLUMNS",
]

SCHEMA_VERSION = 1
DEFAULT_METHODS = [
    "HT", "Haj", "F", "L", "F-phi0(G1)", "F-phi0(G2)",
    "ND-F", "ND-phi0(G1)", "ND-G1", "ND-L", "ND-phi0(G2)", "ND-G2",
]

# stream keys under the root seed
_GRAPH, _COVARIATES, _NOISE, _DESIGN, _PHI0, _TRUTH, _REPS, _PROPENSITY = range(8)


class StudyError(RuntimeError):
    """A study cannot produce trustworthy metrics."""


class ScenarioError(ValueError):
    """The scenario document is malformed; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


_DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "name": "study",
    "seed": 0,
    "graph": {"kind": "rgg", "n": 1000, "density_factor": 1.5},
    "design": {"p": 0.5},
    "exposure": {"kind": "neighbor_threshold", "threshold": "half_degree"},
    "contrast": [1, 0],
    "covariates": {"sd": 1.0, "dim": 1},
    "noise": {"kind": "coordinate_shift", "sd": 1.0},
    "outcome": {"kind": "linear_in_means"},
    "auxiliaries": {},
    "phi0": {"method": "mc", "reps": 100_000},
    "truth": {"method": "auto", "reps": None},
    "b_n": 3,
    "bandwidth_mode": "inclusive",
    "reps": 2000,
    "level": 0.95,
    "methods": DEFAULT_METHODS,
    "max_failure_rate": 0.01,
    "max_truth_rel_se": 0.01,
}

_KNOWN = set(_DEFAULTS)


@dataclass
class Scenario:
    """A simulation configuration; ``config`` is the validated JSON document."""

    config: dict

    def __post_init__(self):
        cfg = {**_DEFAULTS, **self.config}
        unknown = set(self.config) - _KNOWN
        if unknown:
            raise ScenarioError(f"unknown keys {sorted(unknown)}", "scenario")
        if cfg["schema_version"] != SCHEMA_VERSION:
            raise ScenarioError(f"unsupported version {cfg['schema_version']!r}", "schema_version")
        for key in ("reps",):
            if not isinstance(cfg[key], int) or cfg[key] < 1:
                raise ScenarioError("must be a positive integer", key)
        if not isinstance(cfg["b_n"], int) or cfg["b_n"] < 0:
            raise ScenarioError("must be a nonnegative integer", "b_n")
        if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
            raise ScenarioError("must be a nonnegative integer", "seed")
        if len(cfg["contrast"]) != 2 or cfg["contrast"][0] == cfg["contrast"][1]:
            raise ScenarioError("needs two distinct exposure values", "contrast")
        if not 0 < cfg["level"] < 1:
            raise ScenarioError("must lie in (0, 1)", "level")
        for k, m in enumerate(cfg["methods"]):
            try:
                spec = parse_method(m)
            except ValueError as exc:
                raise ScenarioError(str(exc), f"methods[{k}]") from None
            if spec.aux is not None and spec.aux not in cfg["auxiliaries"]:
                raise ScenarioError(f"auxiliary {spec.aux!r} is not defined", f"methods[{k}]")
        if cfg["graph"].get("kind") not in ("rgg", "empty", "edges"):
            raise ScenarioError(f"unknown kind {cfg['graph'].get('kind')!r}", "graph.kind")
        if cfg["outcome"].get("kind") not in ("linear_in_means", "nonlinear_contagion", "sutva_counterexample"):
            raise ScenarioError(f"unknown kind {cfg['outcome'].get('kind')!r}", "outcome.kind")
        if cfg["phi0"].get("method", "mc") not in ("mc", "exact"):
            raise ScenarioError("must be 'mc' or 'exact'", "phi0.method")
        if cfg["truth"].get("method", "auto") not in ("auto", "mc", "exact"):
            raise ScenarioError("must be 'auto', 'mc' or 'exact'", "truth.method")
        self.config = cfg

    def __getitem__(self, key):
        return self.config[key]

    @property
    def name(self) -> str:
        return self.config["name"]

    def replace(self, **overrides) -> "Scenario":
        cfg = json.loads(json.dumps(self.config))
        cfg.update(overrides)
        return Scenario(cfg)

    def to_json(self) -> str:
        return json.dumps(self.config, indent=2, sort_keys=True)


def load_scenario(path) -> Scenario:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}", str(path)) from None
    if not isinstance(doc, dict):
        raise ScenarioError("top level must be an object", str(path))
    return Scenario(doc)


def bundled_scenario(name: str) -> Scenario:
    """One of ``linear_in_means``, ``nonlinear_contagion``, ``counterexample``."""
    res = resources.files("ndreg") / "scenarios" / f"{name}.json"
    if not res.is_file():
        raise FileNotFoundError(f"no bundled scenario named {name!r}")
    return Scenario(json.loads(res.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# fixture


@dataclass(eq=False)
class Fixture:
    """Everything held fixed across replications."""

    graph: Graph
    coords: np.ndarray | None
    X: np.ndarray
    X_est: np.ndarray
    eps: np.ndarray
    design: Design
    exposure: object
    pi: object
    model: object
    context: EstimationContext
    methods: list
    truth: object


def _graph(s: Scenario):
    cfg = s["graph"]
    kind = cfg["kind"]
    if kind == "rgg":
        gg = rgg_generate(int(cfg["n"]), float(cfg.get("density_factor", 1.5)), stream(s["seed"], _GRAPH))
        return gg.graph, gg.coords
    if kind == "empty":
        return Graph(int(cfg["n"])), None
    from .netgraph import read_edge_csv

    g = read_edge_csv(cfg["path"], n=cfg.get("n"))
    return g, None


def _design(s: Scenario, n: int) -> Design:
    cfg = s["design"]
    if "p" in cfg:
        return Design.uniform(n, float(cfg["p"]))
    if "p_uniform" in cfg:
        lo, hi = cfg["p_uniform"]
        return Design(stream(s["seed"], _DESIGN).uniform(lo, hi, size=n))
    raise ScenarioError("needs 'p' or 'p_uniform'", "design")


def _model(s: Scenario, design: Design):
    cfg = s["outcome"]
    kind = cfg["kind"]
    if kind == "linear_in_means":
        return LinearInMeans(tuple(cfg.get("alpha", (-1, 0.1, 1, 1, 1))))
    if kind == "nonlinear_contagion":
        return NonlinearContagion(tuple(cfg.get("alpha", (-1, 1.5, 1, 1, 1))), cfg.get("max_iters"))
    return SutvaCounterexample(design.p)


def _aux_spec(cfg: dict, exposure, contrast):
    kind = cfg.get("kind")
    if kind == "raw":
        return RawCovariates()
    if kind == "linear_in_means":
        return LinearInMeansSet()
    if kind == "interacted_linear_in_means":
        return InteractedLinearInMeansSet(exposure, tuple(contrast))
    if kind == "interacted":
        base = _aux_spec(cfg.get("base", {"kind": "raw"}), exposure, contrast)
        return ExposureInteracted(base, exposure, tuple(contrast))
    raise ScenarioError(f"unknown auxiliary kind {kind!r}", "auxiliaries")


def build_fixture(s: Scenario, threads: int = 1) -> Fixture:
    seed = s["seed"]
    g, coords = _graph(s)
    n = g.n
    cov = s["covariates"]
    dim = int(cov.get("dim", 1))
    rng_x = stream(seed, _COVARIATES)
    X = rng_x.normal(0.0, float(cov.get("sd", 1.0)), size=n if dim == 1 else (n, dim))
    X_est = X - X.mean(axis=0)
    nz = s["noise"]
    eps = NoiseModel(nz.get("kind", "coordinate_shift"), float(nz.get("sd", 1.0))).draw(stream(seed, _NOISE), n, coords)
    design = _design(s, n)
    exposure = exposure_from_dict(s["exposure"], g)
    contrast = tuple(s["contrast"])
    try:
        pi = propensity_exact(exposure, design, g)
    except TypeError:
        pi = propensity_mc(exposure, design, g, 100_000, stream(seed, _PROPENSITY))
    report = overlap_check(pi, contrast, 0.01)
    if not report.passed:
        raise OverlapError(str(report), report.units)
    model = _model(s, design)

    methods = [parse_method(m) for m in s["methods"]]
    aux = {name: _aux_spec(cfg, exposure, contrast) for name, cfg in s["auxiliaries"].items()}
    normalizers = {}
    phi0_cfg = s["phi0"]
    need = {m.aux for m in methods if m.kind in ("F-phi0", "ND-phi0")}
    for k, name in enumerate(sorted(need)):
        if phi0_cfg.get("method", "mc") == "exact":
            normalizers[name] = phi0_exact(aux[name], exposure, design, g, X_est, contrast)
        else:
            normalizers[name] = phi0_fit(
                aux[name], exposure, design, g, X_est, pi, contrast,
                reps=int(phi0_cfg.get("reps", 100_000)),
                rng=subseed(seed, _PHI0, k),
                threads=threads,
            )
    ctx = EstimationContext(
        g, pi, contrast, X_est, s["b_n"], s["bandwidth_mode"], s["level"], aux, normalizers,
    )
    truth = _truth(s, model, g, exposure, design, contrast, X, eps, pi, threads)
    if truth.tau != 0 and truth.se > s["max_truth_rel_se"] * abs(truth.tau):
        raise StudyError(
            f"ground-truth Monte Carlo SE {truth.se:.3g} exceeds {s['max_truth_rel_se']:.0%} of |tau| = {abs(truth.tau):.3g}; "
            "increase truth.reps"
        )
    return Fixture(g, coords, X, X_est, eps, design, exposure, pi, model, ctx, methods, truth)


def _truth(s, model, g, exposure, design, contrast, X, eps, pi, threads) -> TruthEstimate:
    """Exact effect where a closed form is available, Monte Carlo otherwise."""
    method = s["truth"].get("method", "auto")
    if method != "mc":
        if isinstance(model, LinearInMeans) and exposure.radius is not None:
            return exact_tau_linear(model, g, exposure, design, contrast, X, eps)
        if isinstance(model, SutvaCounterexample) and isinstance(exposure, Direct) and tuple(contrast) == (1, 0):
            mu1, mu0 = model.potential_outcomes(X, eps)
            return TruthEstimate(float(np.mean(mu1 - mu0)), 0.0, 0, mu1, mu0)
        if method == "exact":
            raise ScenarioError("no exact effect for this outcome model and exposure", "truth.method")
    reps = s["truth"].get("reps") or 10 * s["reps"]
    return ground_truth_tau(model, g, exposure, design, contrast, X, eps, pi, reps, subseed(s["seed"], _TRUTH), threads=threads)


# ---------------------------------------------------------------------------
# report


REPORT_COLUMNS = [
    "method", "bias", "abs_bias", "oracle_se", "est_se", "oracle_coverage",
    "empirical_coverage", "failures", "negative_variance",
]


@dataclass
class MethodRow:
    method: str
    bias: float
    abs_bias: float
    oracle_se: float
    est_se: float
    oracle_coverage: float
    empirical_coverage: float
    failures: int
    negative_variance: int

    def as_list(self):
        return [getattr(self, c) for c in REPORT_COLUMNS]


@dataclass
class Report:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def row(self, method: str) -> MethodRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_dict(self) -> dict:
        return {
            "meta": {k: _clean(v) for k, v in self.meta.items()},
            "rows": [{c: _clean(getattr(r, c)) for c in REPORT_COLUMNS} for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False, allow_nan=False)

    @classmethod
    def from_dict(cls, doc: dict) -> "Report":
        rows = []
        for r in doc["rows"]:
            vals = {c: r[c] for c in REPORT_COLUMNS}
            for c in REPORT_COLUMNS[1:7]:
                vals[c] = float("nan") if vals[c] is None else float(vals[c])
            vals["failures"] = int(vals["failures"])
            vals["negative_variance"] = int(vals["negative_variance"])
            rows.append(MethodRow(**vals))
        meta = {k: (float("nan") if v is None else v) for k, v in doc.get("meta", {}).items()}
        return cls(rows, meta)

    @classmethod
    def from_json(cls, text: str) -> "Report":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, Report):
            return NotImplemented
        return self.to_json() == other.to_json()


def _clean(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return None if math.isnan(v) else v
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def _fmt(v, width=8):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{v:.3f}"


def emit_report(r: Report, fmt: str = "table") -> str:
    """Render as an aligned text table, CSV or JSON."""
    if fmt == "json":
        return r.to_json() + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in r.rows:
            w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row.as_list()])
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    header = ["method", "bias", "abs bias", "oracle SE", "est SE", "oracle cov", "emp cov", "failures", "neg var"]
    body = [[_fmt(x) for x in row.as_list()] for row in r.rows]
    widths = [max(len(h), *(len(b[k]) for b in body)) if body else len(h) for k, h in enumerate(header)]
    lines = []
    for k, v in r.meta.items():
        if k in ("name", "n", "reps", "tau_truth", "truth_se", "b_n", "seed", "mean_degree"):
            lines.append(f"# {k}: {_fmt(v) if isinstance(v, float) else v}")
    lines.append("  ".join(h.rjust(wd) if k else h.ljust(wd) for k, (h, wd) in enumerate(zip(header, widths))))
    for b in body:
        lines.append("  ".join(c.rjust(wd) if k else c.ljust(wd) for k, (c, wd) in enumerate(zip(b, widths))))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# study


def _replicate(fx: Fixture, seed: int, r: int):
    rng = stream(seed, _REPS, r)
    D = sample_assignment(fx.design, rng)
    Y = fx.model.generate(fx.graph, D, fx.X, fx.eps)
    T = fx.exposure.evaluate(D, fx.graph)
    try:
        results = evaluate_methods(fx.context, fx.methods, Y, T, D)
    except EstimationError as exc:
        results = [exc] * len(fx.methods)
    tau = np.full(len(fx.methods), np.nan)
    sig = np.full(len(fx.methods), np.nan)
    for k, res in enumerate(results):
        if not isinstance(res, Exception):
            tau[k] = res.tau_hat
            sig[k] = res.sigma2_hat
    return tau, sig


def run_study(s: Scenario, threads: int = 1, fixture: Fixture | None = None, keep_draws: bool = False) -> Report:
    """Fix the population once, then estimate over ``reps`` fresh assignments."""
    fx = fixture or build_fixture(s, threads)
    reps = s["reps"]
    seed = s["seed"]
    chunk = 64
    taus, sigs = [], []
    for start in range(0, reps, chunk):
        part = ordered_map(lambda r: _replicate(fx, seed, r), range(start, min(start + chunk, reps)), threads)
        for t_, s_ in part:
            taus.append(t_)
            sigs.append(s_)
    tau = np.array(taus).reshape(reps, len(fx.methods))
    sig = np.array(sigs).reshape(reps, len(fx.methods))
    n = fx.graph.n
    z = float(norm.ppf(0.5 + s["level"] / 2))
    truth = fx.truth.tau
    rows = []
    for k, m in enumerate(fx.methods):
        ok = np.isfinite(tau[:, k])
        failures = int((~ok).sum())
        neg = int((ok & (sig[:, k] < 0)).sum())
        if (failures + neg) > s["max_failure_rate"] * reps:
            raise StudyError(
                f"method {m.name}: {failures} failed and {neg} negative-variance replications out of {reps}"
            )
        est = tau[ok, k]
        bias = float(est.mean() - truth) if est.size else float("nan")
        oracle = float(est.std(ddof=1)) if est.size > 1 else float("nan")
        oracle_cov = float(np.mean(np.abs(est - truth) <= z * oracle)) if est.size > 1 else float("nan")
        good = ok & (sig[:, k] >= 0)
        se_r = np.sqrt(sig[good, k] / n)
        est_se = float(se_r.mean()) if se_r.size else float("nan")
        emp_cov = float(np.mean(np.abs(tau[good, k] - truth) <= z * se_r)) if se_r.size else float("nan")
        rows.append(MethodRow(m.name, bias, abs(bias), oracle, est_se, oracle_cov, emp_cov, failures, neg))
    meta = {
        "name": s.name,
        "n": n,
        "reps": reps,
        "seed": seed,
        "b_n": s["b_n"],
        "bandwidth_mode": s["bandwidth_mode"],
        "tau_truth": truth,
        "truth_se": fx.truth.se,
        "truth_reps": fx.truth.reps,
        "mean_degree": float(fx.graph.degree.mean()),
        "graph_fingerprint": fx.graph.fingerprint,
        "degenerate_oracle_se": reps < 2,
    }
    report = Report(rows, meta)
    if keep_draws:
        report.draws = {"tau": tau, "sigma2": sig}
    return report
