"""Command-line entry point: ``ndreg simulate|estimate|propensity|diagnose``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .auxiliary import ExposureInteracted, InteractedLinearInMeansSet, LinearInMeansSet, RawCovariates, phi0_exact, phi0_fit
from .design import Design, exposure_from_dict, overlap_check, propensity_exact, propensity_mc
from .errors import (
    ConvergenceError,
    EstimationError,
    NegativeVarianceError,
    OverlapError,
    RankDeficientError,
    SingularSystemError,
)
from .methods import EstimationContext, evaluate_methods, parse_method
from .netgraph import Graph, neighborhood_stats, read_edge_csv
from .sim import ScenarioError, StudyError, bundled_scenario, emit_report, load_scenario, run_study

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "NDREG_THREADS"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# input tables


def read_node_table(path) -> tuple[list[str], dict[str, list[str]]]:
    """Node CSV with a required header and an ``id`` column; returns (ids, columns)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "id" not in reader.fieldnames:
            raise ConfigError(f"{path}: header row with an 'id' column is required")
        cols: dict[str, list[str]] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name in reader.fieldnames:
                cols[name].append((row.get(name) or "").strip())
    ids = cols["id"]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}: unit ids are not unique")
    return ids, cols


def numeric_column(cols: dict, name: str, path="nodes") -> np.ndarray:
    if name not in cols:
        raise ConfigError(f"{path}: missing column {name!r}")
    try:
        return np.array([float(v) for v in cols[name]])
    except ValueError:
        raise ConfigError(f"{path}: column {name!r} has non-numeric entries") from None


def _read_directed(path, ids) -> tuple:
    lookup = {u: k for k, u in enumerate(ids)}
    out = [[] for _ in ids]
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            a, b = row[0].strip(), row[1].strip()
            if a not in lookup or b not in lookup:
                if lineno == 1:
                    continue
                raise ConfigError(f"{path}:{lineno}: unknown unit id")
            out[lookup[a]].append(lookup[b])
    return tuple(sorted(set(x)) for x in out)


def load_config(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if cfg.get("schema_version") != 1:
        raise ConfigError(f"{path}: schema_version must be 1")
    cfg["_base"] = str(Path(path).resolve().parent)
    return cfg


def _design_from(cfg: dict, cols: dict | None, n: int) -> Design:
    d = cfg.get("design", {"p": 0.5})
    if "p" in d:
        return Design.uniform(n, float(d["p"]))
    if "p_column" in d:
        if cols is None:
            raise ConfigError("design.p_column needs a node table")
        return Design(numeric_column(cols, d["p_column"]))
    raise ConfigError("design: needs 'p' or 'p_column'")


def _exposure_from(cfg: dict, g: Graph, cols: dict | None, ids):
    e = dict(cfg.get("exposure", {"kind": "direct"}))
    numeric = {}
    if cols is not None:
        for key in ("mask_column",):
            if key in e:
                numeric[e[key]] = numeric_column(cols, e[key])
        if isinstance(e.get("threshold"), str) and e["threshold"] != "half_degree":
            numeric[e["threshold"]] = numeric_column(cols, e["threshold"])
    if "directed_edges" in e:
        p = Path(e.pop("directed_edges"))
        if not p.is_absolute():
            p = Path(cfg.get("_base", ".")) / p
        e["out_neighbors"] = [list(x) for x in _read_directed(p, ids)]
    try:
        return exposure_from_dict(e, g, numeric)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"exposure: {exc}") from None


def _aux_from(cfg: dict, exposure, contrast):
    kind = cfg.get("kind")
    if kind == "raw":
        return RawCovariates()
    if kind == "linear_in_means":
        return LinearInMeansSet()
    if kind == "interacted_linear_in_means":
        return InteractedLinearInMeansSet(exposure, tuple(contrast))
    if kind == "interacted":
        return ExposureInteracted(_aux_from(cfg.get("base", {"kind": "raw"}), exposure, contrast), exposure, tuple(contrast))
    raise ConfigError(f"auxiliaries: unknown kind {kind!r}")


def run_estimate(g: Graph, ids, cols: dict, cfg: dict, threads: int = 1):
    """Library-level form of ``ndreg estimate``; returns AdjustedEstimate objects."""
    n = g.n
    contrast = tuple(cfg.get("contrast", [1, 0]))
    design = _design_from(cfg, cols, n)
    exposure = _exposure_from(cfg, g, cols, ids)
    D = numeric_column(cols, cfg.get("treatment", "D")).astype(np.int8)
    Y = numeric_column(cols, cfg.get("outcome", "Y"))
    names = list(cfg.get("covariates", []))
    X = np.column_stack([numeric_column(cols, c) for c in names]) if names else np.zeros((n, 0))
    if cfg.get("center_covariates", True) and names:
        X = X - X.mean(axis=0)
    seed = int(cfg.get("seed", 0))
    prop = cfg.get("propensity", {"method": "exact"})
    if prop.get("method", "exact") == "exact":
        pi = propensity_exact(exposure, design, g)
    else:
        pi = propensity_mc(exposure, design, g, int(prop.get("reps", 100_000)), np.random.default_rng(seed))
    report = overlap_check(pi, contrast, float(cfg.get("overlap_eps", 0.01)))
    if not report.passed:
        raise OverlapError(str(report), report.units)
    methods = [parse_method(m) for m in cfg.get("methods", ["HT", "Haj", "F", "L", "ND-F", "ND-L"])]
    aux = {k: _aux_from(v, exposure, contrast) for k, v in cfg.get("auxiliaries", {}).items()}
    phi0_cfg = cfg.get("phi0", {"method": "mc", "reps": 100_000})
    normalizers = {}
    for k, name in enumerate(sorted({m.aux for m in methods if m.kind in ("F-phi0", "ND-phi0")})):
        if name not in aux:
            raise ConfigError(f"methods: auxiliary {name!r} is not defined")
        if phi0_cfg.get("method", "mc") == "exact":
            normalizers[name] = phi0_exact(aux[name], exposure, design, g, X, contrast)
        else:
            normalizers[name] = phi0_fit(
                aux[name], exposure, design, g, X, pi, contrast,
                reps=int(phi0_cfg.get("reps", 100_000)), rng=seed + k, threads=threads,
                cache_dir=phi0_cfg.get("cache_dir"),
            )
    ctx = EstimationContext(
        g, pi, contrast, X, int(cfg.get("b_n", 3)), cfg.get("bandwidth_mode", "inclusive"),
        float(cfg.get("level", 0.95)), aux, normalizers, names,
    )
    T = exposure.evaluate(D, g)
    results = evaluate_methods(ctx, methods, Y, T, D)
    for r in results:
        if isinstance(r, Exception):
            raise r
    return results


def _records_out(results, fmt: str) -> str:
    records = [r.to_record() for r in results]
    if fmt == "json":
        return json.dumps(records, indent=2) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["method", "tau_hat", "se", "ci_low", "ci_high", "n", "b_n", "beta"]
    w.writerow(cols)
    for rec in records:
        w.writerow(["" if rec[c] is None else (json.dumps(rec[c]) if c == "beta" else rec[c]) for c in cols])
    return buf.getvalue()


def _write(text: str, out) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    src = Path(args.scenario)
    if src.exists():
        scenario = load_scenario(src)
    elif src.suffix == "" and not src.parent.name:
        try:
            scenario = bundled_scenario(args.scenario)
        except FileNotFoundError:
            raise FileNotFoundError(f"scenario file not found: {args.scenario}") from None
    else:
        raise FileNotFoundError(f"scenario file not found: {args.scenario}")
    overrides = {}
    if args.reps is not None:
        overrides["reps"] = args.reps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        scenario = scenario.replace(**overrides)
    report = run_study(scenario, threads=args.threads)
    _write(emit_report(report, args.format), args.out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.b_n is not None:
        cfg["b_n"] = args.b_n
    ids, cols = read_node_table(args.nodes)
    g = read_edge_csv(args.edges, ids=ids)
    results = run_estimate(g, ids, cols, cfg, args.threads)
    if args.strict:
        for r in results:
            if r.negative_variance:
                raise NegativeVarianceError(f"{r.method}: negative variance estimate {r.sigma2_hat:.4g}")
    _write(_records_out(results, args.format), args.out)
    return EXIT_OK


def cmd_propensity(args) -> int:
    cfg = load_config(args.config) if args.config else {"design": {"p": args.p}, "exposure": {"kind": "direct"}}
    ids = cols = None
    if args.nodes:
        ids, cols = read_node_table(args.nodes)
    g = read_edge_csv(args.edges, ids=ids, n=args.n)
    if ids is None:
        ids = [str(i) for i in range(g.n)]
    if args.p is not None:
        cfg["design"] = {"p": args.p}
    design = _design_from(cfg, cols, g.n)
    exposure = _exposure_from(cfg, g, cols, ids)
    if args.mode == "exact":
        pi = propensity_exact(exposure, design, g)
    else:
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        pi = propensity_mc(exposure, design, g, args.reps, np.random.default_rng(seed))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["id"] + [f"pi_{v}" for v in pi.values]
    if pi.se is not None:
        header += [f"se_{v}" for v in pi.values]
    w.writerow(header)
    for i, uid in enumerate(ids):
        row = [uid] + [repr(float(x)) for x in pi.probs[i]]
        if pi.se is not None:
            row += [repr(float(x)) for x in pi.se[i]]
        w.writerow(row)
    _write(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config) if args.config else {"design": {"p": 0.5}, "exposure": {"kind": "direct"}}
    ids = cols = None
    if args.nodes:
        ids, cols = read_node_table(args.nodes)
    g = read_edge_csv(args.edges, ids=ids, n=args.n)
    if ids is None:
        ids = [str(i) for i in range(g.n)]
    stats = neighborhood_stats(g, args.max_s, (1, 2))
    out = {
        "n": g.n,
        "edges": g.num_edges,
        "isolated": int(np.sum(g.degree == 0)),
        "mean_degree": float(g.degree.mean()) if g.n else 0.0,
        "boundary_sizes": stats.boundary_sizes.tolist(),
        "moments": {f"{s},{k}": v for (s, k), v in stats.moments.items()},
    }
    design = _design_from(cfg, cols, g.n)
    exposure = _exposure_from(cfg, g, cols, ids)
    try:
        pi = propensity_exact(exposure, design, g)
    except TypeError:
        pi = propensity_mc(exposure, design, g, 100_000, np.random.default_rng(int(cfg.get("seed", 0))))
    rep = overlap_check(pi, tuple(cfg.get("contrast", [1, 0])), args.eps)
    out["overlap"] = {"eps": rep.eps, "passed": rep.passed, "units": [ids[u] for u in rep.units]}
    _write(json.dumps(out, indent=2) + "\n", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ndreg", description="Network experiment effect estimation and simulation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", "-o", default=None, help="output path (default stdout)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=_default_threads(), help=f"worker threads (env {THREADS_ENV})")

    s = sub.add_parser("simulate", help="run a simulation study from a scenario JSON")
    s.add_argument("scenario", help="scenario path, or a bundled name such as linear_in_means")
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--format", choices=["table", "csv", "json"], default="table")
    common(s)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="estimate effects from edge and node CSV files")
    e.add_argument("--edges", required=True)
    e.add_argument("--nodes", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--b-n", dest="b_n", type=int, default=None, help="HAC bandwidth (default from config, else 3)")
    e.add_argument("--format", choices=["json", "csv"], default="json")
    e.add_argument("--strict", action="store_true", help="fail on negative variance estimates")
    common(e)
    e.set_defaults(func=cmd_estimate)

    pr = sub.add_parser("propensity", help="per-unit exposure propensities")
    pr.add_argument("--edges", required=True)
    pr.add_argument("--nodes", default=None)
    pr.add_argument("--config", default=None, help="JSON with design and exposure")
    pr.add_argument("--p", type=float, default=None, help="common treatment probability")
    pr.add_argument("--n", type=int, default=None, help="unit count when ids are implicit")
    pr.add_argument("--mode", choices=["exact", "mc"], default="exact")
    pr.add_argument("--reps", type=int, default=100_000)
    common(pr)
    pr.set_defaults(func=cmd_propensity)

    d = sub.add_parser("diagnose", help="overlap and neighborhood statistics")
    d.add_argument("--edges", required=True)
    d.add_argument("--nodes", default=None)
    d.add_argument("--config", default=None)
    d.add_argument("--n", type=int, default=None)
    d.add_argument("--max-s", dest="max_s", type=int, default=3)
    d.add_argument("--eps", type=float, default=0.01)
    common(d)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SingularSystemError, NegativeVarianceError, RankDeficientError, ConvergenceError, StudyError) as exc:
        print(f"ndreg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError,) as exc:
        print(f"ndreg: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ScenarioError, ConfigError, OverlapError, EstimationError, ValueError, KeyError, TypeError) as exc:
        print(f"ndreg: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
