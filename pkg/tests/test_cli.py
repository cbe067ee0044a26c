import csv
import io
import json
from importlib import resources

import numpy as np
import pytest

from ndreg import cli
from ndreg.netgraph import read_edge_csv

DATA = resources.files("ndreg") / "data"
EDGES, NODES, CONFIG = str(DATA / "edges.csv"), str(DATA / "nodes.csv"), str(DATA / "config.json")


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def write_config(tmp_path, **changes):
    cfg = json.loads((DATA / "config.json").read_text())
    cfg.update(changes)
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def test_estimate_matches_library_call(capsys):
    code, out, _ = run(capsys, "estimate", "--edges", EDGES, "--nodes", NODES, "--config", CONFIG)
    assert code == 0
    ids, cols = cli.read_node_table(NODES)
    g = read_edge_csv(EDGES, ids=ids)
    lib = cli.run_estimate(g, ids, cols, cli.load_config(CONFIG))
    assert out == cli._records_out(lib, "json")
    recs = {r["method"]: r for r in json.loads(out)}
    # p = 1/2 everywhere: treated a, c, e sum to 7.5 and controls b, d, f to 1.7
    assert recs["HT"]["tau_hat"] == pytest.approx(2 * (7.5 - 1.7) / 6, abs=1e-12)
    assert recs["Haj"]["tau_hat"] == pytest.approx(7.5 / 3 - 1.7 / 3, abs=1e-12)
    assert recs["HT"]["b_n"] == 0


def test_estimate_csv_and_out_file(tmp_path, capsys):
    out = tmp_path / "est.csv"
    code, stdout, _ = run(capsys, "estimate", "--edges", EDGES, "--nodes", NODES, "--config", CONFIG,
                          "--format", "csv", "-o", str(out))
    assert code == 0 and stdout == ""
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert [r["method"] for r in rows] == ["HT", "Haj", "F", "ND-F"]
    assert float(rows[1]["ci_low"]) < float(rows[1]["tau_hat"]) < float(rows[1]["ci_high"])


def test_estimate_full_method_list(tmp_path, capsys):
    # with a common p the two decorrelated columns are proportional, so vary p by unit
    nodes = tmp_path / "nodes.csv"
    lines = (DATA / "nodes.csv").read_text().splitlines()
    probs = ["0.3", "0.6", "0.5", "0.4", "0.7", "0.45"]
    nodes.write_text("\n".join([lines[0] + ",p"] + [ln + "," + q for ln, q in zip(lines[1:], probs)]) + "\n")
    cfg = write_config(
        tmp_path,
        design={"p_column": "p"},
        methods=["HT", "Haj", "F", "L", "ND-F", "ND-L", "ND-phi0(G)"],
        auxiliaries={"G": {"kind": "interacted", "base": {"kind": "raw"}}},
        phi0={"method": "exact"},
    )
    code, out, err = run(capsys, "estimate", "--edges", EDGES, "--nodes", str(nodes), "--config", cfg)
    assert code == 0, err
    assert len(json.loads(out)) == 7


def test_estimate_default_bandwidth(tmp_path, capsys):
    # every pair of the toy units is within three hops, so only unadjusted methods stay nonsingular
    cfg = json.loads((DATA / "config.json").read_text())
    del cfg["b_n"]
    cfg["methods"] = ["HT", "Haj"]
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    code, out, _ = run(capsys, "estimate", "--edges", EDGES, "--nodes", NODES, "--config", str(p))
    assert code == 0
    assert json.loads(out)[0]["b_n"] == 3


def test_strict_negative_variance_is_numerical_failure(capsys):
    code, _, err = run(capsys, "estimate", "--edges", EDGES, "--nodes", NODES, "--config", CONFIG, "--b-n", "1", "--strict")
    assert code == cli.EXIT_NUMERICAL
    assert "negative variance" in err


def test_unknown_exposure_kind_is_validation_error(tmp_path, capsys):
    cfg = write_config(tmp_path, exposure={"kind": "telepathy"})
    code, _, err = run(capsys, "estimate", "--edges", EDGES, "--nodes", NODES, "--config", cfg)
    assert code == cli.EXIT_VALIDATION
    code, _, _ = run(capsys, "propensity", "--edges", EDGES, "--nodes", NODES, "--config", cfg)
    assert code == cli.EXIT_VALIDATION


def test_bad_schema_version(tmp_path, capsys):
    cfg = write_config(tmp_path, schema_version=9)
    code, _, err = run(capsys, "estimate", "--edges", EDGES, "--nodes", NODES, "--config", cfg)
    assert code == cli.EXIT_VALIDATION and "schema_version" in err


def test_missing_files_are_io_errors(tmp_path, capsys):
    missing = str(tmp_path / "nowhere.csv")
    code, _, err = run(capsys, "estimate", "--edges", missing, "--nodes", NODES, "--config", CONFIG)
    assert code == cli.EXIT_IO and "nowhere.csv" in err
    code, _, err = run(capsys, "simulate", str(tmp_path / "scen.json"))
    assert code == cli.EXIT_IO and "scen.json" in err


def test_duplicate_ids_rejected(tmp_path, capsys):
    p = tmp_path / "nodes.csv"
    p.write_text("id,D,Y\na,1,1\na,0,2\n")
    code, _, err = run(capsys, "estimate", "--edges", EDGES, "--nodes", str(p), "--config", CONFIG)
    assert code == cli.EXIT_VALIDATION


def test_propensity_direct_equals_p(capsys):
    code, out, _ = run(capsys, "propensity", "--edges", EDGES, "--nodes", NODES, "--p", "0.3")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["id"] for r in rows] == list("abcdef")
    assert all(float(r["pi_1"]) == 0.3 and float(r["pi_0"]) == 0.7 for r in rows)


def test_propensity_exact_and_mc_agree(tmp_path, capsys):
    cfg = write_config(tmp_path, exposure={"kind": "neighbor_threshold", "threshold": "half_degree"})
    _, exact, _ = run(capsys, "propensity", "--edges", EDGES, "--nodes", NODES, "--config", cfg)
    _, mc, _ = run(capsys, "propensity", "--edges", EDGES, "--nodes", NODES, "--config", cfg,
                   "--mode", "mc", "--reps", "20000", "--seed", "3")
    _, again, _ = run(capsys, "propensity", "--edges", EDGES, "--nodes", NODES, "--config", cfg,
                      "--mode", "mc", "--reps", "20000", "--seed", "3")
    assert mc == again
    ex = list(csv.DictReader(io.StringIO(exact)))
    for e, m in zip(ex, csv.DictReader(io.StringIO(mc))):
        se = float(m["se_1"])
        assert abs(float(e["pi_1"]) - float(m["pi_1"])) <= 4 * se + 1e-12


def test_diagnose(capsys):
    code, out, _ = run(capsys, "diagnose", "--edges", EDGES, "--nodes", NODES, "--config", CONFIG)
    assert code == 0
    doc = json.loads(out)
    assert doc["n"] == 6 and doc["edges"] == 7 and doc["isolated"] == 0
    assert doc["overlap"]["passed"] is True and doc["overlap"]["units"] == []
    assert doc["boundary_sizes"][0] == 1


def test_diagnose_reports_overlap_units(tmp_path, capsys):
    cfg = write_config(tmp_path, design={"p": 0.005})
    code, out, _ = run(capsys, "diagnose", "--edges", EDGES, "--nodes", NODES, "--config", cfg)
    doc = json.loads(out)
    assert doc["overlap"]["passed"] is False
    assert set(doc["overlap"]["units"]) == set("abcdef")


def test_simulate_small_scenario_is_reproducible(tmp_path, capsys):
    scen = json.loads(resources.files("ndreg").joinpath("scenarios/counterexample.json").read_text())
    scen["graph"]["n"] = 150
    p = tmp_path / "s.json"
    p.write_text(json.dumps(scen))
    code, one, _ = run(capsys, "simulate", str(p), "--reps", "60", "--seed", "5", "--format", "json")
    assert code == 0
    code, two, _ = run(capsys, "simulate", str(p), "--reps", "60", "--seed", "5", "--format", "json", "--threads", "3")
    assert one == two
    doc = json.loads(one)
    assert doc["meta"]["reps"] == 60 and doc["meta"]["seed"] == 5
    assert [r["method"] for r in doc["rows"]] == scen["methods"]


def test_simulate_bad_scenario_field(tmp_path, capsys):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"schema_version": 1, "reps": -3}))
    code, _, err = run(capsys, "simulate", str(p))
    assert code == cli.EXIT_VALIDATION and "reps" in err


def test_threads_env_default(monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "5")
    assert cli.build_parser().parse_args(["diagnose", "--edges", EDGES]).threads == 5
    monkeypatch.setenv(cli.THREADS_ENV, "junk")
    assert cli._default_threads() == 1


def test_seed_override_changes_mc_estimate(tmp_path, capsys):
    cfg = write_config(tmp_path, propensity={"method": "mc", "reps": 2000},
                       exposure={"kind": "neighbor_threshold", "threshold": "half_degree"})
    outs = [run(capsys, "estimate", "--edges", EDGES, "--nodes", NODES, "--config", cfg, "--seed", s)[1]
            for s in ("1", "1", "2")]
    assert outs[0] == outs[1] != outs[2]
    assert np.isfinite(json.loads(outs[0])[0]["tau_hat"])
