import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from reggraph.cli import (
    ConfigError,
    graph_to_listing,
    main,
    parse_config,
    read_csv_signal,
    read_pgm,
    write_csv_signal,
    write_pgm,
)
from reggraph.graph_core import isomorphic
from reggraph.graph_library import GRAPH_NAMES, make_graph

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TGV_LISTING = {
    "command": "graph-info",
    "graph": {
        "shape": [16],
        "root": "root",
        "nodes": [
            {"id": "root", "functional": {"kind": "IndicatorZero"}},
            {"id": "s1", "functional": {"kind": "IndicatorZero"}},
            {"id": "l1", "functional": {"kind": "GroupL1"}},
            {"id": "l2", "functional": {"kind": "GroupL1"}},
        ],
        "edges": [
            {"tail": "root", "head": "s1", "theta": {"kind": "grad"}, "phi": {"kind": "identity"}},
            {"tail": "s1", "head": "l1", "theta": {"kind": "identity"}, "phi": {"kind": "identity"}},
            {"tail": "s1", "head": "l2", "theta": {"kind": "symgrad"}, "phi": {"kind": "identity"}, "weight": 1.0},
        ],
    },
}


def _run(cfg: dict, tmp_path, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return main([str(p), "--output", str(tmp_path / "out")])


def test_parse_library_config():
    cfg = parse_config('{"command":"eval","graph":{"name":"tv","shape":[16]}, "input":"signal.csv"}')
    assert cfg.command == "eval" and cfg.graph.name == "tv" and cfg.output == "out"
    assert cfg.solver.gap_tol == 1e-6


def test_misspelled_functional_names_key():
    bad = json.loads(json.dumps(TGV_LISTING))
    bad["graph"]["nodes"][2]["functional"]["kind"] = "GroupLl"
    with pytest.raises(ConfigError, match=r"graph\.nodes\[2\]\.functional\.kind"):
        parse_config(json.dumps(bad))


def test_unknown_keys_and_parse_errors():
    with pytest.raises(ConfigError, match="config: unknown key"):
        parse_config('{"command":"verify","colour":1}')
    with pytest.raises(ConfigError, match="graph.edges\\[0\\]: unknown key"):
        cfg = json.loads(json.dumps(TGV_LISTING))
        cfg["graph"]["edges"][0]["wieght"] = 2
        parse_config(json.dumps(cfg))
    with pytest.raises(ConfigError, match="line 2, column 3"):
        parse_config('{"command": "eval",\n  }')
    with pytest.raises(ConfigError, match="config.command"):
        parse_config('{"command": "plot"}')


def test_explicit_tgv_listing_is_isomorphic_to_library():
    cfg = parse_config(json.dumps(TGV_LISTING))
    assert isomorphic(cfg.graph, make_graph("tgv", (16,))[0])
    assert isomorphic(parse_config((CONFIGS / "tgv_listing.json").read_text()).graph, make_graph("tgv", (16,))[0])


def test_listing_learnable_defaults():
    cfg = json.loads(json.dumps(TGV_LISTING))
    del cfg["graph"]["edges"][2]["weight"]
    g = parse_config(json.dumps(cfg)).graph
    assert not g.edges[2].learnable
    assert not isomorphic(g, make_graph("tgv", (16,))[0])


def test_library_weights_override():
    cfg = parse_config(json.dumps({"command": "graph-info", "graph": {
        "name": "tgv_frame_infconv", "shape": [16], "weights": {"alpha0": 0.25, "alpha1": {"value": 0.5}}}}))
    assert cfg.alpha.tolist() == [1.0, 1.0, 0.5, 0.25]
    with pytest.raises(ConfigError, match="weights.alpha9"):
        parse_config(json.dumps({"command": "graph-info", "graph": {
            "name": "tgv_frame_infconv", "shape": [16], "weights": {"alpha9": 0.25}}}))


@pytest.mark.parametrize("name", GRAPH_NAMES)
def test_graph_info_round_trip(name, tmp_path):
    g, _ = make_graph(name, (16,))
    listing = {"command": "graph-info", "graph": graph_to_listing(g)}
    assert isomorphic(parse_config(json.dumps(listing)).graph, g)
    assert _run({"command": "graph-info", "graph": {"name": name, "shape": [16]}}, tmp_path) == 0
    again = parse_config((tmp_path / "out" / "graph.json").read_text())
    assert isomorphic(again.graph, g)


def test_eval_step_csv(tmp_path):
    assert _run({"command": "eval", "graph": {"name": "tv", "shape": [16]}, "input": {"synthetic": "step"}},
                tmp_path) == 0
    rows = dict(line.split(",") for line in (tmp_path / "out" / "eval.csv").read_text().splitlines()[1:])
    assert abs(float(rows["value"]) - 1.0) <= 1e-5
    assert (tmp_path / "out" / "trace.csv").exists()


def test_eval_reads_csv_input(tmp_path):
    write_csv_signal(tmp_path / "signal.csv", [0, 0, 1, 1, 3])
    assert _run({"command": "eval", "graph": {"name": "tv", "shape": [5]}, "input": "signal.csv"}, tmp_path) == 0
    rows = dict(line.split(",") for line in (tmp_path / "out" / "eval.csv").read_text().splitlines()[1:])
    assert float(rows["value"]) == pytest.approx(3.0, abs=1e-5)


def test_exit_codes(tmp_path, capsys):
    assert _run({"command": "eval", "graph": {"name": "tv", "shape": [4]}, "input": [1, 2]}, tmp_path) == 3
    assert "samples" in capsys.readouterr().err
    assert main([str(tmp_path / "missing.json")]) == 3
    slow = {"command": "eval", "graph": {"name": "tgv", "shape": [16]}, "input": {"synthetic": "random"},
            "solver": {"max_iters": 5, "check_every": 5}}
    assert _run(slow, tmp_path) == 2


def test_verify_command(tmp_path):
    assert _run({"command": "verify"}, tmp_path) == 0
    lines = (tmp_path / "out" / "verify.csv").read_text().splitlines()
    assert lines[0] == "check,passed,detail" and len(lines) == 9


def test_solve_2d_writes_pgm_and_is_reproducible(tmp_path):
    cfg = {"command": "solve", "graph": {"name": "tv", "shape": [8, 8]},
           "problem": {"forward": {"kind": "gaussian-blur", "sigma": 1.0}, "truth": {"synthetic": "step"},
                       "noise": {"sigma": 0.05, "seed": 2}, "beta": 0.05}}
    assert _run(cfg, tmp_path) == 0
    first = (tmp_path / "out" / "reconstruction.pgm").read_bytes()
    img = read_pgm(tmp_path / "out" / "reconstruction.pgm")
    assert img.shape == (8, 8)
    assert _run(cfg, tmp_path) == 0
    assert (tmp_path / "out" / "reconstruction.pgm").read_bytes() == first


def test_pgm_and_csv_round_trip(tmp_path, rng):
    img = np.round(rng.uniform(0, 1, (5, 7)) * 65535) / 65535
    write_pgm(tmp_path / "a.pgm", img)
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n7 5\n65535\n") and len(data) == 13 + 2 * 35
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    x = rng.standard_normal(6)
    write_csv_signal(tmp_path / "x.csv", x)
    assert np.array_equal(read_csv_signal(tmp_path / "x.csv"), x)


def test_vanishing_noise_command(tmp_path):
    cfg = {"command": "vanishing-noise", "graph": {"name": "tv", "shape": [16]},
           "problem": {"truth": {"synthetic": "piecewise-constant"}},
           "schedule": {"sigmas": [0.1, 0.05], "seed": 1}}
    assert _run(cfg, tmp_path) == 0
    lines = (tmp_path / "out" / "vanishing_noise.csv").read_text().splitlines()
    assert lines[0] == "k,sigma,delta_k,beta_k,err_l2,R_value,gap,iters" and len(lines) == 3


def test_bundled_bilevel_affine(tmp_path):
    cfg = json.loads((CONFIGS / "bilevel_affine.json").read_text())
    assert _run(cfg, tmp_path) == 0
    report = (tmp_path / "out" / "report.txt").read_text()
    assert "effective regularizer: TGV²" in report
    header = (tmp_path / "out" / "bilevel_trace.csv").read_text().splitlines()[0]
    assert header == "candidate_id,alpha_2,alpha_3,beta,loss,gap,iters"


def test_module_entry_point_reads_stdin(tmp_path):
    cfg = json.dumps({"command": "eval", "graph": {"name": "tv", "shape": [4]}, "input": [0, 0, 1, 1],
                      "output": str(tmp_path / "o")})
    proc = subprocess.run([sys.executable, "-m", "reggraph", "-"], input=cfg, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "eval.csv").exists()
