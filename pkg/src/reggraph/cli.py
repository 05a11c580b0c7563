"""Configuration-driven command line front end.

Usage::

    reggraph CONFIG.json [--output DIR] [--seed N]
    python -m reggraph CONFIG.json

The configuration is a JSON object whose ``command`` selects one of
``eval``, ``solve``, ``vanishing-noise``, ``bilevel``, ``verify`` and
``graph-info``.  The full schema, the CSV and PGM formats and the exit codes
are documented in the README.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import deque
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .bilevel import BilevelConfig, PenaltyH1, PenaltyH2, learn, limit_regularizer_report
from .functionals import functional_from_dict, functional_to_dict
from .graph_core import Edge, GraphError, Node, RegGraph, check, resolve_alpha
from .graph_library import GRAPH_NAMES, make_graph, make_operator
from .inverse_lab import NoiseModel, corrupt, gaussian_noise, make_forward, run_vanishing_noise
from .linalg_spaces import LinOp, Space, coeff_seq, scalar_field
from .solver import SolverConfig, evaluate_R, solve_tikhonov, write_trace_csv

__all__ = ["ConfigError", "RunConfig", "parse_config", "run", "main", "graph_to_listing",
           "read_signal", "write_signal", "read_pgm", "write_pgm", "read_csv_signal", "write_csv_signal"]

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_NOT_CONVERGED = 2
EXIT_CONFIG = 3

COMMANDS = ("eval", "solve", "vanishing-noise", "bilevel", "verify", "graph-info")
TOP_KEYS = {"command", "graph", "alpha", "input", "problem", "schedule", "bilevel", "solver", "output", "seed"}
LIBRARY_GRAPH_KEYS = {"name", "shape", "params", "weights"}
LISTING_GRAPH_KEYS = {"name", "shape", "root", "nodes", "edges"}
NODE_KEYS = {"id", "space", "functional"}
EDGE_KEYS = {"id", "tail", "head", "space", "theta", "phi", "weight", "learnable"}
OPERATOR_KEYS = {
    "grad": set(), "symgrad": set(), "haar": set(), "dct": set(), "duplicate": set(),
    "grad_k": {"k"}, "identity": {"scale"}, "conv": {"kernel"}, "block-select": {"index"},
    "mask": {"keep"}, "matrix": {"shape", "rows", "cols", "vals", "label"},
}
PROBLEM_KEYS = {"forward", "truth", "data", "noise", "beta"}
FORWARD_KEYS = {"kind", "sigma", "radius", "keep", "matrix"}
NOISE_KEYS = {"sigma", "seed"}
SCHEDULE_KEYS = {"sigmas", "c", "r", "betas", "seed"}
BILEVEL_KEYS = {"search", "alpha_points", "beta_range", "beta_points", "cd_passes", "cd_shrink", "nm_budget",
                "c", "l1", "h2", "parallel", "workers"}
H2_KEYS = {"edges", "d", "coef"}
SYNTHETIC_KINDS = ("step", "constant", "ramp", "piecewise-constant", "piecewise-affine", "random")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


@dataclass
class RunConfig:
    command: str
    graph: RegGraph
    alpha: np.ndarray
    input: Any = None
    problem: Dict[str, Any] = field(default_factory=dict)
    schedule: Dict[str, Any] = field(default_factory=dict)
    bilevel: Dict[str, Any] = field(default_factory=dict)
    solver: SolverConfig = SolverConfig()
    output: str = "out"
    seed: int = 0
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)


# --- signal I/O -----------------------------------------------------------------
def read_csv_signal(path) -> np.ndarray:
    """One value per line; blank lines, ``#`` comments and a non-numeric header line are skipped."""
    vals = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            t = line.strip()
            if not t or t.startswith("#"):
                continue
            cell = t.split(",")[-1].strip()
            try:
                vals.append(float(cell))
            except ValueError:
                if vals or i > 0 and vals:
                    raise
                continue
    return np.array(vals)


def write_csv_signal(path, x) -> None:
    with open(path, "w") as fh:
        fh.write("value\n")
        for v in np.ravel(x):
            fh.write(f"{float(v)!r}\n")


def read_pgm(path) -> np.ndarray:
    """Binary PGM (``P5``); samples are returned divided by ``maxval``."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and chr(data[pos]).isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not chr(data[pos]).isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1  # the single whitespace byte after maxval
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if not 0 < maxval <= 65535:
        raise ValueError(f"{path}: maxval {maxval} out of range")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    return arr.reshape(h, w).astype(float) / maxval


def write_pgm(path, img) -> None:
    """16-bit binary PGM, row-major; values are clipped to ``[0, 1]`` and scaled by 65535."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM output needs a 2-D array")
    h, w = img.shape
    q = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_signal(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pgm":
        return read_pgm(path)
    if ext == ".csv":
        return read_csv_signal(path)
    raise ValueError(f"{path}: unsupported signal format (use .csv or .pgm)")


def write_signal(stem, x, shape) -> str:
    """Write as ``stem.csv`` (1-D) or ``stem.pgm`` (2-D); returns the path."""
    x = np.asarray(x, dtype=float)
    if len(shape) == 2:
        path = stem + ".pgm"
        write_pgm(path, x.reshape(shape))
    else:
        path = stem + ".csv"
        write_csv_signal(path, x)
    return path


def synthetic_signal(desc: dict, shape: Sequence[int], path: str) -> np.ndarray:
    """Built-in test signals on ``[0, 1)`` sampled at the grid points (first axis)."""
    _keys(desc, {"synthetic", "value", "seed", "scale"}, path)
    kind = desc["synthetic"]
    n = int(np.prod(shape))
    t = np.indices(shape)[0].ravel() / shape[0]
    if kind == "step":
        x = (t >= 0.5).astype(float)
    elif kind == "constant":
        x = np.full(n, float(desc.get("value", 1.0)))
    elif kind == "ramp":
        x = t.copy()
    elif kind == "piecewise-constant":
        x = np.select([t < 0.3, t < 0.7], [0.0, 1.0], 0.4)
    elif kind == "piecewise-affine":
        x = np.where(t < 0.4, t / 0.4, 1.0 - (t - 0.4) / 0.6 * 0.8)
    elif kind == "random":
        x = gaussian_noise(int(desc.get("seed", 0)), (n,))
    else:
        raise ConfigError(f"{path}.synthetic: unknown kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    return float(desc.get("scale", 1.0)) * x


# --- config parsing ----------------------------------------------------------------
def _keys(d, allowed, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"{path}: unknown key(s) {extra}")


def _matrix_op(spec: dict, domain: Space, codomain: Optional[Space], path: str) -> LinOp:
    try:
        m, n = (int(v) for v in spec["shape"])
        mat = sp.csr_matrix((np.asarray(spec["vals"], float), (np.asarray(spec["rows"], int),
                                                               np.asarray(spec["cols"], int))), shape=(m, n))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: malformed matrix operator ({exc})") from None
    if n != domain.dim:
        raise ConfigError(f"{path}: matrix has {n} columns, edge space has dimension {domain.dim}")
    if codomain is None or codomain.dim != m:
        codomain = coeff_seq(m)
    return LinOp(domain, codomain, mat, label=spec.get("label", "matrix"))


def _operator(spec, domain: Space, codomain: Optional[Space], path: str) -> LinOp:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"{path}: operator needs a 'kind'")
    kind = spec["kind"]
    if kind not in OPERATOR_KEYS:
        raise ConfigError(f"{path}.kind: unknown operator kind {kind!r}")
    _keys(spec, OPERATOR_KEYS[kind] | ({"kind"} if kind == "matrix" else {"kind", "boundary"}), path)
    if kind == "matrix":
        return _matrix_op(spec, domain, codomain, path)
    try:
        return make_operator(spec, domain)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _space(desc, path) -> Space:
    try:
        return Space.from_description(desc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid space description ({exc})") from None


def _listing_graph(gd: dict, path: str) -> RegGraph:
    nodes_in, edges_in = gd.get("nodes"), gd.get("edges")
    if not isinstance(nodes_in, list) or not isinstance(edges_in, list):
        raise ConfigError(f"{path}: an explicit listing needs 'nodes' and 'edges' arrays")
    by_id: Dict[str, dict] = {}
    for i, nd in enumerate(nodes_in):
        _keys(nd, NODE_KEYS, f"{path}.nodes[{i}]")
        if "id" not in nd or "functional" not in nd:
            raise ConfigError(f"{path}.nodes[{i}]: 'id' and 'functional' are required")
        if nd["id"] in by_id:
            raise ConfigError(f"{path}.nodes[{i}].id: duplicate node {nd['id']!r}")
        by_id[nd["id"]] = nd
    root = gd.get("root", nodes_in[0]["id"] if nodes_in else None)
    if root not in by_id:
        raise ConfigError(f"{path}.root: unknown node {root!r}")
    for i, ed in enumerate(edges_in):
        _keys(ed, EDGE_KEYS, f"{path}.edges[{i}]")
        for k in ("tail", "head", "theta", "phi"):
            if k not in ed:
                raise ConfigError(f"{path}.edges[{i}]: missing '{k}'")
        for k in ("tail", "head"):
            if ed[k] not in by_id:
                raise ConfigError(f"{path}.edges[{i}].{k}: unknown node {ed[k]!r}")
    spaces: Dict[str, Space] = {}
    if "space" in by_id[root]:
        spaces[root] = _space(by_id[root]["space"], f"{path}.nodes[{nodes_in.index(by_id[root])}].space")
    elif "shape" in gd:
        spaces[root] = scalar_field([int(s) for s in gd["shape"]])
    else:
        raise ConfigError(f"{path}: give 'shape' or a root node 'space'")
    built: Dict[int, Edge] = {}
    queue = deque([root])
    seen = {root}
    while queue:
        tail = queue.popleft()
        for i, ed in enumerate(edges_in):
            if ed["tail"] != tail or i in built:
                continue
            ep = f"{path}.edges[{i}]"
            head = ed["head"]
            if head in seen:
                raise ConfigError(f"{ep}: node {head!r} is reached twice (the listing must be a tree)")
            espace = _space(ed["space"], ep + ".space") if "space" in ed else spaces[tail]
            hdesc = by_id[head].get("space")
            hspace = _space(hdesc, f"{path}.nodes[{nodes_in.index(by_id[head])}].space") if hdesc else None
            theta = _operator(ed["theta"], espace, hspace, ep + ".theta")
            phi = _operator(ed["phi"], espace, spaces[tail], ep + ".phi")
            if hspace is None:
                hspace = theta.codomain
            elif hspace.dim != theta.codomain.dim:
                raise ConfigError(f"{ep}.theta: maps into dimension {theta.codomain.dim}, head space has {hspace.dim}")
            spaces[head] = hspace
            weight = ed.get("weight", 1.0)
            if not isinstance(weight, (int, float)):
                raise ConfigError(f"{ep}.weight: expected a number")
            built[i] = Edge(tail, head, theta, phi, float(weight), bool(ed.get("learnable", "weight" in ed)),
                            str(ed.get("id", "")))
            seen.add(head)
            queue.append(head)
    missing = sorted(set(by_id) - seen)
    if missing:
        raise ConfigError(f"{path}: node(s) {missing} not reachable from the root")
    if len(built) != len(edges_in):
        raise ConfigError(f"{path}: edges not reachable from the root")
    nodes = []
    for i, nd in enumerate(nodes_in):
        try:
            fn = functional_from_dict(nd["functional"], spaces[nd["id"]], f"{path}.nodes[{i}].functional")
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(exc.args[0] if exc.args else str(exc)) from None
        nodes.append(Node(nd["id"], spaces[nd["id"]], fn))
    g = RegGraph(tuple(nodes), tuple(built[i] for i in range(len(edges_in))), root, name=gd.get("name", "custom"))
    try:
        return check(g)
    except GraphError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _library_graph(gd: dict, path: str) -> RegGraph:
    _keys(gd, LIBRARY_GRAPH_KEYS, path)
    if gd["name"] not in GRAPH_NAMES:
        raise ConfigError(f"{path}.name: unknown graph {gd['name']!r}; choose from {', '.join(GRAPH_NAMES)}")
    if "shape" not in gd:
        raise ConfigError(f"{path}.shape: required")
    params = gd.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError(f"{path}.params: expected an object")
    try:
        g, _ = make_graph(gd["name"], [int(s) for s in gd["shape"]], **params)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    weights = gd.get("weights", {})
    if weights:
        if not isinstance(weights, dict):
            raise ConfigError(f"{path}.weights: expected an object keyed by edge id")
        edges = list(g.edges)
        for eid, wv in weights.items():
            try:
                k = g.edge_index(eid)
            except KeyError:
                raise ConfigError(f"{path}.weights.{eid}: no edge with this id") from None
            e = edges[k]
            if isinstance(wv, dict):
                _keys(wv, {"value", "learnable"}, f"{path}.weights.{eid}")
                value = float(wv.get("value", e.weight))
                learnable = bool(wv.get("learnable", e.learnable))
            else:
                value, learnable = float(wv), e.learnable
            edges[k] = replace(e, weight=value, learnable=learnable)
        g = RegGraph(g.nodes, tuple(edges), g.root, g.name)
        try:
            check(g)
        except GraphError as exc:
            raise ConfigError(f"{path}.weights: {exc}") from None
    return g


def _graph(gd, path="graph") -> RegGraph:
    if not isinstance(gd, dict):
        raise ConfigError(f"{path}: expected an object")
    if "nodes" in gd or "edges" in gd:
        _keys(gd, LISTING_GRAPH_KEYS, path)
        return _listing_graph(gd, path)
    if "name" not in gd:
        raise ConfigError(f"{path}: give a library 'name' or an explicit 'nodes'/'edges' listing")
    return _library_graph(gd, path)


def _solver_cfg(d, path="solver") -> SolverConfig:
    names = {f.name for f in fields(SolverConfig)}
    _keys(d, names, path)
    try:
        return SolverConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON configuration (defaults applied, unknown keys rejected)."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    _keys(raw, TOP_KEYS, "config")
    cmd = raw.get("command")
    if cmd not in COMMANDS:
        raise ConfigError(f"config.command: expected one of {COMMANDS}, got {cmd!r}")
    if cmd == "verify" and "graph" not in raw:
        g = make_graph("tv", (4,))[0]
    else:
        if "graph" not in raw:
            raise ConfigError("config.graph: required")
        g = _graph(raw["graph"])
    alpha = g.alpha
    if "alpha" in raw:
        try:
            alpha = resolve_alpha(g, raw["alpha"])
            check(g, alpha)
        except (ValueError, GraphError) as exc:
            raise ConfigError(f"config.alpha: {exc}") from None
    problem = raw.get("problem", {})
    _keys(problem, PROBLEM_KEYS, "config.problem")
    if "forward" in problem:
        _keys(problem["forward"], FORWARD_KEYS, "config.problem.forward")
    if "noise" in problem:
        _keys(problem["noise"], NOISE_KEYS, "config.problem.noise")
    schedule = raw.get("schedule", {})
    _keys(schedule, SCHEDULE_KEYS, "config.schedule")
    bil = raw.get("bilevel", {})
    _keys(bil, BILEVEL_KEYS, "config.bilevel")
    if "h2" in bil:
        _keys(bil["h2"], H2_KEYS, "config.bilevel.h2")
    cfg = RunConfig(
        command=cmd, graph=g, alpha=alpha, input=raw.get("input"), problem=problem, schedule=schedule,
        bilevel=bil, solver=_solver_cfg(raw.get("solver", {}), "config.solver"),
        output=str(raw.get("output", "out")), seed=int(raw.get("seed", 0)), raw=raw,
    )
    if cmd == "eval" and cfg.input is None:
        raise ConfigError("config.input: required for eval")
    if cmd in ("solve", "vanishing-noise", "bilevel") and not ("truth" in problem or "data" in problem):
        raise ConfigError("config.problem: give 'truth' (and noise) or 'data'")
    if cmd in ("vanishing-noise", "bilevel") and "truth" not in problem:
        raise ConfigError("config.problem.truth: required for this command")
    if cmd == "vanishing-noise" and "sigmas" not in schedule:
        raise ConfigError("config.schedule.sigmas: required")
    return cfg


# --- canonical listing ---------------------------------------------------------------
def _matrix_spec(op: LinOp) -> dict:
    m = op.to_sparse().tocoo()
    order = np.lexsort((m.col, m.row))
    return {"kind": "matrix", "shape": [int(op.shape[0]), int(op.shape[1])],
            "rows": m.row[order].tolist(), "cols": m.col[order].tolist(),
            "vals": [float(v) for v in m.data[order]], "label": op.label}


def graph_to_listing(g: RegGraph, shape: Optional[Sequence[int]] = None) -> dict:
    """Explicit node/edge listing with exact operator matrices."""
    out = {"name": g.name or "custom", "root": g.root}
    if shape is not None:
        out["shape"] = list(shape)
    out["nodes"] = [{"id": n.id, "space": n.space.describe(), "functional": functional_to_dict(n.functional)}
                    for n in g.nodes]
    out["edges"] = [{"id": e.id, "tail": e.tail, "head": e.head, "space": e.space.describe(),
                     "theta": _matrix_spec(e.theta), "phi": _matrix_spec(e.phi), "weight": e.weight,
                     "learnable": e.learnable} for e in g.edges]
    return out


# --- commands ---------------------------------------------------------------------------
def _root_shape(cfg: RunConfig) -> Tuple[int, ...]:
    sp_ = cfg.graph.node(cfg.graph.root).space
    return tuple(sp_.grid) if sp_.kind == "scalar" else (sp_.dim,)


def _load_signal(desc, shape, path, base_dir) -> np.ndarray:
    n = int(np.prod(shape))
    if isinstance(desc, str):
        p = desc if os.path.isabs(desc) else os.path.join(base_dir, desc)
        try:
            x = read_signal(p)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    elif isinstance(desc, list):
        x = np.asarray(desc, dtype=float)
    elif isinstance(desc, dict):
        x = synthetic_signal(desc, shape, path)
    else:
        raise ConfigError(f"{path}: expected a file path, an array or a synthetic signal object")
    x = np.ravel(x)
    if x.size != n:
        raise ConfigError(f"{path}: signal has {x.size} samples, the root space has {n}")
    return x


def _forward(cfg: RunConfig, shape):
    fd = dict(cfg.problem.get("forward", {"kind": "identity"}))
    kind = fd.pop("kind", "identity")
    try:
        return make_forward(kind, shape, **fd)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config.problem.forward: {exc}") from None


def _data(cfg: RunConfig, fm, shape, base_dir):
    truth = None
    if "truth" in cfg.problem:
        truth = _load_signal(cfg.problem["truth"], shape, "config.problem.truth", base_dir)
    if "data" in cfg.problem:
        f = _load_signal(cfg.problem["data"], (fm.op.codomain.dim,), "config.problem.data", base_dir)
    else:
        nz = cfg.problem.get("noise", {})
        try:
            noise = NoiseModel(float(nz.get("sigma", 0.0)), int(nz.get("seed", cfg.seed)))
        except ValueError as exc:
            raise ConfigError(f"config.problem.noise: {exc}") from None
        f = corrupt(fm, truth, noise)
    return truth, f


def _write_kv(path, rows):
    with open(path, "w") as fh:
        fh.write("quantity,value\n")
        for k, v in rows:
            fh.write(f"{k},{v!r}\n" if isinstance(v, float) else f"{k},{v}\n")


def _cmd_eval(cfg, out, base_dir):
    shape = _root_shape(cfg)
    u = _load_signal(cfg.input, shape, "config.input", base_dir)
    res = evaluate_R(cfg.graph, cfg.alpha, u, cfg.solver)
    _write_kv(os.path.join(out, "eval.csv"), [
        ("value", float(res.value)), ("lower_bound", float(res.lower)), ("gap", float(res.gap)),
        ("relative_gap", float(res.rel_gap)), ("iterations", res.iterations), ("converged", int(res.converged))])
    write_trace_csv(res, os.path.join(out, "trace.csv"))
    print(f"R = {res.value:.10g} (gap {res.gap:.3g}, {res.iterations} iterations)")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def _cmd_solve(cfg, out, base_dir):
    shape = _root_shape(cfg)
    fm = _forward(cfg, shape)
    truth, f = _data(cfg, fm, shape, base_dir)
    beta = float(cfg.problem.get("beta", 0.1))
    if not beta > 0:
        raise ConfigError("config.problem.beta: must be positive")
    res = solve_tikhonov(fm.op, f, beta=beta, g=cfg.graph, alpha=cfg.alpha, cfg=cfg.solver)
    write_signal(os.path.join(out, "reconstruction"), res.u, shape)
    if fm.op.codomain.dim == int(np.prod(shape)):
        write_signal(os.path.join(out, "data"), f, shape)
    else:
        write_csv_signal(os.path.join(out, "data.csv"), f)
    rows = [("objective", float(res.value)), ("gap", float(res.gap)), ("iterations", res.iterations),
            ("converged", int(res.converged)), ("beta", beta)]
    if truth is not None:
        rows.append(("error_l2", float(np.linalg.norm(res.u - truth))))
    _write_kv(os.path.join(out, "summary.csv"), rows)
    write_trace_csv(res, os.path.join(out, "trace.csv"))
    print(f"objective {res.value:.10g}, gap {res.gap:.3g}, {res.iterations} iterations")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def _cmd_vanishing(cfg, out, base_dir):
    shape = _root_shape(cfg)
    fm = _forward(cfg, shape)
    truth = _load_signal(cfg.problem["truth"], shape, "config.problem.truth", base_dir)
    sc = cfg.schedule
    try:
        run_ = run_vanishing_noise(cfg.graph, cfg.alpha, fm, truth, sc["sigmas"], c=float(sc.get("c", 1.0)),
                                   r=float(sc.get("r", 0.5)), seed=int(sc.get("seed", cfg.seed)),
                                   betas=sc.get("betas"), cfg=cfg.solver)
    except ValueError as exc:
        raise ConfigError(f"config.schedule: {exc}") from None
    run_.write_csv(os.path.join(out, "vanishing_noise.csv"))
    for lv in run_.levels:
        print(f"level {lv.k}: sigma {lv.sigma:.4g} beta {lv.beta:.4g} error {lv.err_l2:.5g} R {lv.R_value:.6g}")
    return EXIT_NOT_CONVERGED if run_.partial else EXIT_OK


def _cmd_bilevel(cfg, out, base_dir):
    shape = _root_shape(cfg)
    fm = _forward(cfg, shape)
    truth, f = _data(cfg, fm, shape, base_dir)
    b = cfg.bilevel
    g = cfg.graph.with_weights(cfg.alpha)
    try:
        H1 = PenaltyH1.for_graph(g, c=float(b.get("c", 1.0)), l1=float(b.get("l1", 0.0)))
        h2 = b.get("h2", {})
        h2_edges = tuple(g.edge_index(e) for e in h2.get("edges", []))
        H2 = PenaltyH2(h2_edges, float(h2.get("d", np.inf)), float(h2.get("coef", 0.0)))
        bcfg = BilevelConfig(
            search=b.get("search", "grid"), alpha_points=int(b.get("alpha_points", 5)),
            beta_range=tuple(b.get("beta_range", (1e-2, 1.0))), beta_points=int(b.get("beta_points", 5)),
            cd_passes=int(b.get("cd_passes", 4)), cd_shrink=float(b.get("cd_shrink", 0.5)),
            nm_budget=int(b.get("nm_budget", 60)), solver=cfg.solver, parallel=bool(b.get("parallel", False)),
            workers=int(b.get("workers", 4)))
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"config.bilevel: {exc}") from None
    res = learn(truth, f, fm.op, g, H1, H2, bcfg)
    res.write_trace_csv(os.path.join(out, "bilevel_trace.csv"))
    report = limit_regularizer_report(g, res.alpha, c=H1.c, result=res)
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(report + "\n")
    write_signal(os.path.join(out, "reconstruction"), res.u[0], shape)
    print(report)
    best = min(res.trace, key=lambda c: (c.loss, c.candidate_id))
    return EXIT_OK if best.converged else EXIT_NOT_CONVERGED


def _cmd_verify(cfg, out, base_dir):
    from .verify import run_all

    results = run_all()
    with open(os.path.join(out, "verify.csv"), "w") as fh:
        fh.write("check,passed,detail\n")
        for name, ok, detail in results:
            fh.write(f"\"{name}\",{int(ok)},\"{detail}\"\n")
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_VERIFY_FAILED


def _cmd_graph_info(cfg, out, base_dir):
    g = cfg.graph.with_weights(cfg.alpha)
    listing = {"command": "graph-info", "graph": graph_to_listing(g)}
    with open(os.path.join(out, "graph.json"), "w") as fh:
        json.dump(listing, fh, indent=1)
        fh.write("\n")
    print(g.summary())
    return EXIT_OK


_DISPATCH = {"eval": _cmd_eval, "solve": _cmd_solve, "vanishing-noise": _cmd_vanishing, "bilevel": _cmd_bilevel,
             "verify": _cmd_verify, "graph-info": _cmd_graph_info}


def run(cfg: RunConfig, base_dir: str = ".") -> int:
    """Dispatch the command; returns the exit code."""
    out = cfg.output if os.path.isabs(cfg.output) else os.path.join(base_dir, cfg.output)
    os.makedirs(out, exist_ok=True)
    return _DISPATCH[cfg.command](cfg, out, base_dir)


def main(argv: Optional[List[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="reggraph", description="Regularization graph toolkit.")
    ap.add_argument("config", help="JSON configuration file ('-' reads standard input)")
    ap.add_argument("--output", help="override the output directory")
    ap.add_argument("--seed", type=int, help="override the seed")
    args = ap.parse_args(argv)
    try:
        if args.config == "-":
            text, base_dir = sys.stdin.read(), os.getcwd()
        else:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
            base_dir = os.path.dirname(os.path.abspath(args.config))
        cfg = parse_config(text)
        if args.output:
            cfg.output = os.path.abspath(args.output)
        if args.seed is not None:
            cfg.seed = args.seed
        return run(cfg, base_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
