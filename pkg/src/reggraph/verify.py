"""Quick invariant checks across all modules, run by ``reggraph`` with ``"command": "verify"``.

Each check returns ``(name, passed, detail)``; the whole suite takes a few
seconds at the small sizes used here.
"""

from __future__ import annotations

from typing import Callable, List, Tuple

import numpy as np

from .functionals import GroupL1, GroupL1Aniso, HalfSquaredL2, IndicatorBall, LqNorm
from .graph_core import Edge, GraphError, Node, RegGraph, check
from .graph_library import conv, dct, gaussian_kernel, grad, grad_k, haar, make_graph, mask, symgrad
from .inverse_lab import splitmix64
from .linalg_spaces import adjoint_mismatch, analyze, identity, scalar_field
from .oracle import brute_eval, taut_string_tv1d
from .solver import SolverConfig, evaluate_R, solve_tikhonov

Check = Tuple[str, bool, str]


def _adjoints() -> Check:
    s1, s2 = scalar_field((16,)), scalar_field((4, 4))
    ops = [grad(s1), grad(s2), symgrad(grad(s2).codomain), grad_k(s1, 3), haar(s1), dct(s2),
           conv(s1, gaussian_kernel(1.0)), mask(s1, np.arange(16) % 3 == 0)]
    worst = max(adjoint_mismatch(op, probes=20) for op in ops)
    return "operator adjoints", worst <= 1e-10, f"max relative mismatch {worst:.2e}"


def _kernels() -> Check:
    s2 = scalar_field((4, 4))
    dims = (analyze(grad(scalar_field((8,)))).kernel_dim, analyze(grad(s2)).kernel_dim,
            analyze(symgrad(grad(s2).codomain)).kernel_dim)
    return "kernel dimensions", dims == (1, 1, 3), f"grad 1-D/2-D, symgrad 2-D: {dims}"


def _fenchel_young() -> Check:
    rng = np.random.default_rng(0)
    v2 = grad(scalar_field((3, 3))).codomain
    s = scalar_field((6,))
    fs = [GroupL1(v2, 0.7), GroupL1Aniso(s, 0.4), LqNorm(s, 1.5, 0.8), LqNorm(s, 3.0), HalfSquaredL2(s, 2.0),
          IndicatorBall(s, 0.3)]
    worst = 0.0
    for f in fs:
        v = 2 * rng.standard_normal(f.domain.dim)
        p = f.prox(v, 1.0)
        y = v - p
        worst = max(worst, abs(f.value(p) + f.conjugate(y) - float(p @ y)))
    return "prox / conjugate consistency", worst <= 1e-8, f"max Fenchel-Young defect {worst:.2e}"


def _spot_values() -> Check:
    g, a = make_graph("tv", (4,))
    tv = evaluate_R(g, a, np.array([0.0, 0.0, 1.0, 1.0])).value
    g2, a2 = make_graph("tgv", (16,))
    tgv = evaluate_R(g2, a2, np.linspace(-1, 2, 16), SolverConfig(gap_tol=1e-8)).value
    ok = abs(tv - 1) <= 1e-5 and abs(tgv) <= 1e-5
    return "closed-form values", ok, f"TV(step) = {tv:.8f}, TGV2(affine) = {tgv:.2e}"


def _oracle() -> Check:
    rng = np.random.default_rng(1)
    worst = 0.0
    for name in ("tv", "tgv", "tv_lq"):
        g, a = make_graph(name, (8,))
        u = rng.standard_normal(8)
        val = evaluate_R(g, a, u).value
        ref = brute_eval(g, a, u).value
        worst = max(worst, abs(val - ref) / max(1.0, abs(ref)))
    return "solver vs oracle", worst <= 1e-4, f"max relative difference {worst:.2e}"


def _taut_string() -> Check:
    rng = np.random.default_rng(2)
    f = rng.standard_normal(16)
    g, a = make_graph("tv", (16,))
    u = solve_tikhonov(identity(scalar_field((16,))), f, beta=0.5, g=g, alpha=a,
                       cfg=SolverConfig(gap_tol=1e-9)).u
    err = float(np.max(np.abs(u - taut_string_tv1d(f, 0.5))))
    return "TV denoising vs taut string", err <= 1e-4, f"max deviation {err:.2e}"


def _validation() -> Check:
    s = scalar_field((3,))
    from .functionals import IndicatorZero

    nodes = (Node("a", s, IndicatorZero(s)), Node("b", s, GroupL1(s)))
    edges = (Edge("a", "b", identity(s), identity(s)), Edge("b", "a", identity(s), identity(s)))
    try:
        check(RegGraph(nodes, edges, "a"))
    except GraphError:
        return "graph validation", True, "cyclic graph rejected"
    return "graph validation", False, "cyclic graph accepted"


def _prng() -> Check:
    words = splitmix64(0, 2)
    ok = int(words[0]) == 0xE220A8397B1DCDAF and int(words[1]) == 0x6E789E6AA1B965F4
    return "noise generator reference words", ok, f"{int(words[0]):#x}, {int(words[1]):#x}"


CHECKS: List[Callable[[], Check]] = [_adjoints, _kernels, _fenchel_young, _spot_values, _oracle, _taut_string,
                                     _validation, _prng]


def run_all() -> List[Check]:
    out = []
    for fn in CHECKS:
        try:
            name, ok, detail = fn()
            out.append((name, bool(ok), detail))
        except Exception as exc:  # a crashing check is a failed check
            out.append((fn.__name__.strip("_"), False, f"{type(exc).__name__}: {exc}"))
    return out
