import numpy as np
import pytest

from reggraph.functionals import HalfSquaredL2
from reggraph.graph_core import trivial_graph
from reggraph.graph_library import make_graph
from reggraph.inverse_lab import make_forward
from reggraph.linalg_spaces import identity, scalar_field
from reggraph.oracle import brute_eval
from reggraph.solver import SolverConfig, certified_gap, evaluate_R, recursive_value, solve_tikhonov, write_trace_csv


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(step_factor=1.5)
    with pytest.raises(ValueError):
        SolverConfig(max_iters=0)
    with pytest.raises(ValueError):
        SolverConfig(primal_weight=0.0)


def test_trivial_graph_value():
    s = scalar_field((5,))
    u = np.arange(5.0)
    res = evaluate_R(trivial_graph(s, HalfSquaredL2(s)), None, u)
    assert res.value == pytest.approx(0.5 * u @ u)


def test_tv_step_and_constant():
    g, a = make_graph("tv", (4,))
    assert evaluate_R(g, a, [0, 0, 1, 1]).value == pytest.approx(1.0, abs=1e-5)
    assert evaluate_R(g, a, np.full(4, 3.0)).value == pytest.approx(0.0, abs=1e-8)


def test_tgv_affine_is_zero():
    g, a = make_graph("tgv", (16,))
    res = evaluate_R(g, a, np.linspace(-1, 2, 16), SolverConfig(gap_tol=1e-8))
    assert abs(res.value) <= 1e-6


def test_tgv_quadratic_matches_oracle():
    g, a = make_graph("tgv", (16,))
    u = (np.arange(16) / 15.0) ** 2
    res = evaluate_R(g, a, u, SolverConfig(gap_tol=1e-8))
    assert res.value == pytest.approx(brute_eval(g, a, u).value, rel=1e-5, abs=1e-7)


def test_infconv_matches_oracle(rng):
    g, a = make_graph("tvk_infconv", (8,))
    u = rng.standard_normal(8)
    ref = brute_eval(g, a, u).value
    assert evaluate_R(g, a, u).value == pytest.approx(ref, rel=1e-4)


def test_tikhonov_limits(rng):
    n = 16
    g, a = make_graph("tv", (n,))
    K = identity(scalar_field((n,)))
    f = rng.standard_normal(n)
    big = solve_tikhonov(K, f, beta=1e6, g=g, alpha=a, cfg=SolverConfig(gap_tol=1e-9))
    assert np.abs(big.u - f.mean()).max() <= 1e-3
    small = solve_tikhonov(K, f, beta=1e-8, g=g, alpha=a)
    assert np.abs(small.u - f).max() <= 1e-3
    with pytest.raises(ValueError):
        solve_tikhonov(K, f, beta=0.0, g=g, alpha=a)


def test_tikhonov_blur_fits_data():
    n = 32
    g, a = make_graph("tgv", (n,))
    fm = make_forward("gaussian-blur", (n,), sigma=1.0)
    t = np.arange(n) / n
    u_true = np.where(t < 0.5, t, 1.0 - t)
    f = fm.apply(u_true)
    res = solve_tikhonov(fm.op, f, beta=1e-4, g=g, alpha=a)
    assert np.linalg.norm(fm.apply(res.u) - f) <= 1e-2 * np.linalg.norm(f)


def test_certified_gap():
    g, a = make_graph("tv", (8,))
    u = np.r_[np.zeros(4), np.ones(4)]
    res = evaluate_R(g, a, u)
    cert = certified_gap(g, a, u, res)
    assert cert["reliable"]
    assert -1e-8 <= cert["gap"] <= 1e-5
    s = scalar_field((3,))
    tg = trivial_graph(s, HalfSquaredL2(s))
    assert certified_gap(tg, None, np.ones(3), evaluate_R(tg, None, np.ones(3)))["gap"] == 0.0


def test_truncated_run_has_larger_gap(rng):
    g, a = make_graph("tgv", (16,))
    u = rng.standard_normal(16)
    short = evaluate_R(g, a, u, SolverConfig(max_iters=10, check_every=10))
    full = evaluate_R(g, a, u)
    assert not short.converged
    assert short.gap > full.gap >= -1e-8


def test_determinism_and_gap_decrease(rng, tmp_path):
    g, a = make_graph("tgv_frame_infconv", (16,))
    u = rng.standard_normal(16)
    r1, r2 = evaluate_R(g, a, u), evaluate_R(g, a, u)
    assert r1.trace == r2.trace and np.array_equal(r1.x, r2.x)
    gaps = [row[3] for row in r1.trace]
    assert gaps[-1] <= gaps[0]
    write_trace_csv(r1, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iteration,primal_residual,dual_residual,gap"
    assert len(lines) == len(r1.trace) + 1


def test_converged_implies_gap_bound(rng):
    g, a = make_graph("tv_lq", (16,))
    res = evaluate_R(g, a, rng.standard_normal(16))
    assert res.converged
    assert res.gap <= 1e-6 * (1 + abs(res.value))


def test_recursive_representation(rng):
    g, a = make_graph("tgv", (12,))
    u = rng.standard_normal(12)
    rec, full = recursive_value(g, a, u)
    assert rec == pytest.approx(full.value, rel=1e-4)


def test_primal_weight_handles_tiny_edge_weight():
    # a tiny symgrad weight needs large edge variables; plain steps stall far from the value
    g, _ = make_graph("tgv", (4, 4))
    a = g.alpha.copy()
    a[2] = 2.0 ** -6
    u = np.random.default_rng(9).standard_normal(16)
    ref = brute_eval(g, a, u).value
    plain = evaluate_R(g, a, u, SolverConfig(gap_tol=1e-8, max_iters=20_000))
    weighted = evaluate_R(g, a, u, SolverConfig(gap_tol=1e-8, primal_weight=64.0))
    assert weighted.converged and abs(weighted.value - ref) <= 1e-6 * (1 + ref)
    assert not plain.converged and weighted.value <= plain.value
