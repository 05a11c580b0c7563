import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reggraph.graph_library import make_graph
from reggraph.oracle import MAX_EDGE_DIM, OracleConfig, brute_eval, taut_string_tv1d, zero_set_probe
from reggraph.solver import evaluate_R


def test_tv_step():
    g, a = make_graph("tv", (4,))
    assert brute_eval(g, a, [0, 0, 1, 1]).value == pytest.approx(1.0, abs=1e-4)
    sub = brute_eval(g, a, [0, 0, 1, 1], OracleConfig(method="subgradient", budget=20000))
    assert sub.value == pytest.approx(1.0, abs=1e-4)


def test_tgv_affine():
    g, a = make_graph("tgv", (8,))
    assert brute_eval(g, a, np.linspace(0, 1, 8)).value <= 1e-4


def test_tv_lq_reference_agrees_with_solver(rng):
    g, a = make_graph("tv_lq", (8,), q=2.0)
    u = rng.standard_normal(8)
    ref = brute_eval(g, a, u).value
    assert evaluate_R(g, a, u).value == pytest.approx(ref, rel=1e-4)
    sub = brute_eval(g, a, u, OracleConfig(method="subgradient", budget=20000))
    assert sub.value >= ref - 1e-6
    assert sub.value == pytest.approx(ref, rel=1e-3)


def test_oracle_limits():
    g, a = make_graph("tv", (600,))
    with pytest.raises(ValueError, match=str(MAX_EDGE_DIM)):
        brute_eval(g, a, np.zeros(600))
    g, a = make_graph("tv", (4,))
    with pytest.raises(ValueError):
        brute_eval(g, a, np.zeros(4), OracleConfig(method="newton"))


def test_taut_string_examples():
    assert np.allclose(taut_string_tv1d(np.full(5, 2.5), 0.3), 2.5)
    assert np.allclose(taut_string_tv1d([0.0, 1.0], 0.25), [0.25, 0.75])
    assert np.allclose(taut_string_tv1d([0.0, 1.0], 1.0), [0.5, 0.5])


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 40), lam=st.floats(1e-3, 5.0), seed=st.integers(0, 2**32 - 1))
def test_taut_string_optimality_certificate(n, lam, seed):
    f = np.random.default_rng(seed).standard_normal(n)
    x = taut_string_tv1d(f, lam)
    # dual certificate: z = -cumsum(f - x), |z| <= lam, z = lam * sign(dx) on jumps, z_n = 0
    z = -np.cumsum(f - x)
    assert abs(z[-1]) <= 1e-9 * max(1, n)
    z = z[:-1]
    assert np.all(np.abs(z) <= lam * (1 + 1e-9) + 1e-9)
    dx = np.diff(x)
    jump = np.abs(dx) > 1e-9
    assert np.allclose(z[jump], lam * np.sign(dx[jump]), atol=1e-8)


def test_zero_set_probe_tv():
    g, a = make_graph("tv", (8,))
    res = zero_set_probe(g, a, [np.ones(8), np.arange(8.0)])
    assert res.confirmed == [0] and res.refuted == [1]


def test_zero_set_probe_tgv_ramp():
    g, a = make_graph("tgv", (8,))
    res = zero_set_probe(g, a, [np.arange(8.0), np.arange(8.0) ** 2])
    assert res.confirmed == [0] and res.refuted == [1]
