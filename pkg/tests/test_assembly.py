import numpy as np
import pytest
import scipy.sparse as sparse
from scipy.optimize import linprog

from reggraph.assembly import assemble, assemble_predual, flatten_saddle, project_kernel
from reggraph.functionals import GroupL1, HalfSquaredL2, IndicatorZero
from reggraph.graph_core import trivial_graph
from reggraph.graph_library import grad, make_graph
from reggraph.linalg_spaces import identity, scalar_field
from reggraph.oracle import brute_eval
from tests.conftest import library_graphs


def test_tv_dimensions():
    ap = assemble(*make_graph("tv", (4,)))
    assert ap.node_order == ["root", "l1"]
    assert (ap.n_rows, ap.n_cols) == (4 + 3, 4)


def test_tv_rows_are_minus_identity_and_gradient():
    g, a = make_graph("tv", (4,))
    ap = assemble(g, a)
    e = g.edges[0]
    assert np.allclose(ap.blocks[(0, 0)].toarray(), -e.phi.to_dense())
    assert np.allclose(ap.blocks[(1, 0)].toarray(), grad(scalar_field((4,))).to_dense())


def test_tgv_block_pattern():
    g, _ = make_graph("tgv", (8,))
    ap = assemble(g, (1.0, 1.0, 0.3))
    assert (len(ap.node_order), len(g.edges)) == (4, 3)
    sp_ = ap.sparsity()
    # the splitting row couples grad w1 - w2 - alpha w3
    assert sp_["s1"] == [0, 1, 2]
    assert np.allclose(ap.blocks[(1, 2)].toarray(), -0.3 * g.edges[2].phi.to_dense())
    for nid, cols in sp_.items():
        expected = (0 if nid == g.root else 1) + len(g.out_edges(nid))
        assert len(cols) == expected


def test_trivial_graph_assembly():
    s = scalar_field((3,))
    ap = assemble(trivial_graph(s, HalfSquaredL2(s)))
    assert ap.n_cols == 0
    assert ap.objective(np.array([1.0, 2.0, 2.0]), np.zeros(0)) == pytest.approx(4.5)


@pytest.mark.parametrize("name,g,a", library_graphs(), ids=[t[0] for t in library_graphs()])
def test_predual_adjoint_pairing(name, g, a, rng):
    pd = assemble_predual(g, a, rng.standard_normal(16))
    ap = pd.primal
    w, v = rng.standard_normal(ap.n_cols), rng.standard_normal(ap.n_rows)
    lhs, rhs = w @ pd.constraint(v), ap.apply(w) @ v
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, np.linalg.norm(w) * np.linalg.norm(v))


def test_tv_predual_supremum_at_step():
    u = np.array([0.0, 0.0, 1.0, 1.0])
    g, a = make_graph("tv", (4,))
    pd = assemble_predual(g, a, u)
    # independent LP: max <u, v1> over v1 = grad^T v2, |v2| <= 1
    G = grad(scalar_field((4,))).to_dense()
    res = linprog(-(G @ u), bounds=[(-1, 1)] * 3, method="highs")
    assert -res.fun == pytest.approx(1.0)
    v2 = res.x
    v = np.r_[G.T @ v2, v2]
    assert np.allclose(pd.constraint(v), 0)
    assert pd.value(v) == pytest.approx(1.0)


def test_tgv_predual_constraints():
    g, _ = make_graph("tgv", (8,))
    alpha = 0.5
    pd = assemble_predual(g, (1.0, 1.0, alpha), np.zeros(8))
    ap = pd.primal
    rng = np.random.default_rng(0)
    v = rng.standard_normal(ap.n_rows)
    rows = pd.edge_rows(v)
    vs = {nid: v[ap.row_slice(i)] for i, nid in enumerate(ap.node_order)}
    # edge s1 -> l1: v_l1 - v_s1; edge s1 -> l2: symgrad^T v_l2 - alpha v_s1
    assert np.allclose(rows[1], vs["l1"] - vs["s1"])
    assert np.allclose(rows[2], g.edges[2].theta.adjoint_apply(vs["l2"]) - alpha * vs["s1"])


def test_weak_duality_at_projected_points(rng):
    for name in ("tv", "tgv", "tv_lq"):
        g, a = make_graph(name, (16,))
        u = rng.standard_normal(16)
        pd = assemble_predual(g, a, u)
        ref = brute_eval(g, a, u).value
        for _ in range(5):
            v, _, ok = pd.feasible_point(rng.standard_normal(pd.primal.n_rows))
            assert ok
            assert np.abs(pd.constraint(v)).max() <= 1e-8
            assert pd.value(v) <= ref + 1e-8


def test_flatten_block_counts():
    g, a = make_graph("tv", (4,))
    spec = flatten_saddle(assemble(g, a), u=np.zeros(4))
    assert len(spec.blocks) == 2
    assert isinstance(spec.blocks[0].functional, IndicatorZero)
    assert isinstance(spec.blocks[1].functional, GroupL1)
    g2, a2 = make_graph("tgv", (8,))
    K = identity(scalar_field((8,)))
    spec2 = flatten_saddle(assemble(g2, a2), data=(K, np.zeros(8), 0.5))
    assert len(spec2.blocks) == 5 and spec2.n_u == 8
    s = scalar_field((3,))
    spec3 = flatten_saddle(assemble(trivial_graph(s, HalfSquaredL2(s))), u=np.ones(3))
    assert len(spec3.blocks) == 1
    with pytest.raises(ValueError):
        flatten_saddle(assemble(g, a), data=(identity(scalar_field((4,))), np.zeros(4), 1.0), data_kind="KL")


def test_project_kernel(rng):
    A = rng.standard_normal((10, 4))
    p, ok = project_kernel(sparse.csr_matrix(A), rng.standard_normal(10))
    assert ok and np.abs(A.T @ p).max() <= 1e-8
