import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reggraph.graph_library import grad, haar, symgrad
from reggraph.linalg_spaces import (
    DimensionError,
    LinOp,
    Space,
    adjoint_apply,
    adjoint_mismatch,
    analyze,
    apply,
    coeff_seq,
    from_matrix,
    identity,
    operator_norm,
    product_space,
    scalar_field,
    sym_tensor_field,
    vector_field,
    zero_op,
)


def test_space_dimensions():
    s = scalar_field((4, 3))
    v = vector_field((4, 3), [(3, 3), (4, 2)])
    assert s.dim == 12
    assert v.dim == 17
    p = product_space([s, v, coeff_seq(5)])
    assert p.dim == 12 + 17 + 5
    assert p.block_sizes() == [12, 17, 5]


def test_sym_tensor_channel_count():
    with pytest.raises(ValueError):
        sym_tensor_field((4, 4), [(4, 4)] * 2, order=2)
    t = sym_tensor_field((4, 4), [(4, 4)] * 3, order=2)
    assert t.channels == 3


def test_space_description_round_trip():
    v = symgrad(grad(scalar_field((4, 4))).codomain).codomain
    p = product_space([v, scalar_field((5,))])
    assert Space.from_description(p.describe()) == p


def test_identity_apply():
    op = identity(scalar_field((4,)))
    assert np.array_equal(apply(op, [1, 2, 3, 4]), [1, 2, 3, 4])
    assert np.array_equal(adjoint_apply(op, [4, 3, 2, 1]), [4, 3, 2, 1])


def test_grad_apply_and_adjoint():
    assert np.allclose(apply(grad(scalar_field((4,))), [0, 0, 1, 1]), [0, 1, 0])
    assert np.allclose(adjoint_apply(grad(scalar_field((2,))), [1.0]), [-1, 1])


def test_composite_matches_dense_product():
    g1 = grad(scalar_field((4,)))
    # differences of the differences: reuse the 3-point stencil on the staggered grid
    g2 = LinOp(g1.codomain, coeff_seq(2), grad(scalar_field((3,))).to_sparse(), label="grad2")
    comp = g2.compose(g1)
    x = np.array([0.0, 1.0, 4.0, 9.0])
    dense = g2.to_dense() @ g1.to_dense()
    assert np.allclose(comp.apply(x), dense @ x)
    assert np.allclose(comp.apply(x), [2.0, 2.0])


def test_dimension_mismatch_is_structured():
    op = grad(scalar_field((4,)))
    with pytest.raises(DimensionError) as info:
        op.apply(np.ones(5))
    assert info.value.expected == 4 and info.value.got == 5


def test_haar_adjoint_probe(rng):
    W = haar(scalar_field((8,)))
    x, y = rng.standard_normal(8), rng.standard_normal(8)
    assert abs(W.apply(x) @ y - x @ W.adjoint_apply(y)) <= 1e-12


def test_matrix_free_operator():
    s = scalar_field((5,))
    op = LinOp(s, s, forward=lambda x: 2 * x[::-1], adjoint=lambda y: 2 * y[::-1], label="flip")
    assert adjoint_mismatch(op, probes=10) <= 1e-14
    assert np.allclose(op.to_dense(), 2 * np.eye(5)[::-1])


def test_analyze_grad_kernel_is_constants():
    an = analyze(grad(scalar_field((4,))))
    assert an.kernel_dim == 1
    assert np.allclose(np.abs(an.kernel_basis[:, 0]), 0.5)


def test_analyze_identity():
    an = analyze(identity(scalar_field((6,))))
    assert an.kernel_dim == 0
    assert an.poincare_C == pytest.approx(1.0)


def test_analyze_two_point_grad():
    # the 1x2 matrix [-1, 1] has singular value sqrt(2)
    an = analyze(grad(scalar_field((2,))))
    assert an.sigma_max == pytest.approx(np.sqrt(2))
    assert an.poincare_C == pytest.approx(0.7071067811865476, abs=1e-12)


def test_analyze_zero_operator():
    s = scalar_field((3,))
    an = analyze(zero_op(s, s))
    assert an.rank == 0 and an.poincare_C is None and an.kernel_dim == 3


def test_analyze_basis_orthonormal_and_idempotent():
    op = symgrad(grad(scalar_field((4, 4))).codomain)
    a1, a2 = analyze(op), analyze(op)
    B = a1.kernel_basis
    assert np.allclose(B.T @ B, np.eye(B.shape[1]), atol=1e-10)
    assert np.allclose(a1.kernel_projector, a2.kernel_projector, atol=1e-10)
    assert np.abs(op.to_dense() @ B).max() <= 1e-8 * a1.sigma_max


def test_operator_norm():
    s = scalar_field((7,))
    assert operator_norm(identity(s)).value == pytest.approx(1.0)
    assert operator_norm(identity(s, 3.0)).value == pytest.approx(3.0)
    G = grad(scalar_field((8,)))
    ref = np.linalg.svd(G.to_dense(), compute_uv=False)[0]
    est = operator_norm(G)
    assert est.converged
    assert abs(est.value - ref) <= 0.01 * ref
    assert operator_norm(G, seed=3).value == operator_norm(G, seed=3).value


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 6), n=st.integers(1, 6), seed=st.integers(0, 2**32 - 1))
def test_dense_adjoint_property(m, n, seed):
    mat = np.random.default_rng(seed).standard_normal((m, n))
    assert adjoint_mismatch(from_matrix(mat), probes=5, seed=seed) <= 1e-10


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 12), seed=st.integers(0, 2**32 - 1))
def test_poincare_property(n, seed):
    op = grad(scalar_field((n,)))
    an = analyze(op)
    w = np.random.default_rng(seed).standard_normal(n)
    lhs = np.linalg.norm(w - an.kernel_projector @ w)
    assert lhs <= an.poincare_C * np.linalg.norm(op.apply(w)) * (1 + 1e-8) + 1e-12
