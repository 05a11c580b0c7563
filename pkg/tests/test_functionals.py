import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from reggraph.functionals import (
    CompositeFG,
    GroupL1,
    GroupL1Aniso,
    HalfSquaredL2,
    IndicatorBall,
    IndicatorZero,
    LqNorm,
    Zero,
    conjugate_eval,
    evaluate,
    functional_from_dict,
    functional_to_dict,
    prox,
    prox_conjugate,
)
from reggraph.linalg_spaces import product_space, scalar_field, vector_field

PIXEL2 = vector_field((1,), [(1,), (1,)])  # one grid point, two channels
S6 = scalar_field((6,))
V33 = vector_field((3, 3), [(2, 3), (3, 2)])


def all_functionals():
    pair = product_space([S6, S6])
    return [
        IndicatorZero(S6),
        Zero(S6),
        GroupL1(V33, 0.7),
        GroupL1Aniso(V33, [0.4, 1.3]),
        LqNorm(S6, 1.5, 0.8),
        LqNorm(S6, 3.0),
        HalfSquaredL2(S6, 2.0),
        IndicatorBall(V33, 0.3),
        CompositeFG(pair, GroupL1(S6), LqNorm(S6, 2.5)),
    ]


IDS = [type(f).__name__ + str(i) for i, f in enumerate(all_functionals())]


def test_eval_examples():
    assert evaluate(IndicatorZero(S6), np.zeros(6)) == 0
    assert evaluate(GroupL1(PIXEL2), [3.0, 4.0]) == pytest.approx(5.0)
    assert evaluate(IndicatorBall(PIXEL2, 1.0), [0.0, 2.0]) == np.inf


def test_prox_examples():
    assert np.array_equal(prox(IndicatorZero(S6), np.arange(6.0), 0.7), np.zeros(6))
    assert np.allclose(prox(GroupL1(PIXEL2), [3.0, 4.0], 1.0), [2.4, 3.2])
    assert prox(HalfSquaredL2(scalar_field((1,))), [2.0], 1.0) == pytest.approx([1.0])


def test_group_prox_matches_scalar_minimization():
    # along the direction (3,4)/5 the prox reduces to min_r (r-5)^2/2 + r
    res = minimize_scalar(lambda r: 0.5 * (r - 5.0) ** 2 + abs(r), bounds=(-10, 10), method="bounded",
                          options={"xatol": 1e-12})
    assert np.allclose(prox(GroupL1(PIXEL2), [3.0, 4.0], 1.0), res.x * np.array([0.6, 0.8]), atol=1e-8)


def test_prox_conjugate_examples():
    v = np.arange(6.0)
    assert np.array_equal(prox_conjugate(IndicatorZero(S6), v, 2.0), v)
    assert np.allclose(prox_conjugate(GroupL1(PIXEL2), [3.0, 4.0], 1.0), [0.6, 0.8])
    assert prox_conjugate(HalfSquaredL2(scalar_field((1,))), [2.0], 1.0) == pytest.approx([1.0])


def test_conjugate_examples():
    assert conjugate_eval(IndicatorZero(S6), np.ones(6)) == 0
    f = GroupL1(PIXEL2)
    assert conjugate_eval(f, [0.0, 0.9]) == 0
    assert conjugate_eval(f, [0.0, 1.1]) == np.inf
    assert conjugate_eval(IndicatorBall(PIXEL2, 1.0), [0.0, 2.0]) == pytest.approx(2.0)


def test_ball_conjugate_brute_force():
    # support function of the unit disc, sampled on the boundary
    ang = np.linspace(0, 2 * np.pi, 20001)
    y = np.array([0.3, -1.7])
    brute = np.max(np.cos(ang) * y[0] + np.sin(ang) * y[1])
    assert conjugate_eval(IndicatorBall(PIXEL2, 1.0), y) == pytest.approx(brute, abs=1e-6)


def test_lq_power_form():
    f = LqNorm(scalar_field((3,)), q=3.0, weight=2.0)
    assert f.value(np.array([1.0, -2.0, 0.0])) == pytest.approx(2.0 / 3.0 * 9.0)


def test_dict_round_trip():
    for f in all_functionals():
        g = functional_from_dict(functional_to_dict(f), f.domain)
        assert functional_to_dict(g) == functional_to_dict(f)


def test_unknown_kind_names_path():
    with pytest.raises(ValueError, match="nodes.kind"):
        functional_from_dict({"kind": "GroupLl"}, S6, "nodes")


def test_invalid_parameters():
    with pytest.raises(ValueError):
        LqNorm(S6, q=1.0)
    with pytest.raises(ValueError):
        GroupL1(S6, weight=0)
    with pytest.raises(ValueError):
        IndicatorBall(S6, gamma=-1)


@pytest.mark.parametrize("f", all_functionals(), ids=IDS)
def test_value_at_zero_and_nonnegative(f, rng):
    assert f.value(np.zeros(f.domain.dim)) == 0
    for _ in range(5):
        assert f.value(rng.standard_normal(f.domain.dim)) >= 0


@pytest.mark.parametrize("f", all_functionals(), ids=IDS)
def test_moreau_decomposition(f, rng):
    for _ in range(10):
        v = 3 * rng.standard_normal(f.domain.dim)
        assert np.allclose(f.prox(v, 1.0) + f.prox_conjugate(v, 1.0), v, atol=1e-10)


@pytest.mark.parametrize("f", all_functionals(), ids=IDS)
def test_prox_optimality(f, rng):
    tau = 0.7
    v = 2 * rng.standard_normal(f.domain.dim)
    p = f.prox(v, tau)
    best = 0.5 * np.sum((p - v) ** 2) + tau * f.value(p)
    for _ in range(100):
        z = p + 0.1 * rng.standard_normal(p.size)
        assert best <= 0.5 * np.sum((z - v) ** 2) + tau * f.value(z) + 1e-9


@pytest.mark.parametrize("f", all_functionals(), ids=IDS)
def test_fenchel_young(f, rng):
    for _ in range(20):
        x, y = rng.standard_normal(f.domain.dim), rng.standard_normal(f.domain.dim)
        assert f.value(x) + f.conjugate(y) >= x @ y - 1e-9
    # equality on a subgradient pair produced by the prox
    v = 2 * rng.standard_normal(f.domain.dim)
    p = f.prox(v, 1.0)
    assert f.value(p) + f.conjugate(v - p) == pytest.approx(p @ (v - p), abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.floats(0.0, 1.0), k=st.integers(0, 8))
def test_convexity_property(seed, t, k):
    f = all_functionals()[k]
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(f.domain.dim), r.standard_normal(f.domain.dim)
    if isinstance(f, (IndicatorZero, IndicatorBall)):
        x, y = f.prox(x, 1.0), f.prox(y, 1.0)
    lhs = f.value(t * x + (1 - t) * y)
    assert lhs <= t * f.value(x) + (1 - t) * f.value(y) + 1e-9


@pytest.mark.parametrize("f", [g for g in all_functionals() if not isinstance(g, Zero)],
                         ids=[i for i, g in zip(IDS, all_functionals()) if not isinstance(g, Zero)])
def test_coercivity_on_rays(f, rng):
    # |v| <= C f(v) + D along rays with a finite fitted C
    ratios = []
    for _ in range(10):
        d = rng.standard_normal(f.domain.dim)
        d /= np.linalg.norm(d)
        for s in (10.0, 100.0):
            val = f.value(s * d)
            ratios.append(0.0 if np.isinf(val) else s / max(val, 1e-300))
    assert np.isfinite(max(ratios))
