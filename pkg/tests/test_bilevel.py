import numpy as np
import pytest

from reggraph.bilevel import (
    BilevelConfig,
    BilevelError,
    PenaltyH1,
    PenaltyH2,
    classify_limit,
    learn,
    limit_regularizer_report,
    upper_loss,
)
from reggraph.graph_core import hat_transform, invariant_subspace
from reggraph.graph_library import make_graph
from reggraph.inverse_lab import NoiseModel, corrupt, make_forward
from reggraph.solver import SolverConfig, evaluate_R, solve_tikhonov

N = 32
T = np.arange(N) / N
PIECEWISE_CONSTANT = np.select([T < 0.3, T < 0.7], [0.0, 1.0], 0.4)
PIECEWISE_AFFINE = np.where(T < 0.4, T / 0.4, 1.0 - (T - 0.4) / 0.6 * 0.8)
FAST = BilevelConfig(alpha_points=5, beta_points=4, beta_range=(0.01, 0.3))


def _problem(target, seed=3):
    fm = make_forward("identity", (N,))
    return fm, corrupt(fm, target, NoiseModel(0.05, seed))


def test_penalty_h1():
    g, _ = make_graph("tgv", (8,))
    H1 = PenaltyH1.for_graph(g, c=2.0, l1=0.5)
    assert H1.learnable == (2,)
    assert H1((1.0, 1.0, 1.5)) == pytest.approx(0.75)
    assert H1((1.0, 1.0, 2.5)) == np.inf
    assert H1((1.0, 0.5, 1.0)) == np.inf
    with pytest.raises(ValueError):
        PenaltyH1((2,), c=0.0)


def test_penalty_h2():
    assert PenaltyH2()([], {}) == 0.0
    proj = {0: np.eye(3)}
    H2 = PenaltyH2((0,), d=1.0)
    assert H2([np.zeros(3)], proj) == 0.0
    assert H2([np.array([2.0, 0.0, 0.0])], proj) == np.inf
    assert PenaltyH2((0,), coef=0.5)([np.array([3.0, 4.0, 0.0])], proj) == pytest.approx(2.5)


def test_upper_loss_terms(rng):
    g, _ = make_graph("tgv", (8,))
    a = np.array([1.0, 1.0, 0.4])
    H1 = PenaltyH1.for_graph(g, l1=0.3)
    H2 = PenaltyH2((2,), coef=0.2)
    proj = invariant_subspace(g, a).projectors
    u_t = rng.standard_normal(8)
    assert upper_loss(u_t, u_t, a, [np.zeros(8), np.zeros(7), np.zeros(7)], H1, H2, proj) == pytest.approx(0.3 * 0.4)
    u = rng.standard_normal(8)
    w = [rng.standard_normal(8), rng.standard_normal(7), rng.standard_normal(7)]
    expected = np.linalg.norm(u - u_t) + 0.3 * 0.4 + 0.2 * np.linalg.norm(proj[2] @ w[2])
    assert upper_loss(u, u_t, a, w, H1, H2, proj) == pytest.approx(expected)
    assert upper_loss(u, u_t, a, w, H1, PenaltyH2(), znorm=lambda d: np.abs(d).sum()) == \
        pytest.approx(np.abs(u - u_t).sum() + 0.12)


def test_config_validation():
    with pytest.raises(ValueError):
        BilevelConfig(beta_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        BilevelConfig(search="bayes")


def test_single_candidate_grid():
    g, _ = make_graph("tgv", (16,))
    fm = make_forward("identity", (16,))
    target = np.linspace(0, 1, 16)
    f = corrupt(fm, target, NoiseModel(0.05, 1))
    cfg = BilevelConfig(alpha_points=1, beta_points=1, beta_range=(0.1, 0.1))
    res = learn(target, f, fm.op, g, cfg=cfg)
    assert len(res.trace) == 1
    direct = solve_tikhonov(fm.op, f, beta=0.1, g=g, alpha=res.alpha, cfg=cfg.solver)
    assert np.array_equal(res.u[0], direct.u)
    assert res.loss == pytest.approx(np.linalg.norm(direct.u - target))


def test_tgv_learns_tv_on_piecewise_constant():
    g, _ = make_graph("tgv", (N,))
    fm, f = _problem(PIECEWISE_CONSTANT)
    res = learn(PIECEWISE_CONSTANT, f, fm.op, g, cfg=FAST)
    assert res.alpha[2] <= 0.05
    assert all(res.loss <= c.loss for c in res.trace)
    assert classify_limit(g, res.alpha, 1e-3) == "TV"


def test_tgv_learns_positive_weight_on_piecewise_affine():
    g, _ = make_graph("tgv", (N,))
    fm, f = _problem(PIECEWISE_AFFINE)
    res = learn(PIECEWISE_AFFINE, f, fm.op, g, cfg=FAST)
    zero = min(c.loss for c in res.trace if c.alpha[2] == 0.0)
    assert res.alpha[2] > 0.2
    assert res.loss < zero


def test_coordinate_descent_refines_grid():
    g, _ = make_graph("tgv", (16,))
    fm = make_forward("identity", (16,))
    target = PIECEWISE_AFFINE[::2]
    f = corrupt(fm, target, NoiseModel(0.05, 2))
    grid = learn(target, f, fm.op, g, cfg=BilevelConfig(alpha_points=3, beta_points=3))
    cd = learn(target, f, fm.op, g, cfg=BilevelConfig(alpha_points=3, beta_points=3, search="coordinate-descent",
                                                      cd_passes=2))
    assert cd.loss <= grid.loss + 1e-5
    nm = learn(target, f, fm.op, g, cfg=BilevelConfig(alpha_points=3, beta_points=3, search="nelder-mead",
                                                      nm_budget=10))
    assert nm.loss <= grid.loss + 1e-5


def test_parallel_matches_serial(tmp_path):
    g, _ = make_graph("tgv", (16,))
    fm = make_forward("identity", (16,))
    target = PIECEWISE_CONSTANT[::2]
    f = corrupt(fm, target, NoiseModel(0.05, 5))
    base = dict(alpha_points=3, beta_points=2)
    r1 = learn(target, f, fm.op, g, cfg=BilevelConfig(**base))
    r2 = learn(target, f, fm.op, g, cfg=BilevelConfig(parallel=True, workers=3, **base))
    assert r1.trace == r2.trace
    r1.write_trace_csv(tmp_path / "a.csv")
    r2.write_trace_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "candidate_id,alpha_2,beta,loss,gap,iters"


def test_training_pairs_sum_losses():
    g, _ = make_graph("tgv", (16,))
    fm = make_forward("identity", (16,))
    t1, t2 = PIECEWISE_CONSTANT[::2], PIECEWISE_AFFINE[::2]
    f1, f2 = corrupt(fm, t1, NoiseModel(0.05, 1)), corrupt(fm, t2, NoiseModel(0.05, 2))
    cfg = BilevelConfig(alpha_points=1, beta_points=1, beta_range=(0.1, 0.1))
    both = learn([t1, t2], [f1, f2], fm.op, g, cfg=cfg)
    one = learn(t1, f1, fm.op, g, cfg=cfg)
    two = learn(t2, f2, fm.op, g, cfg=cfg)
    assert both.loss == pytest.approx(one.loss + two.loss)


def test_infeasible_search_raises():
    g = make_graph("tgv", (8,))[0].with_weights((1.0, 1.0, 0.5))
    fm = make_forward("identity", (8,))
    with pytest.raises(BilevelError):
        learn(np.zeros(8), np.zeros(8), fm.op, g, H1=PenaltyH1(()), cfg=BilevelConfig(beta_points=1))


def test_pruned_graph_value_with_bounded_h2():
    # with finite d the kernel part of the pruned edge variable stays bounded and
    # the hat graph reproduces the value at the learned weights
    g, _ = make_graph("tgv", (16,))
    fm = make_forward("identity", (16,))
    target = PIECEWISE_CONSTANT[::2]
    f = corrupt(fm, target, NoiseModel(0.05, 5))
    H2 = PenaltyH2((2,), d=10.0)
    res = learn(target, f, fm.op, g, H2=H2, cfg=BilevelConfig(alpha_points=3, beta_points=2))
    assert 2 in res.pruned
    cfg = SolverConfig(gap_tol=1e-7)
    r = evaluate_R(g, res.alpha, res.u[0], cfg).value
    rh = evaluate_R(*hat_transform(g, res.alpha), res.u[0], cfg).value
    assert abs(rh - r) <= 1e-5 * (1 + r)


@pytest.mark.parametrize("a0,a1,label", [(0.0, 0.0, "TV"), (0.0, 0.7, "TGV²"), (0.3, 0.7, "TGV² △ frame-l1"),
                                         (0.3, 0.0, "TV △ frame-l1")])
def test_classify_tgv_frame(a0, a1, label):
    g, _ = make_graph("tgv_frame_infconv", (16,))
    alpha = np.array([1.0, 1.0, a1, a0])
    assert classify_limit(g, alpha) == label
    assert f"effective regularizer: {label}" in limit_regularizer_report(g, alpha)


def test_classify_other_graphs():
    assert classify_limit(make_graph("tv", (8,))[0], [1.0]) == "TV"
    assert classify_limit(make_graph("tgv", (8,), k=3)[0], [1, 1, 1, 1, 0.5]) == "TGV^3"
    assert classify_limit(make_graph("tv_lq", (8,))[0], [1, 1, 1]) == "custom"
