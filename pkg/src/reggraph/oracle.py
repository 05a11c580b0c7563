"""Independent reference computations.

Nothing here uses the saddle-point solver or any conjugate functional.

* :func:`brute_eval` minimizes the defining sum of node functionals over the
  edge variables directly.  The default route hands that primal problem to
  a conic solver (via cvxpy); the ``subgradient`` route is a dependency-free
  projected subgradient method.
* :func:`taut_string_tv1d` is an exact 1-D TV denoiser.
* :func:`zero_set_probe` checks candidate invariant directions with
  :func:`brute_eval`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .functionals import (
    CompositeFG,
    GroupL1,
    GroupL1Aniso,
    HalfSquaredL2,
    IndicatorBall,
    IndicatorZero,
    LqNorm,
    NodeFunctional,
    Zero,
)
from .graph_core import RegGraph, check, resolve_alpha
from .linalg_spaces import Space

__all__ = [
    "OracleConfig",
    "OracleResult",
    "brute_eval",
    "taut_string_tv1d",
    "zero_set_probe",
    "graph_expression",
    "infconv_reference",
    "MAX_EDGE_DIM",
]

MAX_EDGE_DIM = 512


@dataclass(frozen=True)
class OracleConfig:
    """``method`` is ``conic`` or ``subgradient``.

    The subgradient route takes ``budget`` steps of length ``step / sqrt(t)``
    and handles leftover equality rows by a quadratic penalty whose weight is
    raised geometrically to ``mu_max``.
    """

    method: str = "conic"
    budget: int = 1_000_000
    step: float = 1.0
    tol: float = 1e-9
    mu_max: float = 1e8
    seed: int = 0


@dataclass(frozen=True)
class OracleResult:
    value: float
    uncertainty: float
    method: str
    status: str

    def __float__(self):
        return self.value


# --- conic route -------------------------------------------------------------
def _group_stack(space: Space):
    """Matrices ``P_c`` with ``(P_c v)[x]`` the channel-``c`` entry at anchor point ``x``."""
    groups = space.group_index()
    chans = space.channel_index()
    ng = space.n_groups
    mats = []
    for c in range(space.channels):
        idx = np.flatnonzero(chans == c)
        mats.append(sp.csr_matrix((np.ones(idx.size), (groups[idx], idx)), shape=(ng, space.dim)))
    used = np.unique(groups)
    return mats, used


def _functional_terms(cp, f: NodeFunctional, v):
    """Objective term and constraints of ``f(v)`` as cvxpy expressions."""
    if isinstance(f, IndicatorZero):
        return 0, [v == 0]
    if isinstance(f, Zero):
        return 0, []
    if isinstance(f, GroupL1):
        mats, used = _group_stack(f.domain)
        if len(mats) == 1:
            return f.weight * cp.sum(cp.abs(v)), []
        stacked = cp.vstack([(m[used] @ v) for m in mats])
        return f.weight * cp.sum(cp.norm(stacked, 2, axis=0)), []
    if isinstance(f, GroupL1Aniso):
        w = f.beta[f.domain.channel_index()]
        return cp.sum(cp.multiply(w, cp.abs(v))), []
    if isinstance(f, LqNorm):
        return f.weight / f.q * cp.sum(cp.power(cp.abs(v), f.q)), []
    if isinstance(f, HalfSquaredL2):
        return 0.5 * f.weight * cp.sum_squares(v), []
    if isinstance(f, IndicatorBall):
        mats, used = _group_stack(f.domain)
        if len(mats) == 1:
            return 0, [cp.abs(v) <= f.gamma[f.domain.group_index()]]
        stacked = cp.vstack([(m[used] @ v) for m in mats])
        return 0, [cp.norm(stacked, 2, axis=0) <= f.gamma[used]]
    if isinstance(f, CompositeFG):
        cut = f.domain.components[0].dim
        t1, c1 = _functional_terms(cp, f.f, v[:cut])
        t2, c2 = _functional_terms(cp, f.g, v[cut:])
        return t1 + t2, c1 + c2
    raise TypeError(f"no conic form for {type(f).__name__}")


def graph_expression(cp, g: RegGraph, alpha, root_input):
    """Objective and constraints of the defining minimization with ``root_input``
    (a cvxpy expression or array) at the root; edge variables are created here.
    """
    a = resolve_alpha(g, alpha)
    w = {k: cp.Variable(e.space.dim, name=f"w_{e.id}") for k, e in enumerate(g.edges)}
    obj, cons = 0, []
    for node in g.nodes:
        nid = node.id
        k_in = g.in_edge(nid)
        v = root_input if nid == g.root else g.edges[k_in].theta.to_sparse() @ w[k_in]
        for k in g.out_edges(nid):
            if a[k] != 0:
                v = v - a[k] * (g.edges[k].phi.to_sparse() @ w[k])
        term, c = _functional_terms(cp, node.functional, v)
        obj = obj + term
        cons += c
    return obj, cons, w


def _solve_conic(cp, obj, cons):
    prob = cp.Problem(cp.Minimize(obj), cons)
    status = "unsolved"
    for solver, opts in (("CLARABEL", {"tol_gap_abs": 1e-10, "tol_gap_rel": 1e-10, "tol_feas": 1e-10,
                                        "max_iter": 500}),
                         ("ECOS", {}), ("SCS", {"eps": 1e-9, "max_iters": 200000})):
        if solver not in cp.installed_solvers():
            continue
        try:
            prob.solve(solver=solver, **opts)
        except cp.error.SolverError:
            continue
        status = prob.status
        if status in ("optimal", "optimal_inaccurate"):
            break
    return prob, status


def _brute_conic(g, a, u) -> OracleResult:
    import cvxpy as cp

    obj, cons, _ = graph_expression(cp, g, a, np.asarray(u, dtype=float))
    if isinstance(obj, (int, float)):
        obj = cp.Constant(float(obj))
    prob, status = _solve_conic(cp, obj, cons)
    if status == "infeasible":
        return OracleResult(np.inf, 0.0, "conic", status)
    val = float(prob.value) if prob.value is not None else np.nan
    unc = 1e-7 * (1 + abs(val)) if status == "optimal" else 1e-4 * (1 + abs(val))
    return OracleResult(val, unc, "conic", status)


# --- subgradient route -----------------------------------------------------------
def _rows(g: RegGraph, a: np.ndarray):
    """Dense node-row blocks ``v_n = T_n w + s_n`` with the input at the root."""
    dims = [e.space.dim for e in g.edges]
    offs = np.concatenate([[0], np.cumsum(dims)]).astype(int)
    out = []
    for node in g.nodes:
        T = np.zeros((node.space.dim, offs[-1]))
        k_in = g.in_edge(node.id)
        if k_in is not None:
            T[:, offs[k_in]:offs[k_in + 1]] += g.edges[k_in].theta.to_dense()
        for k in g.out_edges(node.id):
            T[:, offs[k]:offs[k + 1]] -= a[k] * g.edges[k].phi.to_dense()
        out.append((node, T))
    return out, int(offs[-1])


def _subgrad(f: NodeFunctional, v: np.ndarray) -> np.ndarray:
    if isinstance(f, GroupL1):
        groups = f.domain.group_index()
        mag = np.sqrt(np.bincount(groups, weights=v * v, minlength=f.domain.n_groups))
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(mag[groups] > 0, v / mag[groups], 0.0)
        return f.weight * s
    if isinstance(f, GroupL1Aniso):
        return f.beta[f.domain.channel_index()] * np.sign(v)
    if isinstance(f, LqNorm):
        return f.weight * np.sign(v) * np.abs(v) ** (f.q - 1)
    if isinstance(f, HalfSquaredL2):
        return f.weight * v
    if isinstance(f, CompositeFG):
        cut = f.domain.components[0].dim
        return np.concatenate([_subgrad(f.f, v[:cut]), _subgrad(f.g, v[cut:])])
    return np.zeros_like(v)


def _brute_subgradient(g, a, u, ocfg: OracleConfig) -> OracleResult:
    rows, nw = _rows(g, a)
    root_pos = [i for i, (n, _) in enumerate(rows) if n.id == g.root][0]
    shifts = [np.asarray(u, float) if i == root_pos else np.zeros(n.space.dim) for i, (n, _) in enumerate(rows)]
    eq = [i for i, (n, _) in enumerate(rows) if isinstance(n.functional, IndicatorZero)]
    soft = [i for i in range(len(rows)) if i not in eq]
    # exact affine elimination of the splitting rows: w = w0 + N z
    if eq:
        C = np.vstack([rows[i][1] for i in eq])
        d = -np.concatenate([shifts[i] for i in eq])
        w0, *_ = np.linalg.lstsq(C, d, rcond=None)
        consistent = np.linalg.norm(C @ w0 - d) <= 1e-9 * (1 + np.linalg.norm(d))
        _, s, vt = np.linalg.svd(C, full_matrices=True)
        rank = int(np.sum(s > 1e-10 * (s[0] if s.size else 1.0)))
        N = vt[rank:].T
    else:
        C, d, consistent = np.zeros((0, nw)), np.zeros(0), True
        w0, N = np.zeros(nw), np.eye(nw)
    if not consistent:
        N = np.eye(nw)
        w0 = np.zeros(nw)
    mats = [(rows[i][0].functional, rows[i][1] @ N, rows[i][1] @ w0 + shifts[i]) for i in soft]
    balls = [(f, M, c) for f, M, c in mats if isinstance(f, IndicatorBall)]
    terms = [(f, M, c) for f, M, c in mats if not isinstance(f, IndicatorBall)]

    def penalty_parts(z):
        pen, grad = 0.0, np.zeros(N.shape[1])
        for f, M, c in balls:
            v = M @ z + c
            r = f.prox(v, 1.0) - v
            pen += 0.5 * float(r @ r)
            grad -= M.T @ r
        if not consistent:
            r = C @ (w0 + N @ z) - d
            pen += 0.5 * float(r @ r)
            grad += N.T @ (C.T @ r)
        return pen, grad

    z = np.zeros(N.shape[1])
    best, best_hist = np.inf, []
    mu = 1.0
    stages = max(1, int(np.ceil(np.log10(ocfg.mu_max)))) if (balls or not consistent) else 1
    per_stage = max(1, ocfg.budget // stages)
    t_total = 0
    for stage in range(stages):
        for t in range(1, per_stage + 1):
            t_total += 1
            val, grad = 0.0, np.zeros_like(z)
            for f, M, c in terms:
                v = M @ z + c
                val += f.value(v)
                grad += M.T @ _subgrad(f, v)
            pen, pgrad = penalty_parts(z) if (balls or not consistent) else (0.0, 0.0)
            feasible = pen <= 1e-16
            if feasible and val < best:
                best = val
            gn = np.linalg.norm(grad + mu * pgrad)
            if gn == 0:
                break
            z = z - ocfg.step / np.sqrt(t) * (grad + mu * pgrad) / gn
            if t % max(1, per_stage // 20) == 0:
                best_hist.append(best)
        mu *= 10.0
    if not np.isfinite(best):
        # fall back to the penalized value at the final point
        best = sum(f.value(M @ z + c) for f, M, c in terms)
    tail = [b for b in best_hist[-5:] if np.isfinite(b)]
    unc = (max(tail) - min(tail)) if len(tail) > 1 else np.inf
    return OracleResult(float(best), float(unc), "subgradient", "budget")


def brute_eval(g: RegGraph, alpha, u, ocfg: OracleConfig = OracleConfig()) -> OracleResult:
    """``inf_w sum_n Psi_n(...)`` minimized directly over the edge variables."""
    check(g, alpha)
    a = resolve_alpha(g, alpha)
    total = sum(e.space.dim for e in g.edges)
    if total > MAX_EDGE_DIM:
        raise ValueError(f"total edge dimension {total} exceeds the oracle limit {MAX_EDGE_DIM}")
    u = np.asarray(u, dtype=float)
    if not g.edges:
        return OracleResult(g.node(g.root).functional.value(u), 0.0, "closed-form", "optimal")
    if ocfg.method == "conic":
        return _brute_conic(g, a, u)
    if ocfg.method == "subgradient":
        return _brute_subgradient(g, a, u, ocfg)
    raise ValueError(f"unknown oracle method {ocfg.method!r}")


def infconv_reference(g1: RegGraph, alpha1, g2: RegGraph, alpha2, alpha_star: float, u) -> float:
    """``inf_v R1(u - alpha_star v) + R2(v)`` solved jointly over ``v`` and both edge sets."""
    import cvxpy as cp

    u = np.asarray(u, dtype=float)
    v = cp.Variable(u.size, name="v")
    o1, c1, _ = graph_expression(cp, g1, alpha1, u - alpha_star * v)
    o2, c2, _ = graph_expression(cp, g2, alpha2, v)
    prob, status = _solve_conic(cp, o1 + o2, c1 + c2)
    if status not in ("optimal", "optimal_inaccurate"):
        raise RuntimeError(f"conic reference failed: {status}")
    return float(prob.value)


# --- exact 1-D TV denoising --------------------------------------------------------
def taut_string_tv1d(f, lam: float) -> np.ndarray:
    """Exact minimizer of ``0.5 |u - f|^2 + lam * sum |u[i+1] - u[i]|``.

    Direct taut-string algorithm: the solution is grown left to right while
    keeping the lower and upper candidate segment levels; a segment is fixed
    as soon as the tube forces a jump.  Linear time in practice.
    """
    y = np.asarray(f, dtype=float).ravel()
    n = y.size
    if n == 0:
        return y.copy()
    if lam <= 0 or n == 1:
        return y.copy()
    x = np.empty(n)
    k = k0 = kmin = kplus = 0
    vmin, vmax = y[0] - lam, y[0] + lam
    umin, umax = lam, -lam
    while True:
        if k == n - 1:
            if umin < 0.0:
                x[k0:kmin + 1] = vmin
                k = k0 = kmin = kplus = kmin + 1
                vmin = y[k]
                umin = lam
                umax = y[k] + lam - vmax
                continue
            if umax > 0.0:
                x[k0:kplus + 1] = vmax
                k = k0 = kmin = kplus = kplus + 1
                vmax = y[k]
                umax = -lam
                umin = y[k] - lam - vmin
                continue
            x[k0:] = vmin + umin / (k - k0 + 1)
            return x
        if y[k + 1] + umin < vmin - lam:
            x[k0:kmin + 1] = vmin
            k = k0 = kmin = kplus = kmin + 1
            vmin = y[k]
            vmax = y[k] + 2 * lam
            umin, umax = lam, -lam
        elif y[k + 1] + umax > vmax + lam:
            x[k0:kplus + 1] = vmax
            k = k0 = kmin = kplus = kplus + 1
            vmin = y[k] - 2 * lam
            vmax = y[k]
            umin, umax = lam, -lam
        else:
            k += 1
            umin += y[k] - vmin
            umax += y[k] - vmax
            if umin >= lam:
                vmin += (umin - lam) / (k - k0 + 1)
                umin = lam
                kmin = k
            if umax <= -lam:
                vmax += (umax + lam) / (k - k0 + 1)
                umax = -lam
                kplus = k


# --- invariant directions ------------------------------------------------------------
@dataclass(frozen=True)
class ProbeResult:
    confirmed: List[int]
    refuted: List[int]
    max_change: List[float]


def zero_set_probe(g: RegGraph, alpha, candidates, u0=None, ts: Sequence[float] = (1.0, -1.0, 10.0, -10.0),
                   tol: float = 1e-6, seed: int = 0, ocfg: OracleConfig = OracleConfig()) -> ProbeResult:
    """Keep the candidate directions ``l`` along which the oracle value does not move.

    A direction is confirmed when ``|R(u0 + t l) - R(u0)| <= tol * (1 + |R(u0)|)``
    for every ``t`` in ``ts``.
    """
    cands = np.atleast_2d(np.asarray(candidates, dtype=float))
    root_dim = g.node(g.root).space.dim
    if cands.shape[1] != root_dim and cands.shape[0] == root_dim:
        cands = cands.T
    if u0 is None:
        u0 = np.random.default_rng(seed).standard_normal(root_dim)
    base = brute_eval(g, alpha, u0, ocfg).value
    confirmed, refuted, changes = [], [], []
    for i, l in enumerate(cands):
        worst = max(abs(brute_eval(g, alpha, u0 + t * l, ocfg).value - base) for t in ts)
        changes.append(worst)
        (confirmed if worst <= tol * (1 + abs(base)) else refuted).append(i)
    return ProbeResult(confirmed, refuted, changes)
