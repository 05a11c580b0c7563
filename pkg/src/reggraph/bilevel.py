"""Learning the edge weights and the regularization parameter from a target.

The lower level is the Tikhonov problem ``0.5 |K u - f|^2 + beta R_alpha(u)``
solved by :func:`reggraph.solver.solve_tikhonov`; the upper level is

    |u_{alpha,beta} - u_target| + H1(alpha) + H2(w_{alpha,beta})

minimized by derivative-free search.  ``H1`` confines the learnable weights
to a box and ``H2`` bounds the invariant-subspace part of selected edge
variables.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from .graph_core import RegGraph, check, invariant_subspace, resolve_alpha
from .linalg_spaces import LinOp
from .solver import SolverConfig, solve_tikhonov

__all__ = [
    "PenaltyH1",
    "PenaltyH2",
    "BilevelConfig",
    "Candidate",
    "BilevelResult",
    "BilevelError",
    "upper_loss",
    "learn",
    "classify_limit",
    "limit_regularizer_report",
]

SEARCH_KINDS = ("grid", "coordinate-descent", "nelder-mead")
CACHE_QUANTUM = 1e-12


class BilevelError(RuntimeError):
    """Raised when no candidate of a search has finite upper-level loss."""


@dataclass(frozen=True)
class PenaltyH1:
    """Box ``[0, c]`` on the learnable weights plus an optional l1 term.

    Weights outside ``learnable`` must equal one (their trivial value).
    """

    learnable: Tuple[int, ...]
    c: float = 1.0
    l1: float = 0.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("box bound c must be positive")
        if self.l1 < 0:
            raise ValueError("l1 coefficient must be nonnegative")

    @classmethod
    def for_graph(cls, g: RegGraph, c: float = 1.0, l1: float = 0.0) -> "PenaltyH1":
        return cls(tuple(int(k) for k in np.flatnonzero(g.learnable_mask)), c, l1)

    def __call__(self, alpha) -> float:
        a = np.asarray(alpha, dtype=float)
        learn = np.zeros(a.size, dtype=bool)
        learn[list(self.learnable)] = True
        if np.any(np.abs(a[~learn] - 1.0) > 0):
            return np.inf
        al = a[learn]
        if np.any(al < 0) or np.any(al > self.c):
            return np.inf
        return float(self.l1 * np.sum(al))


@dataclass(frozen=True)
class PenaltyH2:
    """Penalty on the summed norms ``|proj_k w_k|`` over ``edges``: an indicator
    of ``[0, d]`` plus an optional linear term.

    ``proj_k`` is the edge projector from :func:`reggraph.graph_core.invariant_subspace`.
    """

    edges: Tuple[int, ...] = ()
    d: float = np.inf
    coef: float = 0.0

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError("H2 bound d must be positive")
        if self.coef < 0:
            raise ValueError("H2 coefficient must be nonnegative")

    @property
    def active(self) -> bool:
        return bool(self.edges) and (np.isfinite(self.d) or self.coef > 0)

    def magnitude(self, edge_vars: Sequence[np.ndarray], projectors: Dict[int, np.ndarray]) -> float:
        return float(sum(np.linalg.norm(projectors[k] @ edge_vars[k]) for k in self.edges))

    def __call__(self, edge_vars, projectors) -> float:
        if not self.active:
            return 0.0
        s = self.magnitude(edge_vars, projectors)
        if s > self.d:
            return np.inf
        return self.coef * s


@dataclass(frozen=True)
class BilevelConfig:
    """Search settings.

    ``alpha_points`` grid values per learnable weight (on ``[0, c]``);
    ``beta_range`` and ``beta_points`` give a log-spaced grid of positive
    ``beta``.  Coordinate descent starts from the grid optimum and refines
    one coordinate at a time, shrinking its step after each pass without
    improvement.  Nelder-Mead works on ``(alpha, log beta)`` from the grid
    optimum.
    """

    search: str = "grid"
    alpha_points: int = 5
    beta_range: Tuple[float, float] = (1e-2, 1.0)
    beta_points: int = 5
    cd_passes: int = 4
    cd_shrink: float = 0.5
    nm_budget: int = 60
    solver: SolverConfig = SolverConfig(gap_tol=1e-5)
    cache: bool = True
    parallel: bool = False
    workers: int = 4

    def __post_init__(self):
        if self.search not in SEARCH_KINDS:
            raise ValueError(f"search must be one of {SEARCH_KINDS}")
        lo, hi = self.beta_range
        if not (0 < lo <= hi < np.inf):
            raise ValueError("beta range must be positive and finite")
        if self.alpha_points < 1 or self.beta_points < 1:
            raise ValueError("grid resolutions must be positive")

    def beta_grid(self) -> np.ndarray:
        lo, hi = self.beta_range
        return np.geomspace(lo, hi, self.beta_points) if self.beta_points > 1 else np.array([lo])


@dataclass(frozen=True)
class Candidate:
    candidate_id: int
    alpha: Tuple[float, ...]
    beta: float
    loss: float
    gap: float
    iters: int
    converged: bool


@dataclass
class BilevelResult:
    alpha: np.ndarray
    beta: float
    loss: float
    trace: List[Candidate]
    pruned: List[int]
    learnable: Tuple[int, ...]
    u: List[np.ndarray] = field(repr=False, default_factory=list)
    edge_vars: List[List[np.ndarray]] = field(repr=False, default_factory=list)
    beta_at_boundary: str = ""

    def write_trace_csv(self, path) -> None:
        """Columns: ``candidate_id, alpha_<edge>..., beta, loss, gap, iters``."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["candidate_id"] + [f"alpha_{k}" for k in self.learnable] + ["beta", "loss", "gap", "iters"])
            for c in self.trace:
                wr.writerow([c.candidate_id] + [repr(float(c.alpha[k])) for k in self.learnable]
                            + [repr(c.beta), repr(c.loss), repr(c.gap), c.iters])


def upper_loss(u, u_target, alpha, edge_vars, H1: PenaltyH1, H2: PenaltyH2,
               projectors: Optional[Dict[int, np.ndarray]] = None,
               znorm: Optional[Callable[[np.ndarray], float]] = None) -> float:
    """``|u - u_target|_Z + H1(alpha) + H2(edge_vars)``; Euclidean ``Z`` by default."""
    diff = np.asarray(u, dtype=float) - np.asarray(u_target, dtype=float)
    fit = float(znorm(diff)) if znorm is not None else float(np.linalg.norm(diff))
    h2 = H2(edge_vars, projectors) if H2.active else 0.0
    return fit + H1(alpha) + h2


class _Evaluator:
    """Solves the lower level for a candidate and caches the outcome."""

    def __init__(self, g, K, data, H1, H2, cfg):
        self.g, self.K, self.data, self.H1, self.H2, self.cfg = g, K, data, H1, H2, cfg
        self.base = g.alpha.copy()
        self.cache: Dict[tuple, tuple] = {}
        self.trace: List[Candidate] = []
        self.proj_cache: Dict[tuple, Dict[int, np.ndarray]] = {}

    def full_alpha(self, learn_vals) -> np.ndarray:
        a = self.base.copy()
        a[list(self.H1.learnable)] = learn_vals
        return a

    def _projectors(self, a):
        if not self.H2.active:
            return None
        key = tuple(a > 0)
        if key not in self.proj_cache:
            self.proj_cache[key] = invariant_subspace(self.g, a).projectors
        return self.proj_cache[key]

    def key(self, a, beta):
        return tuple(np.round(np.asarray(a) / CACHE_QUANTUM).astype(np.int64)) + (float(beta),)

    def solve(self, a, beta):
        """Loss and lower-level outputs; does not touch the trace."""
        k = self.key(a, beta)
        if self.cfg.cache and k in self.cache:
            return self.cache[k]
        h1 = self.H1(a)
        if not np.isfinite(h1):
            out = (np.inf, np.inf, 0, True, [], [])
        else:
            proj = self._projectors(a)
            loss, gap, iters, conv, us, ws = 0.0, 0.0, 0, True, [], []
            for u_t, f in self.data:
                res = solve_tikhonov(self.K, f, beta=beta, g=self.g, alpha=a, cfg=self.cfg.solver)
                fit = upper_loss(res.u, u_t, a, res.edge_vars, self.H1, self.H2, proj) - h1
                loss += fit
                gap = max(gap, res.gap)
                iters += res.iterations
                conv = conv and res.converged
                us.append(res.u)
                ws.append(res.edge_vars)
            out = (loss + h1, gap, iters, conv, us, ws)
        if self.cfg.cache:
            self.cache[k] = out
        return out

    def record(self, a, beta, out) -> Candidate:
        c = Candidate(len(self.trace), tuple(float(v) for v in a), float(beta), float(out[0]),
                      float(out[1]), int(out[2]), bool(out[3]))
        self.trace.append(c)
        return c

    def evaluate_many(self, points: Sequence[Tuple[np.ndarray, float]]) -> List[Candidate]:
        """Evaluate in order; with ``parallel`` the solves run concurrently but
        the trace is still appended by candidate index."""
        if self.cfg.parallel and len(points) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                outs = list(pool.map(lambda p: self.solve(*p), points))
        else:
            outs = [self.solve(a, b) for a, b in points]
        return [self.record(a, b, o) for (a, b), o in zip(points, outs)]


def _argmin(cands: Sequence[Candidate]) -> Candidate:
    best = cands[0]
    for c in cands[1:]:
        if c.loss < best.loss:
            best = c
    return best


def _grid(ev: _Evaluator, H1: PenaltyH1, cfg: BilevelConfig) -> Candidate:
    axes = [np.linspace(0.0, H1.c, cfg.alpha_points) if cfg.alpha_points > 1 else np.array([H1.c])
            for _ in H1.learnable]
    mesh = np.meshgrid(*axes, indexing="ij") if axes else []
    learn_pts = np.stack([m.ravel() for m in mesh], axis=1) if axes else np.zeros((1, 0))
    points = [(ev.full_alpha(p), b) for p in learn_pts for b in cfg.beta_grid()]
    return _argmin(ev.evaluate_many(points))


def _coordinate_descent(ev: _Evaluator, H1: PenaltyH1, cfg: BilevelConfig, start: Candidate) -> Candidate:
    idx = list(H1.learnable)
    best = start
    a_step = H1.c / max(cfg.alpha_points - 1, 1) * cfg.cd_shrink
    lo, hi = cfg.beta_range
    b_step = (np.log(hi) - np.log(lo)) / max(cfg.beta_points - 1, 1) * cfg.cd_shrink
    for _ in range(cfg.cd_passes):
        improved = False
        for j in range(len(idx) + 1):
            a0, b0 = np.array(best.alpha), best.beta
            moves = []
            for sgn in (-1.0, 1.0):
                if j < len(idx):
                    a = a0.copy()
                    a[idx[j]] = np.clip(a[idx[j]] + sgn * a_step, 0.0, H1.c)
                    moves.append((a, b0))
                else:
                    moves.append((a0, float(np.exp(np.log(b0) + sgn * b_step))))
            for c in ev.evaluate_many(moves):
                if c.loss < best.loss:
                    best, improved = c, True
        if not improved:
            a_step *= cfg.cd_shrink
            b_step *= cfg.cd_shrink
    return best


def _nelder_mead(ev: _Evaluator, H1: PenaltyH1, cfg: BilevelConfig, start: Candidate) -> Candidate:
    idx = list(H1.learnable)
    best = [start]

    def obj(z):
        a = ev.full_alpha(np.clip(z[:-1], 0.0, H1.c))
        b = float(np.exp(z[-1]))
        c = ev.evaluate_many([(a, b)])[0]
        if c.loss < best[0].loss:
            best[0] = c
        return c.loss if np.isfinite(c.loss) else 1e300

    z0 = np.concatenate([np.array(start.alpha)[idx], [np.log(start.beta)]])
    minimize(obj, z0, method="Nelder-Mead", options={"maxfev": cfg.nm_budget, "xatol": 1e-4, "fatol": 1e-8})
    return best[0]


def learn(u_target, f, K: LinOp, g: RegGraph, H1: Optional[PenaltyH1] = None, H2: PenaltyH2 = PenaltyH2(),
          cfg: BilevelConfig = BilevelConfig()) -> BilevelResult:
    """Search ``(alpha, beta)`` minimizing the upper-level loss.

    ``u_target`` and ``f`` may be single arrays or equally long lists of
    training pairs (losses are summed).  The returned candidate has the
    smallest loss among all evaluated ones; ties keep the lower candidate id.
    """
    check(g)
    H1 = H1 or PenaltyH1.for_graph(g)
    if isinstance(u_target, (list, tuple)):
        data = list(zip([np.asarray(x, float) for x in u_target], [np.asarray(y, float) for y in f]))
    else:
        data = [(np.asarray(u_target, float), np.asarray(f, float))]
    ev = _Evaluator(g, K, data, H1, H2, cfg)
    best = _grid(ev, H1, cfg)
    if np.isfinite(best.loss):
        if cfg.search == "coordinate-descent":
            best = _coordinate_descent(ev, H1, cfg, best)
        elif cfg.search == "nelder-mead":
            best = _nelder_mead(ev, H1, cfg, best)
    if not np.isfinite(best.loss):
        raise BilevelError("every candidate has infinite upper-level loss (empty H1/H2 domain?)")
    a_hat = np.array(best.alpha)
    out = ev.solve(a_hat, best.beta)
    prune_tol = 1e-3 * H1.c
    pruned = [k for k in H1.learnable if a_hat[k] <= prune_tol]
    lo, hi = cfg.beta_range
    edge = "lower" if np.isclose(best.beta, lo) else ("upper" if np.isclose(best.beta, hi) else "")
    return BilevelResult(a_hat, best.beta, best.loss, list(ev.trace), pruned, tuple(H1.learnable),
                         out[4], out[5], edge)


# --- limit regularizer ---------------------------------------------------------
def classify_limit(g: RegGraph, alpha, prune_tol: float = 1e-3) -> str:
    """Name the regularizer left after removing learnable edges with weight ``<= prune_tol``."""
    a = resolve_alpha(g, alpha)
    keep = {g.edges[k].id: a[k] > prune_tol for k in range(len(g.edges))}
    name = g.name
    if name == "tgv_frame_infconv":
        tgv, frame = keep.get("alpha1", True), keep.get("alpha0", True)
        base = "TGV²" if tgv else "TV"
        return f"{base} △ frame-l1" if frame else base
    if name == "tv":
        return "TV"
    if name == "tgv":
        learn = [g.edges[k].id for k in np.flatnonzero(g.learnable_mask)]
        alive = [keep[e] for e in learn]
        order = 1
        for flag in alive:
            if not flag:
                break
            order += 1
        return "TV" if order == 1 else ("TGV²" if order == 2 else f"TGV^{order}")
    if name == "tvk_infconv":
        learn = [g.edges[k].id for k in np.flatnonzero(g.learnable_mask)]
        return "TV^k1 △ TV^k2" if all(keep[e] for e in learn) else "TV^k1"
    if name == "tight_frames":
        learn = [g.edges[k].id for k in np.flatnonzero(g.learnable_mask)]
        return "frame1-l1 △ frame2-l1" if all(keep[e] for e in learn) else "frame1-l1"
    return "custom"


def limit_regularizer_report(g: RegGraph, alpha_hat, prune_tol: Optional[float] = None, c: float = 1.0,
                             result: Optional[BilevelResult] = None) -> str:
    """Plain-text report naming the effective regularizer of the learned weights."""
    tol = 1e-3 * c if prune_tol is None else float(prune_tol)
    a = resolve_alpha(g, alpha_hat)
    label = classify_limit(g, a, tol)
    lines = [f"graph: {g.name}", f"effective regularizer: {label}"]
    for k, e in enumerate(g.edges):
        if g.learnable_mask[k]:
            state = "pruned" if a[k] <= tol else "kept"
            lines.append(f"edge {e.id}: alpha = {a[k]:.6g} ({state})")
    if result is not None:
        lines.append(f"beta: {result.beta:.6g}" + (f" (at {result.beta_at_boundary} end of range)"
                                                    if result.beta_at_boundary else ""))
        lines.append(f"upper loss: {result.loss:.10g}")
        lines.append(f"candidates evaluated: {len(result.trace)}")
    return "\n".join(lines)
