"""Block realization of a weighted graph and its saddle-point form.

Rows are indexed by nodes (breadth-first from the root), columns by edges
(graph order).  Row ``n`` holds ``theta`` of the incoming edge and
``-alpha_e * phi_e`` for every outgoing edge ``e``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .functionals import (
    FEAS_TOL,
    HalfSquaredL2,
    IndicatorBall,
    IndicatorZero,
    NodeFunctional,
    Zero,
)
from .graph_core import RegGraph, check, resolve_alpha
from .linalg_spaces import DimensionError, LinOp, coeff_seq

__all__ = [
    "AssembledProblem",
    "PredualProblem",
    "SaddleBlock",
    "SaddleSpec",
    "assemble",
    "assemble_predual",
    "flatten_saddle",
    "project_kernel",
]

CG_TOL = 1e-10
CG_MAXITER = 500


def _offsets(sizes: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(sizes)]).astype(int)


@dataclass
class AssembledProblem:
    """The operator ``Lambda_alpha`` and the per-node functionals of ``Psi_u``."""

    graph: RegGraph
    alpha: np.ndarray
    node_order: List[str]
    row_offsets: np.ndarray
    col_offsets: np.ndarray
    Lam: sp.csr_matrix
    functionals: List[NodeFunctional]
    blocks: Dict[Tuple[int, int], sp.csr_matrix] = field(repr=False)

    @property
    def root_rows(self) -> slice:
        return slice(self.row_offsets[0], self.row_offsets[1])

    @property
    def n_rows(self) -> int:
        return int(self.row_offsets[-1])

    @property
    def n_cols(self) -> int:
        return int(self.col_offsets[-1])

    def row_slice(self, i: int) -> slice:
        return slice(self.row_offsets[i], self.row_offsets[i + 1])

    def col_slice(self, k: int) -> slice:
        return slice(self.col_offsets[k], self.col_offsets[k + 1])

    def split_edges(self, w: np.ndarray) -> List[np.ndarray]:
        return [w[self.col_slice(k)] for k in range(len(self.graph.edges))]

    def join_edges(self, parts: Sequence[np.ndarray]) -> np.ndarray:
        if not parts:
            return np.zeros(0)
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def apply(self, w) -> np.ndarray:
        """``Lambda_alpha w`` as one stacked vector."""
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_cols,):
            raise DimensionError(self.n_cols, w.size, "Lambda")
        return self.Lam @ w

    def objective(self, u, w) -> float:
        """``Psi_u(Lambda_alpha w)``, the quantity minimized over ``w``."""
        v = self.apply(w) if self.n_cols else np.zeros(self.n_rows)
        v = v.copy()
        v[self.root_rows] += u
        return float(sum(f.value(v[self.row_slice(i)]) for i, f in enumerate(self.functionals)))

    def sparsity(self) -> Dict[str, List[int]]:
        """Nonzero column blocks of every node row."""
        out: Dict[str, List[int]] = {}
        for i, nid in enumerate(self.node_order):
            out[nid] = sorted(k for (r, k) in self.blocks if r == i)
        return out


def assemble(g: RegGraph, alpha=None) -> AssembledProblem:
    """Block operator and reduced objective of a weighted graph."""
    check(g, alpha)
    a = resolve_alpha(g, alpha)
    order = g.topological()
    pos = {nid: i for i, nid in enumerate(order)}
    rows = _offsets([g.node(n).space.dim for n in order])
    cols = _offsets([e.space.dim for e in g.edges])
    blocks: Dict[Tuple[int, int], sp.csr_matrix] = {}
    for k, e in enumerate(g.edges):
        blocks[(pos[e.head], k)] = e.theta.to_sparse()
        if a[k] != 0:
            blocks[(pos[e.tail], k)] = -a[k] * e.phi.to_sparse()
    grid = [[None] * len(g.edges) for _ in order]
    for (r, k), m in blocks.items():
        grid[r][k] = m
    if g.edges:
        for r, nid in enumerate(order):
            if all(m is None for m in grid[r]):
                grid[r][0] = sp.csr_matrix((rows[r + 1] - rows[r], cols[1]))
        for k in range(len(g.edges)):
            if all(grid[r][k] is None for r in range(len(order))):
                grid[0][k] = sp.csr_matrix((rows[1], cols[k + 1] - cols[k]))
        Lam = sp.bmat(grid, format="csr")
    else:
        Lam = sp.csr_matrix((int(rows[-1]), 0))
    funcs = [g.node(n).functional for n in order]
    return AssembledProblem(g, a, order, rows, cols, Lam, funcs, blocks)


@dataclass
class PredualProblem:
    """``Lambda_alpha^#`` (one row block per edge), node conjugates and the root term."""

    primal: AssembledProblem
    u: np.ndarray
    LamT: sp.csr_matrix

    def constraint(self, v) -> np.ndarray:
        """``Lambda^# v``; feasibility means this vanishes."""
        return self.LamT @ np.asarray(v, dtype=float)

    def edge_rows(self, v) -> List[np.ndarray]:
        c = self.constraint(v)
        return self.primal.split_edges(c)

    def objective(self, v) -> float:
        """``sum_n Psi_n^*(v_n) - <u, v_root>``."""
        ap = self.primal
        v = np.asarray(v, dtype=float)
        val = sum(f.conjugate(v[ap.row_slice(i)]) for i, f in enumerate(ap.functionals))
        return float(val - self.u @ v[ap.root_rows])

    def value(self, v) -> float:
        """Lower bound ``-objective(v)`` on ``R(u)`` for feasible ``v``."""
        return -self.objective(v)

    def project(self, v) -> Tuple[np.ndarray, bool]:
        """Least-squares projection onto ``ker Lambda^#`` (rows of ``Zero`` nodes pinned to 0)."""
        ap = self.primal
        keep = np.ones(ap.n_rows, dtype=bool)
        for i, f in enumerate(ap.functionals):
            if isinstance(f, Zero):
                keep[ap.row_slice(i)] = False
        out = np.zeros(ap.n_rows)
        sub = ap.Lam[keep]
        p, ok = project_kernel(sub, np.asarray(v, dtype=float)[keep])
        out[keep] = p
        return out, ok

    def feasible_point(self, v) -> Tuple[np.ndarray, float, bool]:
        """Project, then shrink into the conjugate domains; returns (v, scale, cg_ok)."""
        ap = self.primal
        p, ok = self.project(v)
        t = 1.0
        for i, f in enumerate(ap.functionals):
            t = min(t, f.dual_scale(p[ap.row_slice(i)]))
        return t * p, t, ok


def project_kernel(A: sp.spmatrix, y: np.ndarray, z0: Optional[np.ndarray] = None,
                   tol: float = CG_TOL, maxiter: int = CG_MAXITER):
    """Project ``y`` onto ``ker A^T``: ``y - A z`` with ``A^T A z = A^T y`` solved by CG.

    Returns the projection and a convergence flag (and the CG solution when
    ``z0`` is given, for warm starts).
    """
    n = A.shape[1]
    if n == 0:
        return (y.copy(), True) if z0 is None else (y.copy(), True, np.zeros(0))
    At = A.T.tocsr()
    rhs = At @ y
    if not np.any(rhs):
        z = np.zeros(n)
        return (y.copy(), True) if z0 is None else (y.copy(), True, z)
    normal = LinearOperator((n, n), matvec=lambda z: At @ (A @ z), dtype=float)
    if z0 is not None and np.linalg.norm(rhs - normal @ z0) <= tol * np.linalg.norm(rhs):
        return y - A @ z0, True, z0
    with np.errstate(divide="ignore", invalid="ignore"):
        z, info = cg(normal, rhs, x0=z0, rtol=tol, atol=0.0, maxiter=maxiter)
    if not np.all(np.isfinite(z)):
        # breakdown on the singular normal operator; fall back to the warm start
        z = np.zeros(n) if z0 is None else z0.copy()
        info = -1
    ok = info == 0
    if not ok:
        res = np.linalg.norm(normal @ z - rhs)
        ok = res <= 10 * tol * np.linalg.norm(rhs)
    proj = y - A @ z
    return (proj, bool(ok)) if z0 is None else (proj, bool(ok), z)


def assemble_predual(g: RegGraph, alpha, u) -> PredualProblem:
    """``sup { <u, v_root> - sum_n Psi_n^*(v_n) : Lambda^# v = 0 }``."""
    ap = assemble(g, alpha)
    u = np.asarray(u, dtype=float)
    if u.shape != (ap.row_offsets[1],):
        raise DimensionError(int(ap.row_offsets[1]), u.size, "root input")
    return PredualProblem(ap, u, ap.Lam.T.tocsr())


# --- saddle point form --------------------------------------------------------
@dataclass
class SaddleBlock:
    """One dual block: ``<A_j x + b_j, y_j> - F_j^*(y_j)``."""

    name: str
    rows: slice
    functional: NodeFunctional
    offset: np.ndarray

    @property
    def is_constraint(self) -> bool:
        return isinstance(self.functional, (IndicatorZero, IndicatorBall))


@dataclass
class SaddleSpec:
    """``min_x max_y sum_j <A_j x + b_j, y_j> - F_j^*(y_j)`` with ``G = 0``.

    ``x`` stacks ``u`` (first ``n_u`` entries, Tikhonov only) and the edge
    variables.
    """

    A: sp.csr_matrix
    blocks: List[SaddleBlock]
    n_u: int
    assembled: AssembledProblem
    has_data: bool = False

    @property
    def n_primal(self) -> int:
        return self.A.shape[1]

    @property
    def n_dual(self) -> int:
        return self.A.shape[0]

    @property
    def offset(self) -> np.ndarray:
        b = np.zeros(self.n_dual)
        for blk in self.blocks:
            b[blk.rows] = blk.offset
        return b

    def primal_value(self, x) -> float:
        z = self.A @ x + self.offset
        return float(sum(b.functional.value(z[b.rows]) for b in self.blocks))

    def dual_value(self, y) -> float:
        """Dual objective; only meaningful for ``y`` with ``A^T y = 0``."""
        return float(sum(blk.offset @ y[blk.rows] - blk.functional.conjugate(y[blk.rows]) for blk in self.blocks))


def flatten_saddle(ap: AssembledProblem, u=None, data: Optional[Tuple[LinOp, np.ndarray, float]] = None,
                   data_kind: str = "half-squared-L2") -> SaddleSpec:
    """Saddle form for evaluation (``u`` given) or Tikhonov (``data = (K, f, beta)``)."""
    nodes_dim = ap.n_rows
    root_dim = int(ap.row_offsets[1])
    blocks: List[SaddleBlock] = []
    if data is None:
        if u is None:
            raise ValueError("evaluation needs the input u")
        u = np.asarray(u, dtype=float)
        if u.shape != (root_dim,):
            raise DimensionError(root_dim, u.size, "root input")
        A = ap.Lam
        for i, (nid, f) in enumerate(zip(ap.node_order, ap.functionals)):
            off = u.copy() if i == 0 else np.zeros(ap.row_offsets[i + 1] - ap.row_offsets[i])
            blocks.append(SaddleBlock(nid, ap.row_slice(i), f, off))
        return SaddleSpec(A.tocsr(), blocks, 0, ap)
    if data_kind != "half-squared-L2":
        raise ValueError(f"unsupported data term {data_kind!r}")
    K, f, beta = data
    if beta <= 0:
        raise ValueError("beta must be positive")
    if K.domain.dim != root_dim:
        raise DimensionError(root_dim, K.domain.dim, "forward operator domain")
    f = np.asarray(f, dtype=float)
    if f.shape != (K.codomain.dim,):
        raise DimensionError(K.codomain.dim, f.size, "data")
    inject = sp.vstack([sp.identity(root_dim), sp.csr_matrix((nodes_dim - root_dim, root_dim))])
    top = sp.hstack([inject, ap.Lam]) if ap.n_cols else inject
    bottom = sp.hstack([K.to_sparse(), sp.csr_matrix((K.codomain.dim, ap.n_cols))])
    A = sp.vstack([top, bottom]).tocsr()
    for i, (nid, fn) in enumerate(zip(ap.node_order, ap.functionals)):
        blocks.append(SaddleBlock(nid, ap.row_slice(i), fn.scaled(beta),
                                  np.zeros(ap.row_offsets[i + 1] - ap.row_offsets[i])))
    data_space = coeff_seq(K.codomain.dim)
    blocks.append(SaddleBlock("data", slice(nodes_dim, nodes_dim + K.codomain.dim),
                              HalfSquaredL2(data_space, 1.0), -f))
    return SaddleSpec(A, blocks, root_dim, ap, has_data=True)
