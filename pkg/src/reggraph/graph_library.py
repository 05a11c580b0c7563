"""Operators on grids and the catalogue of named regularization graphs.

Differences are forward differences without padding: a partial derivative
along an axis shortens that axis by one.  In one dimension the gradient of
``n`` samples has ``n - 1`` entries.  Symmetric tensor fields store one
channel per multiset of axes, scaled by the square root of the number of
index permutations, so the Euclidean norm equals the Frobenius norm.
"""

from __future__ import annotations

from itertools import combinations_with_replacement
from math import factorial, prod, sqrt
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy import fft as sfft
from scipy import ndimage

from .functionals import (
    CompositeFG,
    GroupL1,
    GroupL1Aniso,
    HalfSquaredL2,
    IndicatorBall,
    IndicatorZero,
    LqNorm,
    NodeFunctional,
    functional_from_dict,
)
from .graph_core import Edge, Node, RegGraph, check
from .linalg_spaces import (
    LinOp,
    Space,
    analyze,
    coeff_seq,
    identity,
    product_space,
    scalar_field,
    sym_tensor_field,
    vector_field,
)

__all__ = [
    "diff_matrix",
    "grad",
    "symgrad",
    "grad_k",
    "jacobian",
    "haar",
    "dct",
    "conv",
    "gaussian_kernel",
    "mask",
    "embed",
    "duplicate",
    "block_select",
    "pointwise_matrix",
    "make_operator",
    "make_graph",
    "GRAPH_NAMES",
]


# --- finite differences -----------------------------------------------------
def diff_matrix(n: int) -> sp.csr_matrix:
    """Forward differences ``(n-1) x n``: rows ``[-1, 1]``."""
    if n < 2:
        raise ValueError("need at least two samples for a difference")
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr")


def _partial(shape: Sequence[int], axis: int) -> sp.csr_matrix:
    """Difference along ``axis`` of a C-ordered array of ``shape``."""
    mats = [sp.identity(s, format="csr") for s in shape]
    mats[axis] = diff_matrix(shape[axis])
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


def _crop(shape: Sequence[int], target: Sequence[int]) -> sp.csr_matrix:
    """Restriction of a C-ordered array of ``shape`` to its leading ``target`` block."""
    mats = [sp.identity(s, format="csr")[:t] for s, t in zip(shape, target)]
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


def _block_offsets(space: Space) -> np.ndarray:
    return np.concatenate([[0], np.cumsum([prod(s) for s in space.channel_shapes])]).astype(int)


def grad(space: Space) -> LinOp:
    """Gradient of a scalar field; channel ``a`` loses one sample along axis ``a``."""
    if space.kind != "scalar":
        raise ValueError("grad expects a scalar field")
    shp = space.channel_shapes[0]
    blocks, shapes = [], []
    for a in range(space.ndim):
        blocks.append(_partial(shp, a))
        s = list(shp)
        s[a] -= 1
        shapes.append(tuple(s))
    out = vector_field(space.grid, shapes)
    return LinOp(space, out, sp.vstack(blocks, format="csr"), label="grad")


def _multisets(d: int, order: int) -> List[Tuple[int, ...]]:
    return list(combinations_with_replacement(range(d), order))


def _perm_count(ms: Tuple[int, ...]) -> int:
    c = Counter(ms)
    return factorial(len(ms)) // prod(factorial(v) for v in c.values())


def _as_sym(space: Space) -> Tuple[int, List[Tuple[int, ...]]]:
    """Tensor order and channel multisets of a field viewed as symmetric tensor."""
    d = space.ndim
    if space.kind == "scalar":
        return 0, [()]
    if space.kind == "vector" and space.channels == d:
        return 1, [(i,) for i in range(d)]
    if space.kind == "sym":
        return space.order, _multisets(d, space.order)
    raise ValueError("symgrad expects a scalar, a d-channel vector field or a symmetric tensor field")


def symgrad(space: Space) -> LinOp:
    """Symmetrized gradient from order-``l`` to order-``l+1`` symmetric tensor fields."""
    order, chans = _as_sym(space)
    if order == 0:
        return grad(space)
    d = space.ndim
    new = _multisets(d, order + 1)
    offs = _block_offsets(space)
    pos = {m: k for k, m in enumerate(chans)}
    rows, shapes = [], []
    for M in new:
        terms = []
        for a in sorted(set(M)):
            rest = list(M)
            rest.remove(a)
            rest = tuple(rest)
            k = pos[rest]
            shp = space.channel_shapes[k]
            s = list(shp)
            s[a] -= 1
            mult = M.count(a)
            terms.append((k, a, shp, tuple(s), mult / (order + 1) * sqrt(_perm_count(M)) / sqrt(_perm_count(rest))))
        common = tuple(min(t[3][ax] for t in terms) for ax in range(d))
        if min(common) <= 0:
            raise ValueError("grid too small for this symmetrized gradient")
        row = [None] * len(chans)
        for k, a, shp, s, coef in terms:
            blk = coef * (_crop(s, common) @ _partial(shp, a))
            row[k] = blk if row[k] is None else row[k] + blk
        for k in range(len(chans)):
            if row[k] is None:
                row[k] = sp.csr_matrix((prod(common), prod(space.channel_shapes[k])))
        rows.append(row)
        shapes.append(common)
    out = sym_tensor_field(space.grid, shapes, order + 1)
    return LinOp(space, out, sp.bmat(rows, format="csr"), label="symgrad")


def grad_k(space: Space, k: int) -> LinOp:
    """``k``-th derivative as a symmetric tensor field (``symgrad^(k-1) . grad``)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    op = grad(space)
    for _ in range(k - 1):
        op = symgrad(op.codomain).compose(op)
    op.label = f"grad^{k}"
    return op


def jacobian(space: Space) -> LinOp:
    """All partials of every channel, cropped to a common shape (``c * d`` channels)."""
    d = space.ndim
    shapes = space.channel_shapes
    common = tuple(min(s[ax] for s in shapes) - 1 for ax in range(d))
    if min(common) <= 0:
        raise ValueError("grid too small for a Jacobian")
    offs = _block_offsets(space)
    rows = []
    for k, shp in enumerate(shapes):
        for a in range(d):
            s = list(shp)
            s[a] -= 1
            row = [None] * len(shapes)
            row[k] = _crop(tuple(s), common) @ _partial(shp, a)
            for j in range(len(shapes)):
                if row[j] is None:
                    row[j] = sp.csr_matrix((prod(common), prod(shapes[j])))
            rows.append(row)
    out = vector_field(space.grid, [common] * (len(shapes) * d))
    return LinOp(space, out, sp.bmat(rows, format="csr"), label="jacobian")


def pointwise_matrix(space: Space, mat) -> LinOp:
    """Apply an ``m x c`` matrix across the ``c`` channels at every point (equal channel shapes)."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    shapes = set(space.channel_shapes)
    if len(shapes) != 1:
        raise ValueError("pointwise matrices need equally shaped channels")
    if mat.shape[1] != space.channels:
        raise ValueError(f"matrix has {mat.shape[1]} columns, field has {space.channels} channels")
    shp = next(iter(shapes))
    big = sp.kron(sp.csr_matrix(mat), sp.identity(prod(shp)), format="csr")
    out = vector_field(space.grid, [shp] * mat.shape[0])
    return LinOp(space, out, big, label="pointwise")


# --- transforms -------------------------------------------------------------
def _haar_matrix(n: int) -> np.ndarray:
    if n < 1 or n & (n - 1):
        raise ValueError(f"haar needs a power of two, got {n}")
    h = np.array([[1.0]])
    while h.shape[0] < n:
        m = h.shape[0]
        top = np.kron(h, [1.0, 1.0]) / sqrt(2.0)
        bot = np.kron(np.eye(m), [1.0, -1.0]) / sqrt(2.0)
        h = np.vstack([top, bot])
    return h


def _separable(space: Space, mats: Sequence[np.ndarray]) -> np.ndarray:
    out = mats[0]
    for m in mats[1:]:
        out = np.kron(out, m)
    return out


def haar(space: Space) -> LinOp:
    """Orthonormal multilevel Haar analysis (separable on grids)."""
    if space.kind != "scalar":
        raise ValueError("haar expects a scalar field")
    mat = _separable(space, [_haar_matrix(n) for n in space.grid])
    return LinOp(space, coeff_seq(space.dim), mat, label="haar")


def dct(space: Space) -> LinOp:
    """Orthonormal DCT-II (separable on grids)."""
    if space.kind != "scalar":
        raise ValueError("dct expects a scalar field")
    mats = [sfft.dct(np.eye(n), axis=0, norm="ortho") for n in space.grid]
    return LinOp(space, coeff_seq(space.dim), _separable(space, mats), label="dct")


def gaussian_kernel(sigma: float, radius: Optional[int] = None) -> np.ndarray:
    """Normalized 1-D Gaussian kernel on ``[-radius, radius]`` (default radius ``ceil(3 sigma)``)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    r = int(np.ceil(3 * sigma)) if radius is None else int(radius)
    t = np.arange(-r, r + 1, dtype=float)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def conv(space: Space, kernel) -> LinOp:
    """Convolution with symmetric (mirror) boundary handling, materialized as a matrix."""
    kernel = np.asarray(kernel, dtype=float)
    if space.kind != "scalar":
        raise ValueError("conv expects a scalar field")
    if kernel.ndim != space.ndim:
        raise ValueError("kernel rank must match the grid rank")
    n = space.dim
    cols = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        cols[:, j] = ndimage.convolve(e.reshape(space.grid), kernel, mode="reflect").ravel()
        e[j] = 0.0
    return LinOp(space, space, sp.csr_matrix(cols), label="conv")


def mask(space: Space, keep) -> LinOp:
    """Restriction to the entries where ``keep`` is true; the adjoint zero-fills."""
    keep = np.asarray(keep)
    if keep.dtype != bool:
        idx = keep.astype(int).ravel()
        keep = np.zeros(space.dim, dtype=bool)
        keep[idx] = True
    keep = keep.ravel()
    if keep.size != space.dim:
        raise ValueError(f"mask has {keep.size} entries, space has {space.dim}")
    if not keep.any():
        raise ValueError("mask keeps nothing")
    mat = sp.identity(space.dim, format="csr")[np.flatnonzero(keep)]
    return LinOp(space, coeff_seq(int(keep.sum())), mat, label="mask")


def embed(domain: Space, codomain: Space) -> LinOp:
    """Identity between two spaces of equal dimension (finite-dimensional embedding)."""
    if domain.dim != codomain.dim:
        raise ValueError("embedding needs equal dimensions")
    return LinOp(domain, codomain, sp.identity(domain.dim, format="csr"), label="embed")


def duplicate(space: Space) -> LinOp:
    pair = product_space([space, space])
    m = space.dim
    return LinOp(space, pair, sp.vstack([sp.identity(m), sp.identity(m)], format="csr"), label="dup")


def block_select(space: Space, index: int) -> LinOp:
    """Projection of a product space onto one factor."""
    if space.kind != "product":
        raise ValueError("block_select needs a product space")
    sizes = space.block_sizes()
    start = sum(sizes[:index])
    mat = sp.identity(space.dim, format="csr")[start:start + sizes[index]]
    return LinOp(space, space.components[index], mat, label=f"select{index}")


def _stack(ops: Sequence[LinOp]) -> LinOp:
    out = product_space([o.codomain for o in ops])
    return LinOp(ops[0].domain, out, sp.vstack([o.to_sparse() for o in ops], format="csr"),
                 label="(" + ",".join(o.label for o in ops) + ")")


def make_operator(spec: dict, space: Optional[Space] = None) -> LinOp:
    """Build an operator from ``{"kind": ..., "shape": [...], ...}``.

    ``space`` overrides ``shape`` and is required for operators acting on
    non-scalar fields.
    """
    kind = spec["kind"]
    if space is None:
        space = scalar_field(spec["shape"])
    if spec.get("boundary", "neumann") != "neumann":
        raise ValueError("only the neumann boundary rule is supported")
    if kind == "grad":
        return grad(space)
    if kind == "symgrad":
        return symgrad(space)
    if kind == "grad_k":
        return grad_k(space, int(spec["k"]))
    if kind == "identity":
        return identity(space, spec.get("scale", 1.0))
    if kind == "embed":
        return embed(space, spec.get("codomain", space))
    if kind == "haar":
        return haar(space)
    if kind == "dct":
        return dct(space)
    if kind == "conv":
        return conv(space, spec["kernel"])
    if kind == "duplicate":
        return duplicate(space)
    if kind == "block-select":
        return block_select(space, int(spec["index"]))
    if kind == "mask":
        return mask(space, spec["keep"])
    raise ValueError(f"unknown operator kind {kind!r}")


# --- graphs -----------------------------------------------------------------
def _frame(space: Space, name: str) -> LinOp:
    if name == "haar":
        return haar(space)
    if name == "dct":
        return dct(space)
    if name == "identity":
        return LinOp(space, coeff_seq(space.dim), sp.identity(space.dim, format="csr"), label="id")
    raise ValueError(f"unknown frame {name!r}")


def _edge(tail, head, theta, phi, weight=1.0, learnable=False, eid=""):
    return Edge(tail, head, theta, phi, float(weight), learnable, eid)


def _split_unit(u: Space, first: Tuple[LinOp, LinOp], second_head: Tuple[str, NodeFunctional, Space],
                second_ops: Tuple[LinOp, LinOp], alpha: float, learnable: bool = True):
    """Root -(grad, I)-> split -(Id, Id)-> GroupL1 and split -(ops, alpha)-> second head."""
    g_op = grad(u)
    v = g_op.codomain
    nodes = [
        Node("root", u, IndicatorZero(u)),
        Node("split", v, IndicatorZero(v)),
        Node("l1", v, GroupL1(v)),
        Node(second_head[0], second_head[2], second_head[1]),
    ]
    edges = [
        _edge("root", "split", g_op, identity(u), eid="e1"),
        _edge("split", "l1", identity(v), identity(v), eid="e2"),
        _edge("split", second_head[0], second_ops[0], second_ops[1], alpha, learnable, "e3"),
    ]
    return nodes, edges


def _tv(u: Space, p: dict):
    g_op = grad(u)
    v = g_op.codomain
    nodes = [Node("root", u, IndicatorZero(u)), Node("l1", v, GroupL1(v, p.get("weight", 1.0)))]
    edges = [_edge("root", "l1", g_op, identity(u), eid="e1")]
    return nodes, edges


def _tvk_infconv(u: Space, p: dict):
    k1, k2, alpha = int(p.get("k1", 1)), int(p.get("k2", 2)), float(p.get("alpha", 1.0))
    t1, t2 = grad_k(u, k1), grad_k(u, k2)
    nodes = [
        Node("root", u, IndicatorZero(u)),
        Node("tv1", t1.codomain, GroupL1(t1.codomain)),
        Node("tv2", t2.codomain, GroupL1(t2.codomain)),
    ]
    edges = [
        _edge("root", "tv1", t1, identity(u), eid="e1"),
        _edge("root", "tv2", t2, identity(u), alpha, True, "e2"),
    ]
    return nodes, edges


def _tgv(u: Space, p: dict):
    k = int(p.get("k", 2))
    weights = p.get("weights", p.get("alpha", [1.0] * (k - 1)))
    weights = [float(w) for w in np.atleast_1d(weights)]
    if k < 1:
        raise ValueError("tgv order must be at least 1")
    if len(weights) != k - 1:
        raise ValueError(f"tgv of order {k} needs {k - 1} weights")
    if k == 1:
        return _tv(u, {})
    g_op = grad(u)
    v = g_op.codomain
    nodes = [Node("root", u, IndicatorZero(u)), Node("s1", v, IndicatorZero(v))]
    edges = [_edge("root", "s1", g_op, identity(u))]
    cur = v
    for j in range(1, k):
        nodes.append(Node(f"l{j}", cur, GroupL1(cur)))
        edges.append(_edge(f"s{j}", f"l{j}", identity(cur), identity(cur)))
        e_op = symgrad(cur)
        nxt = e_op.codomain
        head = f"s{j + 1}" if j < k - 1 else f"l{k}"
        fn = IndicatorZero(nxt) if j < k - 1 else GroupL1(nxt)
        nodes.append(Node(head, nxt, fn))
        edges.append(_edge(f"s{j}", head, e_op, identity(cur), weights[j - 1], True))
        cur = nxt
    return nodes, edges


def _tgv_frame_infconv(u: Space, p: dict):
    a0, a1 = float(p.get("alpha0", 1.0)), float(p.get("alpha1", 1.0))
    W = _frame(u, p.get("frame", "haar"))
    g_op = grad(u)
    v = g_op.codomain
    e_op = symgrad(v)
    c = W.codomain
    nodes = [
        Node("root", u, IndicatorZero(u)),
        Node("split", v, IndicatorZero(v)),
        Node("l1", v, GroupL1(v)),
        Node("l2", e_op.codomain, GroupL1(e_op.codomain)),
        Node("frame", c, GroupL1(c)),
    ]
    edges = [
        _edge("root", "split", g_op, identity(u), eid="e1"),
        _edge("split", "l1", identity(v), identity(v), eid="e2"),
        _edge("split", "l2", e_op, identity(v), a1, True, "alpha1"),
        _edge("root", "frame", W, identity(u), a0, True, "alpha0"),
    ]
    return nodes, edges


def _tv_lq(u: Space, p: dict):
    q, alpha = float(p.get("q", 2.0)), float(p.get("alpha", 1.0))
    v = grad(u).codomain
    return _split_unit(u, None, ("lq", LqNorm(v, q), v), (identity(v), identity(v)), alpha)


def _spatiotemporal(u: Space, p: dict):
    b1, b2, alpha = p.get("beta1", 1.0), p.get("beta2", 1.0), float(p.get("alpha", 1.0))
    g1, g2 = grad(u), grad(u)
    v = g1.codomain
    nodes = [
        Node("root", u, IndicatorZero(u)),
        Node("st1", v, GroupL1Aniso(v, b1)),
        Node("st2", v, GroupL1Aniso(v, b2)),
    ]
    edges = [
        _edge("root", "st1", g1, identity(u), eid="e1"),
        _edge("root", "st2", g2, identity(u), alpha, True, "e2"),
    ]
    return nodes, edges


def _sum_fg(u: Space, p: dict):
    both = _stack([grad(u), grad_k(u, 2)])
    prod_space = both.codomain
    fdesc = p.get("f", {"kind": "GroupL1", "weight": 1.0})
    gdesc = p.get("g", {"kind": "GroupL1", "weight": 1.0})
    f = functional_from_dict(fdesc, prod_space.components[0], "params.f")
    g = functional_from_dict(gdesc, prod_space.components[1], "params.g")
    nodes = [Node("root", u, IndicatorZero(u)), Node("fg", prod_space, CompositeFG(prod_space, f, g))]
    edges = [_edge("root", "fg", both, identity(u), eid="e1")]
    return nodes, edges


def _second_order_general(u: Space, p: dict):
    alpha = float(p.get("alpha", 1.0))
    v = grad(u).codomain
    J = jacobian(v)
    Amat = p.get("A")
    Amat = np.eye(J.codomain.channels) if Amat is None else np.atleast_2d(np.asarray(Amat, dtype=float))
    op = pointwise_matrix(J.codomain, Amat).compose(J)
    op.label = "A.jacobian"
    info = analyze(op)
    if info.rank == 0:
        raise ValueError("the operator A.grad vanishes; the model would not be coercive")
    head = op.codomain
    return _split_unit(u, None, ("a2", GroupL1(head), head), (op, identity(v)), alpha)


def _tight_frames(u: Space, p: dict):
    alpha = float(p.get("alpha", 1.0))
    W1 = _frame(u, p.get("frame1", "haar"))
    W2 = _frame(u, p.get("frame2", "dct"))
    nodes = [
        Node("root", u, IndicatorZero(u)),
        Node("c1", W1.codomain, GroupL1(W1.codomain)),
        Node("c2", W2.codomain, GroupL1(W2.codomain)),
    ]
    edges = [
        _edge("root", "c1", W1, identity(u), eid="e1"),
        _edge("root", "c2", W2, identity(u), alpha, True, "e2"),
    ]
    return nodes, edges


def _tv_pwl(u: Space, p: dict):
    gamma, alpha = p.get("gamma", 1.0), float(p.get("alpha", 1.0))
    v = grad(u).codomain
    return _split_unit(u, None, ("ball", IndicatorBall(v, gamma), v), (identity(v), identity(v)), alpha)


_BUILDERS = {
    "tv": _tv,
    "tvk_infconv": _tvk_infconv,
    "tgv": _tgv,
    "tgv_frame_infconv": _tgv_frame_infconv,
    "tv_lq": _tv_lq,
    "spatiotemporal": _spatiotemporal,
    "sum_fg": _sum_fg,
    "second_order_general": _second_order_general,
    "tight_frames": _tight_frames,
    "tv_pwl": _tv_pwl,
}

GRAPH_NAMES = tuple(_BUILDERS)

GRAPH_PARAMS = {
    "tv": {"weight"},
    "tvk_infconv": {"k1", "k2", "alpha"},
    "tgv": {"k", "weights", "alpha"},
    "tgv_frame_infconv": {"alpha0", "alpha1", "frame"},
    "tv_lq": {"q", "alpha"},
    "spatiotemporal": {"beta1", "beta2", "alpha"},
    "sum_fg": {"f", "g"},
    "second_order_general": {"A", "alpha"},
    "tight_frames": {"frame1", "frame2", "alpha"},
    "tv_pwl": {"gamma", "alpha"},
}


def make_graph(name: str, shape: Sequence[int], **params) -> Tuple[RegGraph, np.ndarray]:
    """Build a named graph on a scalar field of the given grid shape.

    Returns the validated graph and its weight vector.
    """
    if name not in _BUILDERS:
        raise ValueError(f"unknown graph {name!r}; choose from {', '.join(GRAPH_NAMES)}")
    extra = set(params) - GRAPH_PARAMS[name]
    if extra:
        raise ValueError(f"unknown parameter(s) for {name}: {sorted(extra)}")
    u = scalar_field(shape)
    nodes, edges = _BUILDERS[name](u, params)
    g = check(RegGraph(tuple(nodes), tuple(edges), "root", name=name))
    return g, g.alpha
