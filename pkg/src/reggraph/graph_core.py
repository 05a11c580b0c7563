"""Regularization graphs: structure, weight algebra, hat graphs, invariant subspaces.

A graph is a rooted tree.  Node ``n`` carries a space and a convex
functional; edge ``e = (n, m)`` carries an edge space ``X_e``, a forward
operator ``theta: X_e -> X_m``, a backward operator ``phi: X_e -> X_n`` and
a weight.  Weight vectors are ordered like ``graph.edges``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import count
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla

from .functionals import IndicatorZero, NodeFunctional
from .linalg_spaces import LinOp, Space, analyze, identity, KERNEL_RTOL

__all__ = [
    "Node",
    "Edge",
    "RegGraph",
    "Violation",
    "GraphError",
    "validate",
    "enumerate_root_chains",
    "weight_ratio_constant",
    "chain_constant",
    "gamma_factor",
    "hat_transform",
    "InvariantSubspace",
    "invariant_subspace",
    "infconv_combine",
    "sum_combine",
    "append_graph",
    "subgraph",
    "trivial_graph",
    "isomorphic",
]

RANGE_RTOL = 1e-8


@dataclass(frozen=True)
class Node:
    id: str
    space: Space
    functional: NodeFunctional


@dataclass(frozen=True)
class Edge:
    tail: str
    head: str
    theta: LinOp
    phi: LinOp
    weight: float = 1.0
    learnable: bool = False
    id: str = ""

    @property
    def space(self) -> Space:
        return self.theta.domain


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    where: str = ""

    def __str__(self):
        return f"[{self.code}] {self.where}: {self.message}" if self.where else f"[{self.code}] {self.message}"


class GraphError(ValueError):
    def __init__(self, violations: Sequence[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class RegGraph:
    """Immutable rooted tree of node functionals and edge operator pairs."""

    nodes: Tuple[Node, ...]
    edges: Tuple[Edge, ...]
    root: str
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        fixed = []
        for k, e in enumerate(self.edges):
            fixed.append(e if e.id else replace(e, id=f"e{k + 1}"))
        object.__setattr__(self, "edges", tuple(fixed))

    # --- lookups -----------------------------------------------------------
    def node(self, nid: str) -> Node:
        for n in self.nodes:
            if n.id == nid:
                return n
        raise KeyError(nid)

    @property
    def node_ids(self) -> List[str]:
        return [n.id for n in self.nodes]

    @property
    def alpha(self) -> np.ndarray:
        return np.array([e.weight for e in self.edges], dtype=float)

    @property
    def learnable_mask(self) -> np.ndarray:
        return np.array([e.learnable for e in self.edges], dtype=bool)

    def out_edges(self, nid: str) -> List[int]:
        return [k for k, e in enumerate(self.edges) if e.tail == nid]

    def in_edge(self, nid: str) -> Optional[int]:
        for k, e in enumerate(self.edges):
            if e.head == nid:
                return k
        return None

    def edge_index(self, eid: str) -> int:
        for k, e in enumerate(self.edges):
            if e.id == eid:
                return k
        raise KeyError(eid)

    def topological(self) -> List[str]:
        """Node ids in breadth-first order from the root."""
        order, queue = [], [self.root]
        while queue:
            n = queue.pop(0)
            order.append(n)
            queue.extend(self.edges[k].head for k in self.out_edges(n))
        return order

    def is_leaf(self, nid: str) -> bool:
        return not self.out_edges(nid)

    def with_weights(self, alpha) -> "RegGraph":
        alpha = resolve_alpha(self, alpha)
        edges = tuple(replace(e, weight=float(a)) for e, a in zip(self.edges, alpha))
        return RegGraph(self.nodes, edges, self.root, self.name)

    def summary(self) -> str:
        lines = [f"graph {self.name or '(unnamed)'}: {len(self.nodes)} nodes, {len(self.edges)} edges, root {self.root}"]
        for n in self.nodes:
            lines.append(f"  node {n.id}: {n.functional!r} on dim {n.space.dim}")
        for e in self.edges:
            tag = "learnable" if e.learnable else "trivial"
            lines.append(f"  edge {e.id}: {e.tail} -> {e.head}  theta={e.theta.label} phi={e.phi.label}"
                         f"  weight={e.weight:g} ({tag})")
        return "\n".join(lines)


def resolve_alpha(g: RegGraph, alpha) -> np.ndarray:
    if alpha is None:
        return g.alpha
    a = np.asarray(alpha, dtype=float).ravel()
    if a.size != len(g.edges):
        raise ValueError(f"weight vector has {a.size} entries, graph has {len(g.edges)} edges")
    return a


def trivial_graph(space: Space, functional: NodeFunctional, root: str = "root") -> RegGraph:
    """A single node: ``R(u) = Psi(u)``."""
    return RegGraph((Node(root, space, functional),), (), root, name="trivial")


# --- validation -------------------------------------------------------------
def validate(g: RegGraph, alpha=None) -> List[Violation]:
    """Return every structural violation (an empty list means valid)."""
    out: List[Violation] = []
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        out.append(Violation("duplicate-node", "node ids are not unique"))
    idset = set(ids)
    if g.root not in idset:
        out.append(Violation("missing-root", f"root {g.root!r} is not a node"))
        return out
    for e in g.edges:
        for end in (e.tail, e.head):
            if end not in idset:
                out.append(Violation("dangling-edge", f"endpoint {end!r} is not a node", e.id))
    if out:
        return out
    incoming: Dict[str, int] = {}
    for e in g.edges:
        incoming[e.head] = incoming.get(e.head, 0) + 1
    if incoming.get(g.root):
        out.append(Violation("root-has-parent", "the root has an incoming edge", g.root))
    for nid, c in incoming.items():
        if c > 1:
            out.append(Violation("multiple-parents", f"{c} incoming edges", nid))
    if len(g.edges) != len(g.nodes) - 1:
        out.append(Violation("edge-count", f"|E| = {len(g.edges)} but |V| - 1 = {len(g.nodes) - 1}"))
    # reachability and cycles
    seen, stack = set(), [g.root]
    adj: Dict[str, List[str]] = {}
    for e in g.edges:
        adj.setdefault(e.tail, []).append(e.head)
    cyc = False
    while stack:
        n = stack.pop()
        if n in seen:
            cyc = True
            continue
        seen.add(n)
        stack.extend(adj.get(n, []))
    if cyc:
        out.append(Violation("cycle", "the edge set contains a cycle"))
    unreached = idset - seen
    if unreached:
        out.append(Violation("connectivity", f"nodes not reachable from the root: {sorted(unreached)}"))
    nodes = {n.id: n for n in g.nodes}
    for n in g.nodes:
        if n.functional.domain.dim != n.space.dim:
            out.append(Violation("dimension-mismatch",
                                 f"functional dim {n.functional.domain.dim} != node dim {n.space.dim}", n.id))
    a = resolve_alpha(g, alpha)
    for e, w in zip(g.edges, a):
        if e.theta.domain.dim != e.phi.domain.dim:
            out.append(Violation("dimension-mismatch",
                                 f"theta domain {e.theta.domain.dim} != phi domain {e.phi.domain.dim}", e.id))
        if e.theta.codomain.dim != nodes[e.head].space.dim:
            out.append(Violation("dimension-mismatch",
                                 f"theta codomain {e.theta.codomain.dim} != head dim {nodes[e.head].space.dim}", e.id))
        if e.phi.codomain.dim != nodes[e.tail].space.dim:
            out.append(Violation("dimension-mismatch",
                                 f"phi codomain {e.phi.codomain.dim} != tail dim {nodes[e.tail].space.dim}", e.id))
        if not np.isfinite(w) or w < 0:
            out.append(Violation("negative-weight", f"weight {w} is not a nonnegative number", e.id))
        if not e.learnable and w != 1.0:
            out.append(Violation("trivial-weight", f"trivial weight must be 1, got {w}", e.id))
    return out


def check(g: RegGraph, alpha=None) -> RegGraph:
    v = validate(g, alpha)
    if v:
        raise GraphError(v)
    return g


# --- chains and weight algebra ---------------------------------------------
def enumerate_root_chains(g: RegGraph) -> List[Tuple[int, ...]]:
    """All chains rooted at the root (downward edge paths), plus the empty chain.

    Chains are returned as tuples of edge indices in path order.
    """
    chains: List[Tuple[int, ...]] = [()]

    def grow(nid, path):
        for k in g.out_edges(nid):
            p = path + (k,)
            chains.append(p)
            grow(g.edges[k].head, p)

    grow(g.root, ())
    return chains


def weight_ratio_constant(g: RegGraph, alpha1, alpha2) -> float:
    """``max_F prod_{e in F} alpha2_e / alpha1_e`` over root chains and the empty chain.

    Uses ``0/0 = 0``; requires ``alpha1 >= alpha2`` entrywise.
    """
    a1 = resolve_alpha(g, alpha1)
    a2 = resolve_alpha(g, alpha2)
    if np.any(a1 < a2):
        raise ValueError("weight_ratio_constant needs alpha1 >= alpha2 entrywise")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(a1 > 0, a2 / np.where(a1 > 0, a1, 1.0), 0.0)
    return max(float(np.prod(ratio[list(F)])) if F else 1.0 for F in enumerate_root_chains(g))


def chain_constant(g: RegGraph, alpha=None) -> float:
    """``max_F prod_{e in F} alpha_e`` over root chains and the empty chain."""
    a = resolve_alpha(g, alpha)
    return max(float(np.prod(a[list(F)])) if F else 1.0 for F in enumerate_root_chains(g))


@dataclass(frozen=True)
class GammaFactor:
    value: float
    at_most_one: bool
    chain: Tuple[int, ...]

    def __float__(self):
        return self.value


def gamma_factor(g: RegGraph, alpha_limit, alpha_k) -> GammaFactor:
    """Minimum of ``prod alpha_k / alpha_limit`` over the empty chain and the root
    chains whose limit weights are all positive.  The raw value is returned
    together with a flag telling whether it is at most one.
    """
    lim = resolve_alpha(g, alpha_limit)
    ak = resolve_alpha(g, alpha_k)
    if np.any(ak <= 0):
        raise ValueError("alpha_k must be positive")
    best, arg = 1.0, ()
    for F in enumerate_root_chains(g):
        if not F or np.any(lim[list(F)] <= 0):
            continue
        v = float(np.prod(ak[list(F)] / lim[list(F)]))
        if v < best:
            best, arg = v, F
    return GammaFactor(best, best <= 1.0, arg)


def hat_transform(g: RegGraph, alpha=None) -> Tuple[RegGraph, np.ndarray]:
    """Replace zero weights by one and make the head node of each zero-weight
    edge a splitting node (indicator of zero).
    """
    a = resolve_alpha(g, alpha).copy()
    zero_heads = {g.edges[k].head for k in np.flatnonzero(a == 0)}
    nodes = tuple(
        Node(n.id, n.space, IndicatorZero(n.space)) if (n.id in zero_heads and n.id != g.root) else n
        for n in g.nodes
    )
    a[a == 0] = 1.0
    edges = tuple(replace(e, weight=float(w)) for e, w in zip(g.edges, a))
    return RegGraph(nodes, edges, g.root, name=(g.name + "^") if g.name else ""), a


def subgraph(g: RegGraph, nid: str) -> Tuple[RegGraph, List[int]]:
    """The subtree rooted at ``nid`` and the indices of its edges in ``g``."""
    keep, idx, queue = [], [], [nid]
    while queue:
        n = queue.pop(0)
        keep.append(n)
        for k in g.out_edges(n):
            idx.append(k)
            queue.append(g.edges[k].head)
    idx.sort()
    nodes = tuple(n for n in g.nodes if n.id in keep)
    return RegGraph(nodes, tuple(g.edges[k] for k in idx), nid, name=f"{g.name}/{nid}"), idx


# --- invariant subspace -----------------------------------------------------
@dataclass(frozen=True)
class InvariantSubspace:
    """``basis_L`` spans the invariant subspace at the root.

    ``node_bases[n]`` spans the invariant subspace of the subtree at ``n``;
    ``edge_bases[k]`` spans the edge variables of edge ``k`` whose image
    under ``theta`` lies in the head's invariant subspace, and
    ``projectors[k]`` is a projection onto that set.
    """

    basis_L: np.ndarray
    node_bases: Dict[str, np.ndarray]
    edge_bases: Dict[int, np.ndarray]
    projectors: Dict[int, np.ndarray]

    @property
    def dim(self) -> int:
        return self.basis_L.shape[1]


def _orth(mat: np.ndarray, tol: float = KERNEL_RTOL) -> np.ndarray:
    """Orthonormal basis of the column span, QR with column pivoting."""
    if mat.size == 0 or mat.shape[1] == 0:
        return np.zeros((mat.shape[0], 0))
    q, r, _ = sla.qr(mat, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    if d.size == 0 or d[0] == 0:
        return np.zeros((mat.shape[0], 0))
    rank = int(np.sum(d > tol * d[0]))
    # a second pass guards against pivoted QR overestimating the rank
    q = q[:, :rank]
    s = np.linalg.svd(mat, compute_uv=False)
    srank = int(np.sum(s > tol * s[0]))
    if srank < rank:
        u, _, _ = np.linalg.svd(mat, full_matrices=False)
        q = u[:, :srank]
    return q


def _range_intersection(range_basis: np.ndarray, sub_basis: np.ndarray, tol: float = RANGE_RTOL) -> np.ndarray:
    """Orthonormal basis of ``span(range_basis) ∩ span(sub_basis)`` (both orthonormal)."""
    if sub_basis.shape[1] == 0 or range_basis.shape[1] == 0:
        return np.zeros((sub_basis.shape[0], 0))
    resid = sub_basis - range_basis @ (range_basis.T @ sub_basis)
    _, s, vt = np.linalg.svd(resid, full_matrices=True)
    s_full = np.zeros(sub_basis.shape[1])
    s_full[: s.size] = s
    coeffs = vt[s_full <= tol].T
    return sub_basis @ coeffs


def invariant_subspace(g: RegGraph, alpha=None) -> InvariantSubspace:
    """Bottom-up recursion: leaves get ``{0}``, each edge gets the preimage of
    the head's subspace under ``theta``, and a node's subspace is spanned by
    the ``phi`` images of those preimages over outgoing edges with positive
    weight.
    """
    a = resolve_alpha(g, alpha)
    node_bases: Dict[str, np.ndarray] = {}
    edge_bases: Dict[int, np.ndarray] = {}
    projectors: Dict[int, np.ndarray] = {}
    for nid in reversed(g.topological()):
        space = g.node(nid).space
        cols = []
        for k in g.out_edges(nid):
            e = g.edges[k]
            head_basis = node_bases[e.head]
            an = analyze(e.theta)
            th = e.theta.to_dense()
            reach = _range_intersection(an.range_basis, head_basis)
            pinv = np.linalg.pinv(th, rcond=KERNEL_RTOL)
            lifts = pinv @ reach
            edge_basis = _orth(np.hstack([an.kernel_basis, lifts]))
            edge_bases[k] = edge_basis
            projectors[k] = pinv @ (reach @ reach.T) @ th + an.kernel_projector
            if a[k] > 0 and edge_basis.shape[1]:
                cols.append(e.phi.to_dense() @ edge_basis)
        node_bases[nid] = _orth(np.hstack(cols)) if cols else np.zeros((space.dim, 0))
    return InvariantSubspace(node_bases[g.root], node_bases, edge_bases, projectors)


# --- combination -----------------------------------------------------------
def _prefixed(g: RegGraph, prefix: str) -> Tuple[Tuple[Node, ...], Tuple[Edge, ...]]:
    nodes = tuple(Node(prefix + n.id, n.space, n.functional) for n in g.nodes)
    edges = tuple(replace(e, tail=prefix + e.tail, head=prefix + e.head, id=prefix + e.id) for e in g.edges)
    return nodes, edges


def infconv_combine(g1: RegGraph, g2: RegGraph, alpha_star: float, joint_space: Space,
                    embed1: Optional[LinOp] = None, embed2: Optional[LinOp] = None) -> RegGraph:
    """Infimal-convolution unit: ``R(u) = inf_v R1(u - a v) + R2(v)``."""
    r1, r2 = g1.node(g1.root), g2.node(g2.root)
    embed1 = embed1 or identity(joint_space)
    embed2 = embed2 or identity(joint_space)
    for emb, r in ((embed1, r1), (embed2, r2)):
        if emb.domain.dim != r.space.dim or emb.codomain.dim != joint_space.dim:
            raise ValueError("embedding does not map the root space into the joint space")
    if alpha_star < 0:
        raise ValueError("alpha_star must be nonnegative")
    n1, e1 = _prefixed(g1, "a.")
    n2, e2 = _prefixed(g2, "b.")
    top = (Node("hat", joint_space, IndicatorZero(joint_space)),
           Node("split", joint_space, IndicatorZero(joint_space)))
    link = (
        Edge("hat", "split", identity(joint_space), identity(joint_space), 1.0, False, "c0"),
        Edge("split", "a." + g1.root, identity(r1.space), embed1, 1.0, False, "c1"),
        Edge("split", "b." + g2.root, identity(r2.space), embed2, float(alpha_star), True, "c2"),
    )
    g = RegGraph(top + n1 + n2, link + e1 + e2, "hat", name=f"infconv({g1.name},{g2.name})")
    return check(g)


def sum_combine(g1: RegGraph, g2: RegGraph, alpha_star: float, joint_space: Space,
                embed1: Optional[LinOp] = None, embed2: Optional[LinOp] = None) -> RegGraph:
    """Summation unit: ``R(u) = R1(u) + R2(u / a)``."""
    import scipy.sparse as sps

    from .linalg_spaces import product_space

    if not alpha_star > 0:
        raise ValueError("sum_combine needs alpha_star > 0")
    r1, r2 = g1.node(g1.root), g2.node(g2.root)
    embed1 = embed1 or identity(joint_space)
    embed2 = embed2 or identity(joint_space)
    pair = product_space([joint_space, joint_space])
    m = joint_space.dim
    dup = LinOp(joint_space, pair, sps.vstack([sps.identity(m), sps.identity(m)]).tocsr(), label="dup")
    z1 = sps.csr_matrix((m, r1.space.dim))
    z2 = sps.csr_matrix((m, r2.space.dim))
    left = LinOp(r1.space, pair, sps.vstack([embed1.to_sparse(), z1]).tocsr(), label="(I1,0)")
    right = LinOp(r2.space, pair, sps.vstack([z2, embed2.to_sparse()]).tocsr(), label="(0,I2)")
    n1, e1 = _prefixed(g1, "a.")
    n2, e2 = _prefixed(g2, "b.")
    top = (Node("hat", joint_space, IndicatorZero(joint_space)),
           Node("split", pair, IndicatorZero(pair)))
    link = (
        Edge("hat", "split", dup, identity(joint_space), 1.0, False, "c0"),
        Edge("split", "a." + g1.root, identity(r1.space), left, 1.0, False, "c1"),
        Edge("split", "b." + g2.root, identity(r2.space), right, float(alpha_star), True, "c2"),
    )
    g = RegGraph(top + n1 + n2, link + e1 + e2, "hat", name=f"sum({g1.name},{g2.name})")
    return check(g)


def append_graph(g: RegGraph, leaf_id: str, g2: RegGraph, theta: LinOp, phi: LinOp,
                 weight: float = 1.0, learnable: bool = True) -> RegGraph:
    """Graft ``g2`` below the leaf ``leaf_id`` through a new edge."""
    if leaf_id not in g.node_ids:
        raise KeyError(leaf_id)
    if not g.is_leaf(leaf_id):
        raise ValueError(f"node {leaf_id!r} is not a leaf")
    used = set(g.node_ids)
    prefix = next(p for p in (f"g{i}." for i in count(2)) if not any(p + n in used for n in g2.node_ids))
    n2, e2 = _prefixed(g2, prefix)
    link = Edge(leaf_id, prefix + g2.root, theta, phi, float(weight), learnable, prefix + "link")
    out = RegGraph(g.nodes + n2, g.edges + (link,) + e2, g.root, name=f"{g.name}+{g2.name}")
    return check(out)


# --- structural comparison ---------------------------------------------------
def _same_operator(a: LinOp, b: LinOp, tol: float) -> bool:
    if a.shape != b.shape:
        return False
    diff = a.to_sparse() - b.to_sparse()
    return diff.nnz == 0 or float(abs(diff).max()) <= tol


def isomorphic(g1: RegGraph, g2: RegGraph, tol: float = 1e-12) -> bool:
    """True when the graphs agree up to node and edge names.

    Node functionals and spaces, operators (entrywise within ``tol``), weights
    and learnable tags must match along a bijection of the trees.
    """
    if len(g1.nodes) != len(g2.nodes) or len(g1.edges) != len(g2.edges):
        return False

    def match(n1: str, n2: str) -> bool:
        a, b = g1.node(n1), g2.node(n2)
        if a.space != b.space or a.functional != b.functional:
            return False
        out1, out2 = g1.out_edges(n1), g2.out_edges(n2)
        if len(out1) != len(out2):
            return False
        return assign(list(out1), list(out2))

    def assign(left: List[int], right: List[int]) -> bool:
        if not left:
            return True
        e1 = g1.edges[left[0]]
        for j, k in enumerate(right):
            e2 = g2.edges[k]
            if (e1.weight == e2.weight and e1.learnable == e2.learnable
                    and _same_operator(e1.theta, e2.theta, tol) and _same_operator(e1.phi, e2.phi, tol)
                    and match(e1.head, e2.head) and assign(left[1:], right[:j] + right[j + 1:])):
                return True
        return False

    return match(g1.root, g2.root)
