"""Finite-dimensional spaces, linear operators with adjoints, spectral analysis.

Every space carries a Euclidean inner product.  Fields on a grid are stored
channel by channel, each channel flattened in C order.  A channel may live on
a grid that is shorter than the anchor grid along some axes (forward
differences drop the last sample along their axis); every stored entry is
attached to the anchor-grid point with the same multi-index, which is what
pointwise functionals group on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, prod
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DimensionError",
    "Space",
    "scalar_field",
    "vector_field",
    "sym_tensor_field",
    "coeff_seq",
    "product_space",
    "LinOp",
    "OperatorAnalysis",
    "apply",
    "adjoint_apply",
    "analyze",
    "operator_norm",
    "adjoint_mismatch",
    "identity",
    "zero_op",
    "from_matrix",
    "matrix_free",
    "MAX_DENSE_DIM",
    "KERNEL_RTOL",
]

MAX_DENSE_DIM = 4096
KERNEL_RTOL = 1e-10

KINDS = ("scalar", "vector", "sym", "coeff", "product")


class DimensionError(ValueError):
    """Raised when an array does not match the dimension of a space."""

    def __init__(self, expected: int, got: int, where: str = ""):
        self.expected = expected
        self.got = got
        self.where = where
        msg = f"dimension mismatch{' in ' + where if where else ''}: expected {expected}, got {got}"
        super().__init__(msg)


@dataclass(frozen=True)
class Space:
    """A finite-dimensional real space.

    Parameters
    ----------
    kind : str
        One of ``scalar``, ``vector``, ``sym``, ``coeff`` or ``product``.
    grid : tuple of int
        Anchor grid dimensions (for ``coeff`` the sequence length).
    channel_shapes : tuple of tuple of int
        Storage shape of every channel.  Empty for product spaces.
    order : int
        Tensor order for ``sym`` spaces, 0 otherwise.
    components : tuple of Space
        Factors of a product space.
    name : str
        Free-form label; ignored by equality.
    """

    kind: str
    grid: tuple
    channel_shapes: tuple = ()
    order: int = 0
    components: tuple = ()
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown space kind {self.kind!r}")
        if self.kind == "product":
            if not self.components:
                raise ValueError("product space needs at least one component")
        else:
            if not self.channel_shapes:
                raise ValueError("field space needs at least one channel")
            for shp in self.channel_shapes:
                if len(shp) != len(self.grid):
                    raise ValueError("channel shape rank differs from grid rank")
                if any(s <= 0 or s > g for s, g in zip(shp, self.grid)):
                    raise ValueError(f"channel shape {shp} does not fit grid {self.grid}")
        if self.kind == "sym":
            d = len(self.grid)
            if len(self.channel_shapes) != comb(d + self.order - 1, self.order):
                raise ValueError("sym-tensor channel count does not match order and dimension")
        if self.dim <= 0:
            raise ValueError("space dimension must be positive")

    @property
    def dim(self) -> int:
        if self.kind == "product":
            return sum(c.dim for c in self.components)
        return sum(prod(s) for s in self.channel_shapes)

    @property
    def channels(self) -> int:
        if self.kind == "product":
            return sum(c.channels for c in self.components)
        return len(self.channel_shapes)

    @property
    def ndim(self) -> int:
        return len(self.grid)

    def block_sizes(self) -> list:
        """Dimensions of the product factors (a single block otherwise)."""
        if self.kind == "product":
            return [c.dim for c in self.components]
        return [self.dim]

    def group_index(self) -> np.ndarray:
        """Map every stored entry to its anchor-grid point.

        Product factors get disjoint group ranges.
        """
        return _group_index(self)

    def channel_index(self) -> np.ndarray:
        """Channel number of every stored entry (product factors concatenated)."""
        return _channel_index(self)

    @property
    def n_groups(self) -> int:
        if self.kind == "product":
            return sum(c.n_groups for c in self.components)
        return prod(self.grid)

    def describe(self) -> dict:
        if self.kind == "product":
            return {"kind": "product", "components": [c.describe() for c in self.components]}
        return {
            "kind": self.kind,
            "grid": list(self.grid),
            "channel_shapes": [list(s) for s in self.channel_shapes],
            "order": self.order,
        }

    @classmethod
    def from_description(cls, desc: dict) -> "Space":
        if desc["kind"] == "product":
            return product_space([cls.from_description(c) for c in desc["components"]])
        return cls(
            kind=desc["kind"],
            grid=tuple(desc["grid"]),
            channel_shapes=tuple(tuple(s) for s in desc["channel_shapes"]),
            order=int(desc.get("order", 0)),
        )


def _group_index(space: Space) -> np.ndarray:
    if space.kind == "product":
        parts, off = [], 0
        for c in space.components:
            parts.append(_group_index(c) + off)
            off += c.n_groups
        return np.concatenate(parts)
    parts = []
    for shp in space.channel_shapes:
        idx = np.indices(shp).reshape(len(shp), -1)
        parts.append(np.ravel_multi_index(idx, space.grid))
    return np.concatenate(parts).astype(np.int64)


def _channel_index(space: Space) -> np.ndarray:
    if space.kind == "product":
        parts, off = [], 0
        for c in space.components:
            parts.append(_channel_index(c) + off)
            off += c.channels
        return np.concatenate(parts)
    return np.concatenate(
        [np.full(prod(s), k, dtype=np.int64) for k, s in enumerate(space.channel_shapes)]
    )


def scalar_field(grid: Sequence[int], name: str = "") -> Space:
    grid = tuple(int(g) for g in grid)
    return Space("scalar", grid, (grid,), name=name)


def vector_field(grid: Sequence[int], channel_shapes: Sequence[Sequence[int]], name: str = "") -> Space:
    return Space("vector", tuple(grid), tuple(tuple(s) for s in channel_shapes), name=name)


def sym_tensor_field(grid, channel_shapes, order: int, name: str = "") -> Space:
    return Space("sym", tuple(grid), tuple(tuple(s) for s in channel_shapes), order=order, name=name)


def coeff_seq(m: int, name: str = "") -> Space:
    return Space("coeff", (int(m),), ((int(m),),), name=name)


def product_space(components: Sequence[Space], name: str = "") -> Space:
    return Space("product", (), (), components=tuple(components), name=name)


class LinOp:
    """A linear map between two spaces.

    The realization is either a matrix (dense ``ndarray`` or ``scipy.sparse``)
    or a pair of callables for the forward and adjoint action.
    """

    def __init__(
        self,
        domain: Space,
        codomain: Space,
        matrix=None,
        forward: Optional[Callable] = None,
        adjoint: Optional[Callable] = None,
        label: str = "",
    ):
        self.domain = domain
        self.codomain = codomain
        self.label = label
        self._norm = None
        if matrix is not None:
            if matrix.shape != (codomain.dim, domain.dim):
                raise DimensionError(codomain.dim * domain.dim, matrix.shape[0] * matrix.shape[1],
                                     f"matrix of {label or 'operator'} {matrix.shape}")
            self._mat = sp.csr_matrix(matrix) if sp.issparse(matrix) else np.asarray(matrix, dtype=float)
            self._fwd = None
            self._adj = None
        else:
            if forward is None or adjoint is None:
                raise ValueError("matrix-free operator needs forward and adjoint callables")
            self._mat = None
            self._fwd = forward
            self._adj = adjoint

    @property
    def shape(self) -> tuple:
        return (self.codomain.dim, self.domain.dim)

    @property
    def is_matrix(self) -> bool:
        return self._mat is not None

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.domain.dim:
            raise DimensionError(self.domain.dim, x.shape[0], f"apply({self.label})")
        if self._mat is not None:
            return np.asarray(self._mat @ x)
        return np.asarray(self._fwd(x), dtype=float)

    def adjoint_apply(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.codomain.dim:
            raise DimensionError(self.codomain.dim, y.shape[0], f"adjoint_apply({self.label})")
        if self._mat is not None:
            return np.asarray(self._mat.T @ y)
        return np.asarray(self._adj(y), dtype=float)

    __matmul__ = apply

    def to_sparse(self) -> sp.csr_matrix:
        """Sparse matrix of the operator (matrix-free ones are probed column by column)."""
        if self._mat is not None:
            return sp.csr_matrix(self._mat)
        return sp.csr_matrix(self.apply(np.eye(self.domain.dim)))

    def to_dense(self) -> np.ndarray:
        if max(self.shape) > MAX_DENSE_DIM:
            raise ValueError(f"refusing to materialize a {self.shape} operator densely")
        if self._mat is not None:
            return self._mat.toarray() if sp.issparse(self._mat) else np.array(self._mat)
        return self.apply(np.eye(self.domain.dim))

    @property
    def T(self) -> "LinOp":
        if self._mat is not None:
            return LinOp(self.codomain, self.domain, self._mat.T, label=f"{self.label}^T")
        return LinOp(self.codomain, self.domain, forward=self._adj, adjoint=self._fwd, label=f"{self.label}^T")

    def scaled(self, c: float) -> "LinOp":
        c = float(c)
        if self._mat is not None:
            return LinOp(self.domain, self.codomain, self._mat * c, label=f"{c:g}*{self.label}")
        f, a = self._fwd, self._adj
        return LinOp(self.domain, self.codomain, forward=lambda x: c * f(x), adjoint=lambda y: c * a(y),
                     label=f"{c:g}*{self.label}")

    def compose(self, inner: "LinOp") -> "LinOp":
        """Return ``self ∘ inner``."""
        if inner.codomain.dim != self.domain.dim:
            raise DimensionError(self.domain.dim, inner.codomain.dim, "compose")
        label = f"{self.label}.{inner.label}"
        if self._mat is not None and inner._mat is not None:
            return LinOp(inner.domain, self.codomain, _matmul(self._mat, inner._mat), label=label)
        return LinOp(inner.domain, self.codomain,
                     forward=lambda x: self.apply(inner.apply(x)),
                     adjoint=lambda y: inner.adjoint_apply(self.adjoint_apply(y)), label=label)

    def __repr__(self) -> str:
        return f"LinOp({self.label or '?'}: {self.domain.dim} -> {self.codomain.dim})"


def _matmul(a, b):
    if sp.issparse(a) or sp.issparse(b):
        return sp.csr_matrix(sp.csr_matrix(a) @ sp.csr_matrix(b))
    return a @ b


def from_matrix(mat, domain: Optional[Space] = None, codomain: Optional[Space] = None, label: str = "matrix") -> LinOp:
    """Wrap a matrix; missing spaces default to coefficient sequences."""
    m, n = mat.shape
    return LinOp(domain or coeff_seq(n), codomain or coeff_seq(m), mat, label=label)


def matrix_free(domain: Space, codomain: Space, forward: Callable, adjoint: Callable, label: str = "") -> LinOp:
    return LinOp(domain, codomain, forward=forward, adjoint=adjoint, label=label)


def identity(space: Space, scale: float = 1.0) -> LinOp:
    return LinOp(space, space, sp.identity(space.dim, format="csr") * float(scale),
                 label="id" if scale == 1.0 else f"{scale:g}*id")


def zero_op(domain: Space, codomain: Space) -> LinOp:
    return LinOp(domain, codomain, sp.csr_matrix((codomain.dim, domain.dim)), label="0")


def apply(op: LinOp, x) -> np.ndarray:
    """Forward application ``A x``."""
    return op.apply(x)


def adjoint_apply(op: LinOp, y) -> np.ndarray:
    """Adjoint application ``A^T y``."""
    return op.adjoint_apply(y)


@dataclass(frozen=True)
class OperatorAnalysis:
    """Kernel and closed-range data of an operator.

    ``poincare_C`` is ``None`` for the zero operator.
    """

    kernel_basis: np.ndarray
    rank: int
    sigma_max: float
    sigma_min_nonzero: Optional[float]
    poincare_C: Optional[float]
    kernel_projector: np.ndarray
    range_basis: np.ndarray

    @property
    def kernel_dim(self) -> int:
        return self.kernel_basis.shape[1]


def analyze(op: LinOp, tol: float = KERNEL_RTOL) -> OperatorAnalysis:
    """SVD-based kernel, rank and Poincaré constant.

    Singular values at or below ``tol * sigma_max`` count as zero.
    """
    a = op.to_dense()
    m, n = a.shape
    u, s, vt = np.linalg.svd(a, full_matrices=True)
    smax = float(s[0]) if s.size else 0.0
    if smax == 0.0:
        rank = 0
    else:
        rank = int(np.sum(s > tol * smax))
    kernel = vt[rank:].T.copy()
    rng = u[:, :rank].copy()
    if rank == 0:
        smin, pc = None, None
    else:
        smin = float(s[rank - 1])
        pc = 1.0 / smin
    return OperatorAnalysis(
        kernel_basis=kernel,
        rank=rank,
        sigma_max=smax,
        sigma_min_nonzero=smin,
        poincare_C=pc,
        kernel_projector=kernel @ kernel.T,
        range_basis=rng,
    )


@dataclass(frozen=True)
class NormEstimate:
    value: float
    converged: bool
    iterations: int

    def __float__(self) -> float:
        return self.value


def operator_norm(op, iters: int = 1000, seed: int = 0, rtol: float = 1e-10) -> NormEstimate:
    """Largest singular value by power iteration on ``A^T A``.

    ``op`` may be a :class:`LinOp` or anything with ``@`` and ``.T``.
    Deterministic for a fixed seed.
    """
    if isinstance(op, LinOp):
        fwd, adj, n = op.apply, op.adjoint_apply, op.domain.dim
    else:
        fwd, adj, n = (lambda x: op @ x), (lambda y: op.T @ y), op.shape[1]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    nx = np.linalg.norm(x)
    if nx == 0:
        return NormEstimate(0.0, True, 0)
    x /= nx
    est = 0.0
    for k in range(1, iters + 1):
        y = adj(fwd(x))
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return NormEstimate(0.0, True, k)
        new = np.sqrt(ny)
        x = y / ny
        if abs(new - est) <= rtol * new:
            return NormEstimate(float(new), True, k)
        est = new
    return NormEstimate(float(est), False, iters)


def adjoint_mismatch(op: LinOp, probes: int = 100, seed: int = 0) -> float:
    """Worst relative violation of ``<Ax, y> = <x, A^T y>`` over random probes.

    The relative scale is ``|x| |y| |A|``.
    """
    rng = np.random.default_rng(seed)
    nrm = operator_norm(op, seed=seed).value or 1.0
    worst = 0.0
    for _ in range(probes):
        x = rng.standard_normal(op.domain.dim)
        y = rng.standard_normal(op.codomain.dim)
        lhs = float(op.apply(x) @ y)
        rhs = float(x @ op.adjoint_apply(y))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y) * nrm))
    return worst
