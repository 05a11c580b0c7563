"""Forward models, reproducible noise and the vanishing-noise experiment driver.

Noise generator
---------------
Gaussian samples come from a counter-based 64-bit generator so the data of an
experiment can be reproduced outside this package.  For a seed ``s`` the
``i``-th 64-bit word (``i = 0, 1, ...``) is ``mix(s + (i + 1) * G) mod 2**64``
with ``G = 0x9E3779B97F4A7C15`` and

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

(all arithmetic modulo ``2**64``).  A word becomes a uniform number in
``(0, 1]`` as ``((z >> 11) + 1) * 2**-53``.  Words ``2j`` and ``2j + 1`` give
``u1, u2`` and the Box-Muller pair ``sqrt(-2 ln u1) * cos(2 pi u2)`` and
``sqrt(-2 ln u1) * sin(2 pi u2)``, which become samples ``2j`` and ``2j + 1``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .graph_core import RegGraph, _range_intersection, hat_transform, invariant_subspace, resolve_alpha
from .graph_library import conv, gaussian_kernel, mask
from .linalg_spaces import LinOp, Space, analyze, from_matrix, identity, scalar_field
from .solver import SolverConfig, evaluate_R, solve_tikhonov

__all__ = [
    "ForwardModel",
    "NoiseModel",
    "make_forward",
    "splitmix64",
    "uniform01",
    "gaussian_noise",
    "corrupt",
    "VanishingNoiseLevel",
    "VanishingNoiseRun",
    "run_vanishing_noise",
]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
FORWARD_KINDS = ("identity", "gaussian-blur", "mask", "dense")


@dataclass(frozen=True)
class ForwardModel:
    kind: str
    params: dict
    op: LinOp

    def apply(self, x) -> np.ndarray:
        return self.op.apply(x)

    def adjoint_apply(self, y) -> np.ndarray:
        return self.op.adjoint_apply(y)


def make_forward(kind: str, space, **params) -> ForwardModel:
    """Build a forward operator on ``space`` (a :class:`Space` or a grid shape).

    ``gaussian-blur`` takes ``sigma`` and an optional ``radius``; ``mask`` takes
    ``keep`` (boolean pattern or kept indices); ``dense`` takes ``matrix``.
    """
    if not isinstance(space, Space):
        space = scalar_field(tuple(int(s) for s in np.atleast_1d(space)))
    if kind == "identity":
        op = identity(space)
    elif kind == "gaussian-blur":
        sigma = float(params.get("sigma", 1.0))
        if not sigma > 0:
            raise ValueError("blur sigma must be positive")
        k1 = gaussian_kernel(sigma, params.get("radius"))
        kern = k1
        for _ in range(space.ndim - 1):
            kern = np.multiply.outer(kern, k1)
        op = conv(space, kern)
    elif kind == "mask":
        if "keep" not in params:
            raise ValueError("mask forward model needs 'keep'")
        op = mask(space, params["keep"])
    elif kind == "dense":
        mat = np.asarray(params.get("matrix"), dtype=float)
        if mat.ndim != 2 or mat.shape[1] != space.dim:
            raise ValueError(f"dense forward matrix must have {space.dim} columns")
        op = from_matrix(mat, domain=space)
    else:
        raise ValueError(f"unknown forward model {kind!r}; expected one of {FORWARD_KINDS}")
    return ForwardModel(kind, dict(params), op)


# --- noise ---------------------------------------------------------------------
def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` words of the counter-based stream for ``seed``."""
    s = np.uint64(int(seed) % 2**64)
    i = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = s + i * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def uniform01(seed: int, count: int) -> np.ndarray:
    """Uniform samples in ``(0, 1]``."""
    z = splitmix64(seed, count)
    return ((z >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53


def gaussian_noise(seed: int, shape) -> np.ndarray:
    """Standard normal samples by Box-Muller on the uniform stream."""
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    u = uniform01(seed, 2 * pairs)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    ang = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(ang)
    out[1::2] = r * np.sin(ang)
    return out[:n].reshape(shape)


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0
    seed: int = 0
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ValueError("only gaussian noise is supported")
        if self.sigma < 0:
            raise ValueError("noise level must be nonnegative")


def corrupt(fm: ForwardModel, u_true, noise: NoiseModel) -> np.ndarray:
    """``K u_true + sigma * xi`` with ``xi`` from the seeded generator."""
    clean = fm.apply(np.asarray(u_true, dtype=float))
    if noise.sigma == 0:
        return clean
    return clean + noise.sigma * gaussian_noise(noise.seed, clean.shape)


# --- vanishing noise -------------------------------------------------------------
@dataclass(frozen=True)
class VanishingNoiseLevel:
    k: int
    sigma: float
    delta: float
    beta: float
    err_l2: float
    R_value: float
    gap: float
    iters: int
    converged: bool


@dataclass
class VanishingNoiseRun:
    levels: List[VanishingNoiseLevel]
    R_hat_true: float
    shift_dim: int
    partial: bool
    solutions: List[np.ndarray] = field(default_factory=list, repr=False)

    COLUMNS = ("k", "sigma", "delta_k", "beta_k", "err_l2", "R_value", "gap", "iters")

    def errors(self) -> np.ndarray:
        return np.array([lv.err_l2 for lv in self.levels])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.COLUMNS)
            for lv in self.levels:
                wr.writerow([lv.k, repr(lv.sigma), repr(lv.delta), repr(lv.beta), repr(lv.err_l2),
                             repr(lv.R_value), repr(lv.gap), lv.iters])


def _shift_basis(g: RegGraph, alpha, fm: ForwardModel) -> np.ndarray:
    """Orthonormal basis of ``ker K`` intersected with the invariant subspace of the limit graph."""
    ghat, ahat = hat_transform(g, alpha)
    inv_basis = invariant_subspace(ghat, ahat).basis_L
    ker_fwd = analyze(fm.op).kernel_basis
    return _range_intersection(ker_fwd, inv_basis) if inv_basis.shape[1] and ker_fwd.shape[1] else np.zeros((inv_basis.shape[0], 0))


def run_vanishing_noise(g: RegGraph, alpha, fm: ForwardModel, u_true, sigmas: Sequence[float],
                        c: float = 1.0, r: float = 0.5, seed: int = 0, betas: Optional[Sequence[float]] = None,
                        alphas: Optional[Sequence] = None, cfg: SolverConfig = SolverConfig()) -> VanishingNoiseRun:
    """Tikhonov reconstructions along a schedule of decreasing noise levels.

    Level ``k`` uses the data ``K u_true + sigma_k * xi`` with one fixed noise
    draw ``xi``, the discrepancy ``delta_k = 0.5 |f_k - K u_true|^2`` and
    ``beta_k = c * delta_k**r`` unless ``betas`` is given.  ``alphas`` may
    supply per-level weights (default: ``alpha`` at every level).  The
    reported error is minimized over shifts in ``ker K`` intersected with the
    invariant subspace of the limit graph.
    """
    u_true = np.asarray(u_true, dtype=float)
    sig = np.asarray(sigmas, dtype=float)
    if np.any(np.diff(sig) >= 0) and not np.all(sig == 0):
        raise ValueError("noise levels must be strictly decreasing")
    if betas is not None and len(betas) != sig.size:
        raise ValueError("betas must match the number of levels")
    clean = fm.apply(u_true)
    xi = gaussian_noise(seed, clean.shape)
    S = _shift_basis(g, alpha, fm)
    ghat, ahat = hat_transform(g, alpha)
    R_hat = evaluate_R(ghat, ahat, u_true, cfg).value
    levels, sols, partial = [], [], False
    for k, s in enumerate(sig):
        f = clean + s * xi
        delta = 0.5 * float(np.sum((f - clean) ** 2))
        beta = float(betas[k]) if betas is not None else c * delta ** r
        if not beta > 0:
            raise ValueError(f"level {k}: beta must be positive (delta = {delta})")
        a_k = resolve_alpha(g, alphas[k]) if alphas is not None else resolve_alpha(g, alpha)
        res = solve_tikhonov(fm.op, f, beta=beta, g=g, alpha=a_k, cfg=cfg)
        u = res.u
        diff = u - u_true
        if S.shape[1]:
            diff = diff - S @ (S.T @ diff)
        R_val = evaluate_R(g, a_k, u, cfg).value
        partial = partial or not res.converged
        levels.append(VanishingNoiseLevel(k, float(s), delta, beta, float(np.linalg.norm(diff)),
                                          float(R_val), float(res.gap), int(res.iterations), bool(res.converged)))
        sols.append(u)
    return VanishingNoiseRun(levels, float(R_hat), int(S.shape[1]), partial, sols)
