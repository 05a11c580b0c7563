"""Convex node functionals with proximal maps and convex conjugates.

Pointwise magnitudes are Euclidean norms over all entries attached to the
same anchor-grid point (see :meth:`Space.group_index`).
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .linalg_spaces import DimensionError, Space

__all__ = [
    "NodeFunctional",
    "IndicatorZero",
    "GroupL1",
    "GroupL1Aniso",
    "LqNorm",
    "HalfSquaredL2",
    "IndicatorBall",
    "CompositeFG",
    "Zero",
    "evaluate",
    "prox",
    "prox_conjugate",
    "conjugate_eval",
    "FEAS_TOL",
]

FEAS_TOL = 1e-9
NEWTON_TOL = 1e-12
NEWTON_STEPS = 50


class NodeFunctional:
    """Base class.  Subclasses implement ``value``, ``prox`` and ``conjugate``."""

    kind = "abstract"
    positively_homogeneous = False

    def __init__(self, domain: Space):
        self.domain = domain
        self._dim = domain.dim

    def _check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self._dim,):
            raise DimensionError(self._dim, v.size, f"{self.kind}")
        return v

    def value(self, v) -> float:
        raise NotImplementedError

    def prox(self, v, tau: float) -> np.ndarray:
        raise NotImplementedError

    def conjugate(self, y) -> float:
        raise NotImplementedError

    def prox_conjugate(self, v, sigma: float) -> np.ndarray:
        """Proximal map of ``sigma * f^*`` through the Moreau identity."""
        v = self._check(v)
        return v - sigma * self.prox(v / sigma, 1.0 / sigma)

    def scaled(self, c: float) -> "NodeFunctional":
        """The functional ``c * f`` for ``c > 0``."""
        raise NotImplementedError

    def dual_scale(self, y) -> float:
        """Largest ``t`` in [0, 1] with ``t * y`` in the domain of the conjugate."""
        return 1.0

    def params(self) -> dict:
        return {}

    def with_domain(self, domain: Space) -> "NodeFunctional":
        return type(self)(domain, **self.params())

    def __repr__(self) -> str:
        p = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({p})"

    def __eq__(self, other) -> bool:
        if type(self) is not type(other) or self.domain != other.domain:
            return False
        a, b = self.params(), other.params()
        if a.keys() != b.keys():
            return False
        return all(np.array_equal(np.asarray(a[k], dtype=object), np.asarray(b[k], dtype=object))
                   if not isinstance(a[k], NodeFunctional) else a[k] == b[k] for k in a)

    __hash__ = object.__hash__


def _group_norms(v: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    return np.sqrt(np.bincount(groups, weights=v * v, minlength=n_groups))


class IndicatorZero(NodeFunctional):
    """Indicator of ``{0}``; the functional of a splitting node."""

    kind = "IndicatorZero"
    positively_homogeneous = True

    def value(self, v) -> float:
        v = self._check(v)
        return 0.0 if (v.size == 0 or np.max(np.abs(v)) <= FEAS_TOL) else np.inf

    def prox(self, v, tau):
        return np.zeros_like(self._check(v))

    def prox_conjugate(self, v, sigma):
        return self._check(v).copy()

    def conjugate(self, y) -> float:
        self._check(y)
        return 0.0

    def scaled(self, c):
        return self


class Zero(NodeFunctional):
    """The zero functional; its conjugate is the indicator of ``{0}``."""

    kind = "Zero"
    positively_homogeneous = True

    def value(self, v) -> float:
        self._check(v)
        return 0.0

    def prox(self, v, tau):
        return self._check(v).copy()

    def prox_conjugate(self, v, sigma):
        return np.zeros_like(self._check(v))

    def conjugate(self, y) -> float:
        y = self._check(y)
        return 0.0 if np.max(np.abs(y), initial=0.0) <= FEAS_TOL else np.inf

    def dual_scale(self, y) -> float:
        return 1.0 if np.max(np.abs(y), initial=0.0) == 0.0 else 0.0

    def scaled(self, c):
        return self


class GroupL1(NodeFunctional):
    """``weight * sum_x |v(x)|`` with the Euclidean magnitude over channels."""

    kind = "GroupL1"
    positively_homogeneous = True

    def __init__(self, domain: Space, weight: float = 1.0):
        super().__init__(domain)
        if weight <= 0:
            raise ValueError("GroupL1 weight must be positive")
        self.weight = float(weight)
        self._groups = domain.group_index()
        self._ng = domain.n_groups

    def params(self):
        return {"weight": self.weight}

    def magnitudes(self, v) -> np.ndarray:
        return _group_norms(self._check(v), self._groups, self._ng)

    def value(self, v) -> float:
        return self.weight * float(np.sum(self.magnitudes(v)))

    def prox(self, v, tau):
        v = self._check(v)
        mag = _group_norms(v, self._groups, self._ng)
        thr = tau * self.weight
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(mag > thr, 1.0 - thr / np.where(mag > 0, mag, 1.0), 0.0)
        return v * factor[self._groups]

    def prox_conjugate(self, v, sigma):
        v = self._check(v)
        if self._ng == self._dim:
            return np.clip(v, -self.weight, self.weight)
        mag = _group_norms(v, self._groups, self._ng)
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(mag > self.weight, self.weight / np.where(mag > 0, mag, 1.0), 1.0)
        return v * factor[self._groups]

    def conjugate(self, y) -> float:
        mag = self.magnitudes(y)
        return 0.0 if mag.size == 0 or mag.max() <= self.weight * (1 + FEAS_TOL) else np.inf

    def dual_scale(self, y) -> float:
        mag = self.magnitudes(y)
        top = mag.max(initial=0.0)
        return 1.0 if top <= self.weight else self.weight / top

    def scaled(self, c):
        return GroupL1(self.domain, self.weight * c)


class GroupL1Aniso(NodeFunctional):
    """Anisotropic weighted l1: ``sum_x sum_c beta_c |v_c(x)|``."""

    kind = "GroupL1Aniso"
    positively_homogeneous = True

    def __init__(self, domain: Space, beta=1.0):
        super().__init__(domain)
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        if beta.size == 1:
            beta = np.full(domain.channels, beta[0])
        if beta.size != domain.channels:
            raise ValueError(f"need {domain.channels} channel weights, got {beta.size}")
        if np.any(beta <= 0):
            raise ValueError("channel weights must be positive")
        self.beta = beta
        self._w = beta[domain.channel_index()]

    def params(self):
        return {"beta": self.beta.tolist()}

    def value(self, v) -> float:
        return float(np.sum(self._w * np.abs(self._check(v))))

    def prox(self, v, tau):
        v = self._check(v)
        return np.sign(v) * np.maximum(np.abs(v) - tau * self._w, 0.0)

    def prox_conjugate(self, v, sigma):
        v = self._check(v)
        return np.clip(v, -self._w, self._w)

    def conjugate(self, y) -> float:
        y = self._check(y)
        return 0.0 if np.all(np.abs(y) <= self._w * (1 + FEAS_TOL)) else np.inf

    def dual_scale(self, y) -> float:
        r = np.max(np.abs(y) / self._w, initial=0.0)
        return 1.0 if r <= 1.0 else 1.0 / r

    def scaled(self, c):
        return GroupL1Aniso(self.domain, self.beta * c)


class LqNorm(NodeFunctional):
    """Power form ``(weight / q) * sum_i |v_i|^q`` for ``1 < q < inf``."""

    kind = "LqNorm"

    def __init__(self, domain: Space, q: float = 2.0, weight: float = 1.0):
        super().__init__(domain)
        if not 1.0 < q < np.inf:
            raise ValueError("q must lie in (1, inf)")
        if weight <= 0:
            raise ValueError("LqNorm weight must be positive")
        self.q = float(q)
        self.weight = float(weight)

    def params(self):
        return {"q": self.q, "weight": self.weight}

    def value(self, v) -> float:
        return self.weight / self.q * float(np.sum(np.abs(self._check(v)) ** self.q))

    def prox(self, v, tau):
        v = self._check(v)
        return np.sign(v) * _lq_shrink(np.abs(v), tau * self.weight, self.q)

    def conjugate(self, y) -> float:
        y = self._check(y)
        qc = self.q / (self.q - 1.0)
        return float(np.sum(np.abs(y) ** qc)) * self.weight ** (-1.0 / (self.q - 1.0)) / qc

    def scaled(self, c):
        return LqNorm(self.domain, self.q, self.weight * c)


def _lq_shrink(a: np.ndarray, c: float, q: float) -> np.ndarray:
    """Solve ``t + c t^(q-1) = a`` for ``t >= 0`` entrywise.

    Newton's method on a convex increasing reformulation started from the
    right, so the iterates decrease monotonically to the root.
    """
    out = np.zeros_like(a)
    pos = a > 0
    if not np.any(pos):
        return out
    a = a[pos]
    if q >= 2.0:
        t = a.copy()
        for _ in range(NEWTON_STEPS):
            h = t + c * t ** (q - 1.0) - a
            dh = 1.0 + c * (q - 1.0) * t ** (q - 2.0)
            step = h / dh
            t = np.maximum(t - step, 0.0)
            if np.all(np.abs(step) <= NEWTON_TOL * np.maximum(a, 1.0)):
                break
        out[pos] = t
    else:
        # substitute s = t^(q-1); s^p + c s - a is convex for p = 1/(q-1) > 1
        p = 1.0 / (q - 1.0)
        s = a ** (q - 1.0)
        for _ in range(NEWTON_STEPS):
            h = s ** p + c * s - a
            dh = p * s ** (p - 1.0) + c
            step = h / dh
            s = np.maximum(s - step, 0.0)
            if np.all(np.abs(step) <= NEWTON_TOL * np.maximum(s, 1e-300)):
                break
        out[pos] = s ** p
    return out


class HalfSquaredL2(NodeFunctional):
    """``(weight / 2) * |v|^2``."""

    kind = "HalfSquaredL2"

    def __init__(self, domain: Space, weight: float = 1.0):
        super().__init__(domain)
        if weight <= 0:
            raise ValueError("HalfSquaredL2 weight must be positive")
        self.weight = float(weight)

    def params(self):
        return {"weight": self.weight}

    def value(self, v) -> float:
        v = self._check(v)
        return 0.5 * self.weight * float(v @ v)

    def prox(self, v, tau):
        return self._check(v) / (1.0 + tau * self.weight)

    def prox_conjugate(self, v, sigma):
        return self._check(v) / (1.0 + sigma / self.weight)

    def conjugate(self, y) -> float:
        y = self._check(y)
        return 0.5 * float(y @ y) / self.weight

    def scaled(self, c):
        return HalfSquaredL2(self.domain, self.weight * c)


class IndicatorBall(NodeFunctional):
    """Indicator of ``{v : |v(x)| <= gamma(x)}`` with pointwise magnitudes.

    ``gamma`` is a scalar or one radius per anchor-grid point.
    """

    kind = "IndicatorBall"
    positively_homogeneous = False

    def __init__(self, domain: Space, gamma=1.0):
        super().__init__(domain)
        g = np.asarray(gamma, dtype=float)
        if g.ndim == 0:
            g = np.full(domain.n_groups, float(g))
        g = g.ravel()
        if g.size != domain.n_groups:
            raise ValueError(f"radius field needs {domain.n_groups} entries, got {g.size}")
        if np.any(g < 0):
            raise ValueError("radius must be nonnegative")
        self.gamma = g
        self._groups = domain.group_index()
        self._ng = domain.n_groups

    def params(self):
        g = self.gamma
        return {"gamma": float(g[0]) if np.all(g == g[0]) else g.tolist()}

    def value(self, v) -> float:
        mag = _group_norms(self._check(v), self._groups, self._ng)
        return 0.0 if np.all(mag <= self.gamma + FEAS_TOL) else np.inf

    def prox(self, v, tau):
        v = self._check(v)
        mag = _group_norms(v, self._groups, self._ng)
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(mag > self.gamma, self.gamma / np.where(mag > 0, mag, 1.0), 1.0)
        return v * factor[self._groups]

    def conjugate(self, y) -> float:
        mag = _group_norms(self._check(y), self._groups, self._ng)
        return float(np.sum(self.gamma * mag))

    def scaled(self, c):
        return self


class CompositeFG(NodeFunctional):
    """``f(z1) + g(z2)`` on a two-factor product space."""

    kind = "Composite_fg"

    def __init__(self, domain: Space, f: NodeFunctional, g: NodeFunctional):
        super().__init__(domain)
        if domain.kind != "product" or len(domain.components) != 2:
            raise ValueError("Composite_fg needs a product space with two factors")
        for part, comp in ((f, domain.components[0]), (g, domain.components[1])):
            if not isinstance(part, (GroupL1, LqNorm, HalfSquaredL2)):
                raise ValueError("Composite_fg parts must be GroupL1, LqNorm or HalfSquaredL2")
            if part.domain != comp:
                raise ValueError("Composite_fg part domain differs from its factor")
        self.f = f
        self.g = g
        self._cut = domain.components[0].dim
        self.positively_homogeneous = f.positively_homogeneous and g.positively_homogeneous

    def params(self):
        return {"f": self.f, "g": self.g}

    def with_domain(self, domain):
        return CompositeFG(domain, self.f.with_domain(domain.components[0]),
                           self.g.with_domain(domain.components[1]))

    def _split(self, v):
        v = self._check(v)
        return v[: self._cut], v[self._cut:]

    def value(self, v) -> float:
        a, b = self._split(v)
        return self.f.value(a) + self.g.value(b)

    def prox(self, v, tau):
        a, b = self._split(v)
        return np.concatenate([self.f.prox(a, tau), self.g.prox(b, tau)])

    def prox_conjugate(self, v, sigma):
        a, b = self._split(v)
        return np.concatenate([self.f.prox_conjugate(a, sigma), self.g.prox_conjugate(b, sigma)])

    def conjugate(self, y) -> float:
        a, b = self._split(y)
        return self.f.conjugate(a) + self.g.conjugate(b)

    def dual_scale(self, y) -> float:
        a, b = self._split(y)
        return min(self.f.dual_scale(a), self.g.dual_scale(b))

    def scaled(self, c):
        return CompositeFG(self.domain, self.f.scaled(c), self.g.scaled(c))


def evaluate(f: NodeFunctional, v) -> float:
    """Value of ``f`` at ``v`` (possibly ``inf``)."""
    return f.value(v)


def prox(f: NodeFunctional, v, tau: float) -> np.ndarray:
    """``argmin_z 0.5 |z - v|^2 + tau f(z)``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return f.prox(v, tau)


def prox_conjugate(f: NodeFunctional, v, sigma: float) -> np.ndarray:
    """Proximal map of ``sigma f^*``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return f.prox_conjugate(v, sigma)


def conjugate_eval(f: NodeFunctional, y) -> float:
    """Convex conjugate ``f^*(y)``."""
    return f.conjugate(y)


FUNCTIONAL_KINDS = {
    "IndicatorZero": IndicatorZero,
    "GroupL1": GroupL1,
    "GroupL1Aniso": GroupL1Aniso,
    "LqNorm": LqNorm,
    "HalfSquaredL2": HalfSquaredL2,
    "IndicatorBall": IndicatorBall,
    "Composite_fg": CompositeFG,
    "Zero": Zero,
}


def functional_to_dict(f: NodeFunctional) -> dict:
    out = {"kind": f.kind}
    for k, v in f.params().items():
        out[k] = functional_to_dict(v) if isinstance(v, NodeFunctional) else v
    return out


def functional_from_dict(desc: dict, domain: Space, path: str = "functional") -> NodeFunctional:
    """Build a functional from its dictionary form; raises ``KeyError``/``ValueError`` with a key path."""
    kind = desc.get("kind")
    if kind not in FUNCTIONAL_KINDS:
        raise ValueError(f"{path}.kind: unknown functional kind {kind!r}")
    allowed = {
        "IndicatorZero": set(), "Zero": set(), "GroupL1": {"weight"}, "GroupL1Aniso": {"beta"},
        "LqNorm": {"q", "weight"}, "HalfSquaredL2": {"weight"}, "IndicatorBall": {"gamma"},
        "Composite_fg": {"f", "g"},
    }[kind]
    extra = set(desc) - allowed - {"kind"}
    if extra:
        raise ValueError(f"{path}: unknown key(s) {sorted(extra)}")
    if kind == "Composite_fg":
        if domain.kind != "product" or len(domain.components) != 2:
            raise ValueError(f"{path}: Composite_fg needs a two-factor product space")
        f = functional_from_dict(desc["f"], domain.components[0], path + ".f")
        g = functional_from_dict(desc["g"], domain.components[1], path + ".g")
        return CompositeFG(domain, f, g)
    kwargs = {k: v for k, v in desc.items() if k != "kind"}
    return FUNCTIONAL_KINDS[kind](domain, **kwargs)
