"""Conditional averages over level sets of a collective variable.

For ``ξ: ℝ² → ℝ`` with Gram ``G = |∇ξ|²`` and the conditional Gibbs measure
``ν_z`` on ``ξ⁻¹(z)``, the coarse-grained overdamped diffusion is
``a_ξ(z) = E_{ν_z}[G]`` while overdamping the coarse-grained kinetic model
gives ``A(z)² = (E_{ν_z}[G^{1/2}])²``. Their difference is
``Var_{ν_z}(G^{1/2}) >= 0`` and vanishes for linear ``ξ``.

Level sets are parameterized by ``t = q₂`` with ``q₁ = Q(z, t)``. By the
co-area formula the conditional measure in this chart is
``ν_z(dt) ∝ exp(−βV(Q(z,t), t)) / |∂₁ξ| dt``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import QuadratureError, ValidationError
from .model import Domain, ScalarPotential
from .rng import bootstrap_rng

QUAD_TOL = 1e-12
_GL = np.polynomial.legendre.leggauss(16)


# ---------------------------------------------------------------------------
# collective variables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CollectiveVariable:
    """Scalar collective variable on ℝ² with a closed-form level-set chart.

    Attributes
    ----------
    family : str
        ``linear`` (``c₁q₁ + c₂q₂``), ``sine`` (``q₁ + ε sin q₂``) or
        ``product`` (``q₁ (1 + ε sin q₂)``).
    params : tuple
        ``(c₁, c₂)`` for linear, ``(ε,)`` otherwise.
    """

    family: str
    params: tuple

    def __post_init__(self):
        if self.family == "linear":
            if len(self.params) != 2 or self.params[0] == 0:
                raise ValidationError("linear collective variable needs (c1, c2) with c1 != 0")
        elif self.family in ("sine", "product"):
            if len(self.params) != 1:
                raise ValidationError(f"{self.family} collective variable takes (eps,)")
            if self.family == "product" and not abs(self.params[0]) < 1:
                raise ValidationError("product family needs |eps| < 1")
        else:
            raise ValidationError(f"unknown collective variable family {self.family!r}")

    @classmethod
    def linear(cls, c1=1.0, c2=0.0):
        return cls("linear", (float(c1), float(c2)))

    @classmethod
    def sine(cls, eps):
        return cls("sine", (float(eps),))

    @classmethod
    def product(cls, eps):
        return cls("product", (float(eps),))

    @property
    def eps(self) -> float:
        return self.params[0] if self.family != "linear" else 0.0

    def __call__(self, q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        q1, q2 = q[:, 0], q[:, 1]
        if self.family == "linear":
            return self.params[0] * q1 + self.params[1] * q2
        e = self.params[0]
        if self.family == "sine":
            return q1 + e * np.sin(q2)
        return q1 * (1 + e * np.sin(q2))

    def gradient(self, q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        q1, q2 = q[:, 0], q[:, 1]
        if self.family == "linear":
            return np.broadcast_to(np.array(self.params), q.shape).copy()
        e = self.params[0]
        if self.family == "sine":
            return np.column_stack([np.ones_like(q1), e * np.cos(q2)])
        return np.column_stack([1 + e * np.sin(q2), e * q1 * np.cos(q2)])

    def gram(self, q):
        g = self.gradient(q)
        return np.sum(g * g, axis=1)

    def chart(self, z, t):
        """``q₁ = Q(z, t)`` on the level set and the co-area weight ``1/|∂₁ξ|``."""
        t = np.asarray(t, dtype=float)
        if self.family == "linear":
            c1, c2 = self.params
            return (z - c2 * t) / c1, np.full_like(t, 1 / abs(c1))
        e = self.params[0]
        if self.family == "sine":
            return z - e * np.sin(t), np.ones_like(t)
        s = 1 + e * np.sin(t)
        return z / s, 1 / np.abs(s)

    def check_rank(self, q) -> None:
        if np.any(self.gram(q) <= 0):
            raise ValidationError("∇ξ vanishes on the sample")


def reference_potential(beta: float = 1.0) -> ScalarPotential:
    """Product Gaussian reference ``V = |q|²/2`` on ℝ²."""
    return ScalarPotential.quadratic(Domain.euclidean(2), np.eye(2))


# ---------------------------------------------------------------------------
# level-set quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LevelSetAverage:
    """Conditional averages at one ``z``."""

    z: float
    A: float            # E[G^{1/2}]
    a_xi: float         # E[G]
    var_root: float     # Var(G^{1/2}), computed directly
    mass: float         # ∫ e^{−βV} / |∂₁ξ| dt
    error: float        # change under node doubling


def _composite(fun, lo, hi, panels):
    x, w = _GL
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    t = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    return fun(t) @ wt


def _density(cv, potential, beta, z, t, shift):
    q1, w = cv.chart(z, t)
    Q = np.column_stack([q1, t])
    return np.exp(-beta * (potential.value(Q) - shift)) * w, cv.gram(Q)


def _shift(cv, potential, z, T):
    t = np.linspace(-T, T, 257)
    q1, _ = cv.chart(z, t)
    return float(potential.value(np.column_stack([q1, t])).min())


def _adaptive(fun, T, tol, panels, max_panels, what):
    prev = None
    while panels <= max_panels:
        cur = np.asarray(_composite(fun, -T, T, panels))
        if prev is not None:
            err = float(np.max(np.abs(cur - prev) / np.maximum(np.abs(cur), 1e-300)))
            if err <= tol:
                return cur, err, panels
        prev = cur
        panels *= 2
    raise QuadratureError(f"{what} did not reach {tol:.1e}")


def level_set_average(cv: CollectiveVariable, potential: ScalarPotential | None = None, beta: float = 1.0,
                      z: float = 0.0, *, tol: float = QUAD_TOL, half_width: float | None = None,
                      panels: int = 16, max_panels: int = 4096) -> LevelSetAverage:
    """Adaptive composite Gauss–Legendre over the level-set chart.

    Panels double until every moment changes by less than ``tol`` (relative);
    otherwise :class:`QuadratureError`. The chart is truncated at
    ``|t| <= half_width`` (default: where the Gaussian factor of ``q₂`` is
    below ``e^{-40}``).
    """
    potential = potential if potential is not None else reference_potential(beta)
    T = half_width if half_width is not None else math.sqrt(80.0 / beta)
    c = _shift(cv, potential, z, T)

    def fun(t):
        rho, g = _density(cv, potential, beta, z, t, c)
        return np.stack([rho, rho * np.sqrt(g), rho * g])

    (m0, m1, m2), err, used = _adaptive(fun, T, tol, panels, max_panels, f"level-set quadrature at z={z}")
    A = m1 / m0

    def centered(t):
        rho, g = _density(cv, potential, beta, z, t, c)
        return rho * (np.sqrt(g) - A) ** 2

    var = _composite(centered, -T, T, used) / m0
    mass = m0 * math.exp(-beta * c)
    return LevelSetAverage(float(z), float(A), float(m2 / m0), float(var), float(mass), err)


def effective_A(cv, potential=None, beta=1.0, z=0.0, **kw) -> float:
    """``A(z) = E_{ν_z}[G^{1/2}]``."""
    return level_set_average(cv, potential, beta, z, **kw).A


def effective_a_xi(cv, potential=None, beta=1.0, z=0.0, **kw) -> float:
    """``a_ξ(z) = E_{ν_z}[G]``."""
    return level_set_average(cv, potential, beta, z, **kw).a_xi


def free_energy(cv, potential=None, beta=1.0, z_grid: Sequence[float] = (0.0,), **kw) -> np.ndarray:
    """``F(z) = −β⁻¹ log ∫_{ξ⁻¹(z)} e^{−βV} |∂₁ξ|⁻¹ dt``, shifted so ``min F = 0``."""
    masses = np.array([level_set_average(cv, potential, beta, float(z), **kw).mass for z in z_grid])
    F = -np.log(masses) / beta
    return F - F.min()


# ---------------------------------------------------------------------------
# gap tables
# ---------------------------------------------------------------------------


@dataclass
class GapTable:
    family: str
    eps: float
    z: np.ndarray
    A: np.ndarray
    a_xi: np.ndarray
    gap: np.ndarray
    var_root: np.ndarray
    quad_error: float

    @property
    def max_gap(self) -> float:
        return float(np.max(np.abs(self.gap)))

    HEADER = ("family", "eps", "z", "A", "a_xi", "gap", "var_root")

    def rows(self) -> list[list]:
        return [[self.family, self.eps, z, A, a, g, v]
                for z, A, a, g, v in zip(self.z, self.A, self.a_xi, self.gap, self.var_root)]


def commutativity_gap(cv: CollectiveVariable, potential=None, beta: float = 1.0,
                      z_grid: Sequence[float] = tuple(np.linspace(-2, 2, 9)), **kw) -> GapTable:
    """Tabulate ``a_ξ(z) − A(z)²`` on a grid of levels."""
    avgs = [level_set_average(cv, potential, beta, float(z), **kw) for z in z_grid]
    A = np.array([v.A for v in avgs])
    a = np.array([v.a_xi for v in avgs])
    return GapTable(cv.family, cv.eps, np.asarray(z_grid, dtype=float), A, a, a - A * A,
                    np.array([v.var_root for v in avgs]), max(v.error for v in avgs))


@dataclass
class GapSweep:
    family: str
    eps: np.ndarray
    max_gap: np.ndarray
    slope: float


def gap_sweep(family: str, eps_grid: Sequence[float], potential=None, beta: float = 1.0,
              z_grid: Sequence[float] = tuple(np.linspace(-2, 2, 9)), **kw) -> GapSweep:
    """Max gap over ``z`` for each ``ε`` and its log-log slope in ``ε``."""
    eps = np.asarray(eps_grid, dtype=float)
    gaps = np.array([commutativity_gap(CollectiveVariable(family, (e,)), potential, beta, z_grid, **kw).max_gap
                     for e in eps])
    slope = float(np.polyfit(np.log(eps), np.log(gaps), 1)[0])
    return GapSweep(family, eps, gaps, slope)


# ---------------------------------------------------------------------------
# Monte Carlo oracle
# ---------------------------------------------------------------------------


@dataclass
class SlabEstimate:
    h: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    extrapolated: float


def slab_average(cv: CollectiveVariable, z: float, h_grid: Sequence[float] = (0.2, 0.1, 0.05), *,
                 N: int = 2_000_000, beta: float = 1.0, seed: int = 0, power: float = 0.5) -> SlabEstimate:
    """``E[G^power | |ξ − z| < h]`` under the Gaussian reference, extrapolated to ``h → 0``.

    The slab bias is even in ``h`` to leading order, so the extrapolation fits
    ``a + b h²``.
    """
    gen = bootstrap_rng(seed, tag=11)
    q = gen.standard_normal((N, 2)) / math.sqrt(beta)
    xi = cv(q)
    g = cv.gram(q) ** power
    h = np.asarray(h_grid, dtype=float)
    vals, counts = [], []
    for hh in h:
        sel = np.abs(xi - z) < hh
        counts.append(int(sel.sum()))
        vals.append(float(g[sel].mean()))
    vals = np.array(vals)
    coef = np.polyfit(h ** 2, vals, 1)
    return SlabEstimate(h, vals, np.array(counts), float(coef[1]))
