"""Canonical change of variables for position-dependent masses.

For a mass ``M(q)`` that factorizes as ``M⁻¹ = Aᵀ G_M A`` with ``G_M``
constant and ``A⁻ᵀ = ∇_q x`` for some position map ``x(q)``, the map
``Γ(q, p) = (x(q), A(q) p)`` is symplectic and turns the kinetic energy into
the constant quadratic form ``½ vᵀ G_M v``.

In one dimension ``A = m^{-1/2}`` and ``x(q) = ∫_{q₀}^q √m``. The map is
tabulated once per mass field and evaluated from compiled code, so the
transformed dynamics can be simulated directly. A two-dimensional Hessian
family ``M = (∇²Φ)²``, ``x = ∇Φ`` serves as the non-trivial multivariate case.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from . import integrate as _ig
from . import rng as _rng
from .errors import QuadratureError, SolverError, UnsupportedError, ValidationError
from .estimate import split_sample_floor, wasserstein_alpha_1d
from .model import MatrixField, ProblemSpec, field1, pot_grad1

NEWTON_TOL = 1e-12
NEWTON_MAXITER = 100
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)
_GL_COARSE = np.polynomial.legendre.leggauss(10)


# ---------------------------------------------------------------------------
# compiled x-map for 1D masses
# ---------------------------------------------------------------------------
# table layout: edges (n+1), cumulative integrals at the edges (n+1)


@njit(cache=True, nogil=True)
def _root_mass(fp, q):
    return math.sqrt(field1(fp, q, 1)[0])


@njit(cache=True, nogil=True)
def _partial(fp, lo, hi, nodes, weights):
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    s = 0.0
    for k in range(nodes.shape[0]):
        s += weights[k] * _root_mass(fp, mid + half * nodes[k])
    return half * s


@njit(cache=True, nogil=True)
def _x_of_q(fp, edges, cum, period, q, nodes, weights):
    """``∫_0^q √m`` using the periodic table."""
    n = edges.shape[0] - 1
    k = math.floor(q / period)
    r = q - k * period
    j = min(int(r / period * n), n - 1)
    return k * cum[n] + cum[j] + _partial(fp, edges[j], r, nodes, weights)


@njit(cache=True, nogil=True)
def _q_of_x(fp, edges, cum, period, y, nodes, weights):
    """Inverse of :func:`_x_of_q`: Newton with a bisection safeguard."""
    n = edges.shape[0] - 1
    total = cum[n]
    k = math.floor(y / total)
    r = y - k * total
    lo_i, hi_i = 0, n
    while hi_i - lo_i > 1:
        mid = (lo_i + hi_i) // 2
        if cum[mid] <= r:
            lo_i = mid
        else:
            hi_i = mid
    j = lo_i
    a = edges[j]
    b = edges[j + 1]
    left = a
    target = r - cum[j]
    q = a + (b - a) * target / max(cum[j + 1] - cum[j], 1e-300)
    for it in range(NEWTON_MAXITER):
        g = _partial(fp, left, q, nodes, weights) - target
        if g > 0.0:
            b = q
        else:
            a = q
        qn = q - g / _root_mass(fp, q)
        if not (a <= qn <= b):
            qn = 0.5 * (a + b)
        if abs(qn - q) <= NEWTON_TOL:
            return k * period + qn, it
        q = qn
    return k * period + q, -1


@njit(cache=True)
def _x_batch(fp, edges, cum, period, q0x, Q, nodes, weights, out):
    for i in range(Q.shape[0]):
        out[i] = _x_of_q(fp, edges, cum, period, Q[i], nodes, weights) - q0x


@njit(cache=True)
def _q_batch(fp, edges, cum, period, q0x, X, nodes, weights, out, iters):
    for i in range(X.shape[0]):
        out[i], iters[i] = _q_of_x(fp, edges, cum, period, X[i] + q0x, nodes, weights)


# ---------------------------------------------------------------------------
# position maps
# ---------------------------------------------------------------------------


class XMap:
    """Position map ``q -> x(q)`` with its inverse and Jacobian ``∇_q x = A⁻ᵀ``."""

    dim: int
    period_in: float = 0.0
    period_out: float = 0.0

    def forward(self, q):
        raise NotImplementedError

    def inverse(self, x):
        raise NotImplementedError

    def derivative(self, q):
        raise NotImplementedError


class XMap1D(XMap):
    """``x(q) = ∫_{q₀}^q √m(t) dt`` for a periodic scalar mass.

    The integral over one period ``L`` is tabulated on ``panels`` equal
    panels with 20-point Gauss–Legendre; panels are doubled until the
    20-point and 10-point rules agree to ``tol``. Because ``m`` is periodic,
    ``x(q + L) = x(q) + L'`` with ``L' = ∫_0^L √m``: a torus of length ``L``
    maps onto a torus of length ``L'``.

    Parameters
    ----------
    mass : MatrixField
        One-dimensional mass field ``m``.
    q0 : float
        Base point, ``x(q0) = 0``.
    """

    def __init__(self, mass: MatrixField, q0: float = 0.0, panels: int = 64, tol: float = 1e-14,
                 max_panels: int = 1 << 14):
        if mass.dim != 1:
            raise UnsupportedError("XMap1D needs a one-dimensional mass")
        lo, _ = mass.spectrum_bounds()
        if lo <= 0:
            raise ValidationError("mass must be positive")
        self.mass = mass
        self.dim = 1
        self.fp = mass.pack
        self.period_in = float(mass.period)
        self.q0 = float(q0)
        nodes_c, weights_c = _GL_COARSE
        while True:
            edges = np.linspace(0.0, self.period_in, panels + 1)
            fine = np.array([_partial(self.fp, a, b, _GL_NODES, _GL_WEIGHTS) for a, b in zip(edges[:-1], edges[1:])])
            coarse = np.array([_partial(self.fp, a, b, nodes_c, weights_c) for a, b in zip(edges[:-1], edges[1:])])
            err = float(np.abs(fine - coarse).sum())
            if err <= tol * max(1.0, fine.sum()):
                break
            panels *= 2
            if panels > max_panels:
                raise QuadratureError(f"x-map quadrature stalled at {err:.2e}")
        self.edges = edges
        self.cum = np.concatenate([[0.0], np.cumsum(fine)])
        self.quad_error = err
        self.period_out = float(self.cum[-1])
        self._q0x = _x_of_q(self.fp, self.edges, self.cum, self.period_in, self.q0, _GL_NODES, _GL_WEIGHTS)

    @property
    def table(self):
        """Arrays the compiled kernels need: ``(fp, edges, cum, L, x_offset)``."""
        return self.fp, self.edges, self.cum, self.period_in, self._q0x

    def forward(self, q):
        q = np.asarray(q, dtype=float)
        out = np.empty(q.size)
        _x_batch(self.fp, self.edges, self.cum, self.period_in, self._q0x, q.ravel(), _GL_NODES, _GL_WEIGHTS, out)
        return out.reshape(q.shape)

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.size)
        iters = np.empty(x.size, dtype=np.int64)
        _q_batch(self.fp, self.edges, self.cum, self.period_in, self._q0x, x.ravel(), _GL_NODES, _GL_WEIGHTS,
                 out, iters)
        if np.any(iters < 0):
            raise SolverError(f"x-map inversion did not converge in {NEWTON_MAXITER} iterations")
        return out.reshape(x.shape)

    def derivative(self, q):
        q = np.asarray(q, dtype=float)
        return np.sqrt(np.array([field1(self.fp, v, 1)[0] for v in q.ravel()])).reshape(q.shape)


class GradientXMap(XMap):
    """``x = ∇Φ`` for ``Φ(q) = ½|q|² + c cos(q₁ + q₂)`` in two dimensions."""

    def __init__(self, c: float = 0.2):
        if not abs(c) < 0.5:
            raise ValidationError("need |c| < 1/2 for a convex Φ")
        self.c = float(c)
        self.dim = 2

    def forward(self, q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        s = q[:, 0] + q[:, 1]
        return q - self.c * np.sin(s)[:, None]

    def inverse(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = x[:, 0] + x[:, 1]
        s = t.copy()
        for _ in range(NEWTON_MAXITER):
            g = s - 2 * self.c * np.sin(s) - t
            ds = g / (1 - 2 * self.c * np.cos(s))
            s = s - ds
            if np.all(np.abs(ds) <= NEWTON_TOL):
                break
        else:
            raise SolverError(f"x-map inversion did not converge in {NEWTON_MAXITER} iterations")
        return x + self.c * np.sin(s)[:, None]

    def derivative(self, q):
        return self.hessian(q)

    def hessian(self, q):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        s = q[:, 0] + q[:, 1]
        H = np.broadcast_to(np.eye(2), (q.shape[0], 2, 2)).copy()
        H -= (self.c * np.cos(s))[:, None, None] * np.ones((2, 2))
        return H


# ---------------------------------------------------------------------------
# factorizations
# ---------------------------------------------------------------------------


@dataclass
class MassFactorization:
    """``M(q)⁻¹ = A(q)ᵀ G_M A(q)`` with ``G_M`` constant.

    Attributes
    ----------
    A : callable
        ``q -> A(q)``, batch shape ``(n, d, d)``.
    mass : callable
        ``q -> M(q)``, batch shape ``(n, d, d)``.
    G_M : ndarray
        Constant SPD matrix of the transformed kinetic energy.
    base_point : ndarray
    """

    A: Callable
    mass: Callable
    G_M: np.ndarray
    base_point: np.ndarray
    dim: int
    field: MatrixField | None = field(default=None, repr=False)

    def velocity(self, q, p):
        """``v = A(q) p``."""
        q, p = _pairs(q, p, self.dim)
        return np.einsum("nij,nj->ni", self.A(q), p)

    def momentum(self, q, v):
        """Inverse of :meth:`velocity` at fixed ``q``."""
        q, v = _pairs(q, v, self.dim)
        return np.linalg.solve(self.A(q), v[..., None])[..., 0]


def _pairs(q, p, d):
    q = np.asarray(q, dtype=float).reshape(-1, d)
    p = np.asarray(p, dtype=float).reshape(-1, d)
    return q, p


def factorize_1d(mass: MatrixField, q0: float = 0.0) -> tuple[MassFactorization, XMap1D]:
    """Factorization ``A = m^{-1/2}``, ``G_M = 1`` and the matching x-map."""
    if mass.dim != 1:
        raise UnsupportedError("factorize_1d needs a one-dimensional mass")

    def A(q):
        q = np.asarray(q, dtype=float).reshape(-1, 1)
        return mass.evaluate(q)["invsqrt"].reshape(-1, 1, 1)

    def M(q):
        q = np.asarray(q, dtype=float).reshape(-1, 1)
        return mass.evaluate(q)["value"].reshape(-1, 1, 1)

    fact = MassFactorization(A, M, np.eye(1), np.array([float(q0)]), 1, mass)
    return fact, XMap1D(mass, q0)


def hessian_family(c: float = 0.2) -> tuple[MassFactorization, GradientXMap]:
    """Two-dimensional family ``M = (∇²Φ)²``, ``x = ∇Φ``, ``A = (∇²Φ)⁻¹``, ``G_M = I``."""
    xm = GradientXMap(c)

    def A(q):
        return np.linalg.inv(xm.hessian(q))

    def M(q):
        H = xm.hessian(q)
        return H @ H

    return MassFactorization(A, M, np.eye(2), np.zeros(2), 2), xm


def factorization_residual(fact: MassFactorization, q) -> float:
    """``max ‖A⁻ᵀ M⁻¹ A⁻¹ − G_M‖`` over the sample."""
    q = np.asarray(q, dtype=float).reshape(-1, fact.dim)
    Ai = np.linalg.inv(fact.A(q))
    R = np.swapaxes(Ai, 1, 2) @ np.linalg.inv(fact.mass(q)) @ Ai - fact.G_M
    return float(np.abs(R).max())


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


def _velocity_fn(fact, velocity):
    return fact.velocity if velocity is None else velocity


def canonical_jacobian(fact: MassFactorization, xmap: XMap, q, p, velocity=None, h: float = 1e-5):
    """Jacobian of ``Γ(q, p) = (x(q), v(q, p))``, shape ``(n, 2d, 2d)``.

    ``∂x/∂q`` is analytic, ``∂x/∂p = 0`` by construction, and the ``v``
    blocks use central differences.
    """
    vel = _velocity_fn(fact, velocity)
    d = fact.dim
    q, p = _pairs(q, p, d)
    n = q.shape[0]
    J = np.zeros((n, 2 * d, 2 * d))
    dx = xmap.derivative(q[:, 0] if d == 1 else q)
    J[:, :d, :d] = dx.reshape(n, d, d)
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        J[:, d:, k] = (vel(q + e, p) - vel(q - e, p)) / (2 * h)
        J[:, d:, d + k] = (vel(q, p + e) - vel(q, p - e)) / (2 * h)
    return J


def symplectic_form(d: int) -> np.ndarray:
    J = np.zeros((2 * d, 2 * d))
    J[:d, d:] = np.eye(d)
    J[d:, :d] = -np.eye(d)
    return J


def check_symplectic(fact: MassFactorization, xmap: XMap, q, p, velocity=None) -> float:
    """``max ‖∇Γᵀ J ∇Γ − J‖`` over the samples.

    Parameters
    ----------
    velocity : callable, optional
        Replacement for ``v(q, p) = A(q) p``, used for negative controls.
    """
    Jg = canonical_jacobian(fact, xmap, q, p, velocity)
    Js = symplectic_form(fact.dim)
    R = np.swapaxes(Jg, 1, 2) @ Js @ Jg - Js
    return float(np.abs(R).max())


def check_symmetry(fact: MassFactorization, xmap: XMap, q, p, velocity=None) -> float:
    """Largest antisymmetric part of ``A⁻¹ ∇_q v`` over the samples."""
    d = fact.dim
    q, p = _pairs(q, p, d)
    Jg = canonical_jacobian(fact, xmap, q, p, velocity)
    S = np.linalg.inv(fact.A(q)) @ Jg[:, d:, :d]
    return float(np.abs(S - np.swapaxes(S, 1, 2)).max())


def negative_controls(fact: MassFactorization) -> dict:
    """Velocity maps that must fail :func:`check_symplectic`.

    ``scaled``: ``v = 2 A p``. ``rotation`` (d >= 2): ``v = A p + R q`` with
    ``R`` antisymmetric, which breaks the symmetry condition. In one dimension,
    and for symmetric ``A`` in general, ``v = A p + q`` is still canonical, so
    it is not a valid negative control.
    """
    d = fact.dim
    out = {"scaled": lambda q, p: 2.0 * fact.velocity(q, p)}
    if d >= 2:
        R = np.zeros((d, d))
        R[0, 1], R[1, 0] = 1.0, -1.0
        out["rotation"] = lambda q, p: fact.velocity(q, p) + np.asarray(q).reshape(-1, d) @ R.T
    return out


# ---------------------------------------------------------------------------
# state maps
# ---------------------------------------------------------------------------


def transform_state(fact: MassFactorization, xmap: XMap, q, p):
    """``(q, p) -> (x, v)``."""
    q, p = _pairs(q, p, fact.dim)
    x = xmap.forward(q[:, 0]).reshape(-1, 1) if fact.dim == 1 else xmap.forward(q)
    return x, fact.velocity(q, p)


def inverse_transform_state(fact: MassFactorization, xmap: XMap, x, v):
    """``(x, v) -> (q, p)``."""
    x, v = _pairs(x, v, fact.dim)
    q = xmap.inverse(x[:, 0]).reshape(-1, 1) if fact.dim == 1 else xmap.inverse(x)
    return q, fact.momentum(q, v)


# ---------------------------------------------------------------------------
# overdamped limit in one dimension
# ---------------------------------------------------------------------------


def limit_drift_1d(w, sigma, beta: float, q):
    """Drift ``−w′/σ − σ′/(βσ²)`` and diffusion ``√(2/(βσ))`` of the limit.

    Parameters
    ----------
    w : ScalarPotential or callable
        Potential, or a callable returning ``w′(q)``.
    sigma : MatrixField or tuple of callables
        Friction ``σ``, or ``(σ, σ′)``.
    """
    q = np.asarray(q, dtype=float).ravel()
    dw = w.gradient(q[:, None])[:, 0] if hasattr(w, "gradient") else np.asarray(w(q), dtype=float)
    if isinstance(sigma, MatrixField):
        ev = sigma.evaluate(q[:, None])
        s = ev["value"].reshape(-1)
        ds = ev["derivative"].reshape(-1)
    else:
        s = np.asarray(sigma[0](q), dtype=float)
        ds = np.asarray(sigma[1](q), dtype=float)
    if np.any(s <= 0):
        raise ValidationError("friction must be positive")
    return -dw / s - ds / (beta * s * s), np.sqrt(2.0 / (beta * s))


# ---------------------------------------------------------------------------
# paired simulation in (q, p) and (x, v)
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _paired_paths(Q0, P0, dW, h, a, f, s, beta, pk, fpM, fpS, edges, cum, period, q0x,
                  nodes, weights, every, out_qp, out_xv, failed):
    """Euler–Maruyama in ``(q, p)`` and in ``(x, v)`` on the same increments.

    ``out_qp`` receives ``Γ(q, p)`` and ``out_xv`` the directly simulated
    ``(x, v)`` every ``every`` steps, both shape ``(n, n_out, 2)``.
    """
    n, n_steps = dW.shape
    for i in range(n):
        q = Q0[i]
        p = P0[i]
        x = _x_of_q(fpM, edges, cum, period, q, nodes, weights) - q0x
        v = p / math.sqrt(field1(fpM, q, 1)[0])
        out_qp[i, 0, 0] = x
        out_qp[i, 0, 1] = v
        out_xv[i, 0, 0] = x
        out_xv[i, 0, 1] = v
        qx = q
        for k in range(n_steps):
            w = dW[i, k]
            q, p = _ig._kin_step1(3, q, p, w, h, a, f, s, beta, pk, pk, fpM, fpS)
            # transformed equation, coefficients at q(x)
            m, dm = field1(fpM, qx, 1)
            sg = field1(fpS, qx, 1)[0]
            rm = math.sqrt(m)
            dE = pot_grad1(pk, qx) + 0.5 * dm / (beta * m)
            xn = x + h * a * v
            v = v - h * a * dE / rm - h * f * (sg / m) * v + s * math.sqrt(sg) / rm * w
            x = xn
            qx, it = _q_of_x(fpM, edges, cum, period, x + q0x, nodes, weights)
            if it < 0:
                failed[i] = True
            if (k + 1) % every == 0:
                j = (k + 1) // every
                out_qp[i, j, 0] = _x_of_q(fpM, edges, cum, period, q, nodes, weights) - q0x
                out_qp[i, j, 1] = p / math.sqrt(field1(fpM, q, 1)[0])
                out_xv[i, j, 0] = x
                out_xv[i, j, 1] = v


def _mass_parts(problem: ProblemSpec):
    if problem.family != "mass" or problem.domain.dim != 1:
        raise UnsupportedError("paired transform runs need a one-dimensional mass problem")
    return problem.fields["M"], problem.fields["Sigma"]


@dataclass
class ConsistencyResult:
    """Pathwise gap between the transformed (q, p) path and the direct (x, v) path."""

    dts: np.ndarray
    sup_diff: np.ndarray       # E sup_t |Γ(q_t, p_t) − (x_t, v_t)|
    shrink: np.ndarray         # sup_diff[k] / sup_diff[k + 1]
    n: int


def transform_consistency(problem: ProblemSpec, N: int = 2000, T: float = 1.0, dt: float = 2.0 ** -6,
                          levels: int = 4, lam: float = 4.0, seed: int = 0) -> ConsistencyResult:
    """Halve the step ``levels − 1`` times on one Brownian path and record the gap.

    The finest increments come from the counter-based stream; coarser levels
    use their ordered pairwise sums, so all levels see the same path.
    """
    mass, sig = _mass_parts(problem)
    fact, xm = factorize_1d(mass)
    a, f, s = _ig.speed_factors(lam, problem.beta, True)
    R = 2 ** (levels - 1)
    dt_min = dt / R
    n_steps = int(round(T / dt_min))
    _ig.check_stability(problem, dt, f)
    init = _ig.sample_gibbs(problem, N, seed).state
    k0, k1 = _ig.stream_key(seed, 7)
    seed64 = k0 | (k1 << 32)
    fine = _rng.normals(seed64, init.traj_ids, np.arange(n_steps), 1)[:, :, 0] * math.sqrt(dt_min)
    Q0 = np.ascontiguousarray(init.positions[:, 0])
    P0 = np.ascontiguousarray(init.momenta[:, 0])
    fp, edges, cum, period, q0x = xm.table
    dts, sup = [], []
    for lev in range(levels):
        g = 2 ** (levels - 1 - lev)
        dW = np.ascontiguousarray(fine.reshape(N, -1, g).sum(axis=2))
        h = dt_min * g
        every = max(1, dW.shape[1] // 16)
        n_out = dW.shape[1] // every + 1
        oq, ox = np.empty((N, n_out, 2)), np.empty((N, n_out, 2))
        failed = np.zeros(N, dtype=np.bool_)
        _paired_paths(Q0, P0, dW, h, a, f, s, problem.beta, problem.potential.pack, mass.pack, sig.pack,
                      edges, cum, period, q0x, _GL_NODES, _GL_WEIGHTS, every, oq, ox, failed)
        if failed.any():
            raise SolverError("x-map inversion failed during the paired run")
        diff = np.sqrt(np.sum((oq - ox) ** 2, axis=-1)).max(axis=1)
        dts.append(h)
        sup.append(float(diff.mean()))
    sup = np.array(sup)
    return ConsistencyResult(np.array(dts), sup, sup[:-1] / sup[1:], N)


def stationary_velocity_moment(problem: ProblemSpec, N: int = 20000, seed: int = 0) -> tuple[float, float]:
    """``E[v²]`` under the pushed-forward Gibbs measure and its standard error.

    Should equal ``G_M⁻¹/β``.
    """
    mass, _ = _mass_parts(problem)
    fact, xm = factorize_1d(mass)
    st = _ig.sample_gibbs(problem, N, seed).state
    _, v = transform_state(fact, xm, st.positions, st.momenta)
    v2 = v[:, 0] ** 2
    return float(v2.mean()), float(v2.std(ddof=1) / math.sqrt(N))


@dataclass
class MassIndependence:
    w1: float
    floor: float
    lam: float
    T: float
    n: int


def mass_independence(problem: ProblemSpec, mass_a: MatrixField, mass_b: MatrixField, *, lam: float = 64.0,
                      N: int = 20000, T: float = 1.0, dt: float | None = None, seed: int = 0,
                      threads: int = 1) -> MassIndependence:
    """``W₁`` between the time-``T`` position marginals for two masses with shared ``(V, σ)``.

    Both runs start from their own Gibbs measure and use the same seed. The
    resolution floor is the split-sample self-distance of the first run.
    """
    runs = []
    for m in (mass_a, mass_b):
        prob = problem.with_family("mass", {**problem.fields, "M": m})
        _, f, _ = _ig.speed_factors(lam, prob.beta, True)
        h = dt if dt is not None else _stable_dt(prob, f)
        st = _ig.sample_gibbs(prob, N, seed).state
        res = _ig.evolve(prob, st, h, int(round(T / h)), lam=lam, seed=seed, threads=threads)
        runs.append(res.state.positions[:, 0])
    L = problem.period
    w1 = wasserstein_alpha_1d(runs[0], runs[1], 1.0, period=L)
    floor = split_sample_floor(runs[0], 1.0, period=L, seed=seed)
    return MassIndependence(w1, floor, lam, T, N)


def _stable_dt(problem, f):
    """Largest power of two with ``h f γ_max <= STABILITY_CAP / 2``."""
    bound = _ig.friction_bound(problem)
    h = 2.0 ** math.floor(math.log2(0.5 * _ig.STABILITY_CAP / (f * bound)))
    return h
