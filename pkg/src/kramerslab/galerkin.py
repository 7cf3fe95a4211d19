"""Spectral Galerkin discretization of kinetic generators on ``L𝕋 × ℝ``.

The position factor is a trigonometric basis orthonormalized in ``L²(ν)`` by
a Cholesky factor of its Gram matrix; the momentum factor is the normalized
Hermite basis of ``κ = N(0, M/β)``. In this tensor basis

* ``∂_q`` is exact on the trigonometric span and ``∂_q* = ∂_qᵀ``,
* ``∂_p h_n = (√n / s) h_{n−1}`` and ``∂_p* h_n = (√(n+1) / s) h_{n+1}``
  with ``s = √(M/β)``,
* a multiplication operator ``f(q)`` is the ν-weighted Gram matrix of ``f``,

so the generator ``𝓛_λ = (1/β)(∂_p*∂_q − ∂_q*∂_p) − (λ/β) ∂_p* D⁻¹ ∂_p``
is assembled from Kronecker products of small dense blocks. Position
integrals use the trapezoid rule on a uniform grid, i.e. the discrete
Fourier transform, which is spectrally accurate for these periodic
integrands.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import QuadratureError, SolverError, UnsupportedError, ValidationError
from .model import ProblemSpec

RESIDUAL_TOL = 1e-9
REFINE_TOL = 0.01
DEFAULT_LAMBDAS = tuple(float(2.0 ** k) for k in range(9))


# ---------------------------------------------------------------------------
# basis
# ---------------------------------------------------------------------------


@dataclass
class SpectralBasis:
    """Tensor basis ``φ_a(q) h_n(p)``, position index major.

    Attributes
    ----------
    K : int
        Highest Fourier mode; the position factor has ``2K + 1`` functions.
    n_hermite : int
        Highest Hermite degree ``N_h``; the momentum factor has ``N_h + 1``.
    C : ndarray
        Coefficients of ``φ`` in the raw basis ``[1, cos ωq, sin ωq, …]``.
    Qd : ndarray
        Matrix of ``∂_q``: ``Qd[a, b] = ⟨φ_a, ∂_q φ_b⟩_ν``.
    Pd : ndarray
        Matrix of ``∂_p``: ``Pd[n, m] = ⟨h_n, ∂_p h_m⟩_κ``.
    """

    K: int
    n_hermite: int
    beta: float
    mass: float
    length: float
    grid: np.ndarray
    weights: np.ndarray       # ν quadrature weights on the grid
    raw: np.ndarray           # raw trigonometric basis on the grid, (n_grid, 2K+1)
    C: np.ndarray
    Qd: np.ndarray
    Pd: np.ndarray
    gram_error: float = field(default=0.0)

    @property
    def n_pos(self) -> int:
        return 2 * self.K + 1

    @property
    def n_mom(self) -> int:
        return self.n_hermite + 1

    @property
    def size(self) -> int:
        return self.n_pos * self.n_mom

    @property
    def scale(self) -> float:
        return math.sqrt(self.mass / self.beta)

    def position_values(self) -> np.ndarray:
        """``φ_a`` on the quadrature grid, shape ``(n_grid, 2K+1)``."""
        return self.raw @ self.C

    def multiplication(self, values) -> np.ndarray:
        """Matrix of multiplication by ``f`` given on the grid."""
        phi = self.position_values()
        return phi.T @ (phi * (self.weights * np.asarray(values, dtype=float))[:, None])

    def project_position(self, values) -> np.ndarray:
        """Coefficients ``⟨φ_a, f⟩_ν``."""
        return self.position_values().T @ (self.weights * np.asarray(values, dtype=float))

    def hermite(self, p) -> np.ndarray:
        """``h_n(p)`` for ``n = 0..N_h``, shape ``(len(p), N_h + 1)``."""
        x = np.asarray(p, dtype=float).ravel() / self.scale
        H = np.empty((x.size, self.n_mom))
        H[:, 0] = 1.0
        if self.n_hermite >= 1:
            H[:, 1] = x
        for n in range(1, self.n_hermite):
            H[:, n + 1] = (x * H[:, n] - math.sqrt(n) * H[:, n - 1]) / math.sqrt(n + 1)
        return H

    def evaluate(self, coef, q, p) -> np.ndarray:
        """Evaluate ``Σ c_{a n} φ_a(q) h_n(p)`` at paired points."""
        q = np.asarray(q, dtype=float).ravel()
        w = 2 * math.pi / self.length
        cols = [np.ones_like(q)]
        for k in range(1, self.K + 1):
            cols += [np.cos(k * w * q), np.sin(k * w * q)]
        phi = np.column_stack(cols) @ self.C
        c = np.asarray(coef, dtype=float).reshape(self.n_pos, self.n_mom)
        return np.einsum("ia,an,in->i", phi, c, self.hermite(p))

    def hermite_gram_error(self, order: int | None = None) -> float:
        """``max |⟨h_n, h_m⟩_κ − δ_nm|`` by Gauss–Hermite quadrature."""
        x, w = np.polynomial.hermite_e.hermegauss(order or self.n_mom + 4)
        H = self.hermite(x * self.scale)
        G = H.T @ (H * (w / math.sqrt(2 * math.pi))[:, None])
        return float(np.abs(G - np.eye(self.n_mom)).max())


def _raw_basis(q, K, length):
    w = 2 * math.pi / length
    cols = [np.ones_like(q)]
    dcols = np.zeros((2 * K + 1, 2 * K + 1))
    for k in range(1, K + 1):
        cols += [np.cos(k * w * q), np.sin(k * w * q)]
        c, s = 2 * k - 1, 2 * k
        dcols[s, c] = -k * w   # ∂ cos = −kω sin
        dcols[c, s] = k * w    # ∂ sin = kω cos
    return np.column_stack(cols), dcols


def build_basis(problem: ProblemSpec, K: int = 32, n_hermite: int = 40, n_grid: int | None = None,
                gram_tol: float = 1e-10) -> SpectralBasis:
    """Orthonormal tensor basis for a one-dimensional torus problem with quadratic ``U``."""
    dom = problem.domain
    if dom.dim != 1 or not dom.is_torus:
        raise UnsupportedError("spectral solves need a one-dimensional torus")
    Mq = problem.kinetic.quadratic_mass
    if Mq is None:
        raise UnsupportedError("spectral solves need a quadratic kinetic energy")
    L = dom.length
    n_grid = n_grid or max(1024, 16 * K)
    q = np.arange(n_grid) * (L / n_grid)
    V = problem.potential.value(q[:, None])
    w = np.exp(-problem.beta * (V - V.min()))
    w /= w.sum()
    E, De = _raw_basis(q, K, L)
    G = E.T @ (E * w[:, None])
    Lc = np.linalg.cholesky(G)
    C = sla.solve_triangular(Lc, np.eye(G.shape[0]), lower=True).T   # L^{-T}
    phi = E @ C
    err = float(np.abs(phi.T @ (phi * w[:, None]) - np.eye(G.shape[0])).max())
    if err > gram_tol:
        raise QuadratureError(f"position Gram matrix off identity by {err:.1e}")
    Qd = Lc.T @ De @ C
    s = math.sqrt(float(np.atleast_2d(Mq)[0, 0]) / problem.beta)
    n = np.arange(1, n_hermite + 1)
    Pd = np.zeros((n_hermite + 1, n_hermite + 1))
    Pd[n - 1, n] = np.sqrt(n) / s
    return SpectralBasis(K, n_hermite, problem.beta, float(np.atleast_2d(Mq)[0, 0]), L, q, w, E, C, Qd, Pd, err)


# ---------------------------------------------------------------------------
# generators and right-hand sides
# ---------------------------------------------------------------------------


@dataclass
class Generator:
    """``𝓛_λ = 𝓐 + λ𝓢`` in a spectral basis."""

    basis: SpectralBasis
    lam: float
    A: sp.csr_matrix
    S: sp.csr_matrix
    kind: str

    @property
    def matrix(self) -> sp.csr_matrix:
        return (self.A + self.lam * self.S).tocsr()


def _field_on_grid(problem, role, basis, power=1):
    ev = problem.fields[role].evaluate(basis.grid[:, None], power)
    return ev["value"].reshape(-1), ev["derivative"].reshape(-1)


def _blocks(problem, basis, kind):
    Qd, Pd = basis.Qd, basis.Pd
    b = problem.beta
    I = np.eye(basis.n_pos)
    PtP = Pd.T @ Pd
    if kind == "kinetic":
        Dinv = basis.multiplication(1.0 / _field_on_grid(problem, "D", basis)[0])
        A = (np.kron(Qd, Pd.T) - np.kron(Qd.T, Pd)) / b
        S = -np.kron(Dinv, PtP) / b
    else:
        GA = basis.multiplication(_field_on_grid(problem, "A", basis)[0])
        A = (np.kron(GA @ Qd, Pd.T) - np.kron(Qd.T @ GA, Pd)) / b
        S = -np.kron(I, PtP) / b
    return A, S


def _kind(problem):
    if problem.family in ("underdamped", "overdamped"):
        return "kinetic"
    if problem.family == "cg":
        return "cg"
    raise UnsupportedError(f"no spectral generator for the {problem.family} family")


def assemble_generator(problem: ProblemSpec, basis: SpectralBasis, lam: float, *, tol: float = 1e-9) -> Generator:
    """Sparse matrix of ``𝓐 + λ𝓢``.

    For underdamped problems ``𝓢 = −β⁻¹ ∂_p* D⁻¹ ∂_p``; for the coarse-grained
    model ``𝓐 = β⁻¹(∂_v* A ∂_z − ∂_z* A ∂_v)`` and ``𝓢 = −β⁻¹ ∂_v*∂_v``.
    Antisymmetry of ``𝓐`` and symmetry of ``𝓢`` are verified to ``tol``.
    """
    if lam <= 0:
        raise ValidationError("lambda must be positive")
    kind = _kind(problem)
    A, S = _blocks(problem, basis, kind)
    scale = max(1.0, np.abs(A).max(), np.abs(S).max())
    if np.abs(A + A.T).max() > tol * scale:
        raise SolverError("transport block is not antisymmetric")
    if np.abs(S - S.T).max() > tol * scale:
        raise SolverError("dissipative block is not symmetric")
    drop = 1e-15 * scale
    A[np.abs(A) < drop] = 0.0
    S[np.abs(S) < drop] = 0.0
    return Generator(basis, float(lam), sp.csr_matrix(A), sp.csr_matrix(S), kind)


def assemble_psi(problem: ProblemSpec, basis: SpectralBasis) -> np.ndarray:
    """Coefficients of the corrector right-hand side.

    Underdamped: ``ψ = D′(q)(p²/M − 1/β) = D′(q) (√2/β) h₂(p)``.
    Coarse-grained: ``ψ = A A′(z) (v² − 1/β)`` with unit mass.
    Both lie in ``(Id − Π₀) L²₀(μ)``: the fibre average over ``κ`` vanishes.
    """
    kind = _kind(problem)
    if kind == "kinetic":
        _, dD = _field_on_grid(problem, "D", basis)
        f = dD
    else:
        a, da = _field_on_grid(problem, "A", basis)
        f = a * da
    if basis.n_hermite < 2:
        raise ValidationError("need at least Hermite degree 2")
    c = np.zeros((basis.n_pos, basis.n_mom))
    c[:, 2] = basis.project_position(f) * math.sqrt(2.0) / basis.beta
    return c.ravel()


def pi0_block(basis: SpectralBasis, coef) -> np.ndarray:
    """Hermite-degree-0 block: coefficients of the κ-average ``Π₀f``."""
    return np.asarray(coef).reshape(basis.n_pos, basis.n_mom)[:, 0].copy()


# ---------------------------------------------------------------------------
# Poisson solves
# ---------------------------------------------------------------------------


@dataclass
class PoissonSolution:
    coef: np.ndarray
    residual: float          # ‖𝓛Φ − ψ‖ / ‖ψ‖
    norm: float              # ‖Φ‖_{L²(μ)}
    grad_p_norm: float       # ‖∂_pΦ‖_{L²(μ)}
    pairing: float           # ⟨ψ, Φ⟩
    dissipation: float       # (λ/β) ⟨∂_pΦ, D⁻¹ ∂_pΦ⟩ (kinetic) or (λ/β)‖∂_vΦ‖² (cg)
    method: str


def solve_poisson(gen: Generator, psi, *, tol: float = RESIDUAL_TOL) -> PoissonSolution:
    """Solve ``𝓛_λ Φ = ψ`` on the mean-zero subspace.

    The constant mode (index 0) is removed from rows and columns; since
    ``𝓛 1 = 0`` and ``𝓛* 1 = 0`` this is exact. A sparse LU factorization is
    tried first, then GMRES preconditioned by it; if the relative residual
    still exceeds ``tol`` a :class:`SolverError` suggests a larger basis.
    """
    psi = np.asarray(psi, dtype=float)
    B = gen.basis
    if abs(psi[0]) > 1e-10 * max(1.0, np.linalg.norm(psi)):
        raise ValidationError("right-hand side is not mean-zero")
    nrm = np.linalg.norm(psi)
    L = gen.matrix
    Lr = L[1:, 1:].tocsc()
    rhs = psi[1:]
    coef = np.zeros_like(psi)
    if nrm == 0:
        return PoissonSolution(coef, 0.0, 0.0, 0.0, 0.0, 0.0, "trivial")
    lu = spla.splu(Lr)
    x = lu.solve(rhs)
    method = "splu"
    res = np.linalg.norm(Lr @ x - rhs) / nrm
    if res > tol:
        M = spla.LinearOperator(Lr.shape, lu.solve)
        x, _ = spla.gmres(Lr, rhs, x0=x, M=M, rtol=tol * 1e-2, atol=0.0, maxiter=50)
        method = "splu+gmres"
        res = np.linalg.norm(Lr @ x - rhs) / nrm
        if res > tol:
            raise SolverError(f"Poisson residual {res:.1e} above {tol:.0e}; increase K or the Hermite degree")
    coef[1:] = x
    res = float(np.linalg.norm(L @ coef - psi) / nrm)
    c = coef.reshape(B.n_pos, B.n_mom)
    dp = (c @ B.Pd.T)
    pairing = float(psi @ coef)
    diss = float(-(coef @ (gen.lam * (gen.S @ coef))))
    return PoissonSolution(coef, res, float(np.linalg.norm(coef)), float(np.linalg.norm(dp)), pairing, diss, method)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


SWEEP_HEADER = ["lambda", "norm", "grad_p_norm", "residual", "norm_refined", "grad_p_refined", "converged"]


@dataclass
class SweepTable:
    lambdas: np.ndarray
    norm: np.ndarray
    grad_p_norm: np.ndarray
    residual: np.ndarray
    norm_refined: np.ndarray
    grad_p_refined: np.ndarray
    converged: np.ndarray
    kind: str

    @property
    def ratio(self) -> float:
        return float(self.norm.max() / self.norm.min())

    @property
    def grad_slope(self) -> float:
        return float(np.polyfit(np.log(self.lambdas), np.log(self.grad_p_norm), 1)[0])

    @property
    def norm_slope(self) -> float:
        return float(np.polyfit(np.log(self.lambdas), np.log(self.norm), 1)[0])

    def rows(self) -> list[list]:
        return [[l, a, b, r, ar, br, bool(c)] for l, a, b, r, ar, br, c in
                zip(self.lambdas, self.norm, self.grad_p_norm, self.residual, self.norm_refined,
                    self.grad_p_refined, self.converged)]


def hypocoercivity_sweep(problem: ProblemSpec, lambdas: Sequence[float] = DEFAULT_LAMBDAS, *, K: int = 32,
                         n_hermite: int = 40, refine: int = 8, psi=None) -> SweepTable:
    """Norms of the Poisson solution across ``λ`` with a basis-refinement check.

    Each ``λ`` is solved at ``(K, N_h)`` and at ``(K + refine, N_h + refine)``;
    ``converged`` flags a relative change of both norms within 1%.
    """
    lam = np.asarray(lambdas, dtype=float)
    if np.any(lam <= 0):
        raise ValidationError("lambdas must be positive")
    out = []
    for KK, NN in ((K, n_hermite), (K + refine, n_hermite + refine)):
        B = build_basis(problem, KK, NN)
        rhs = assemble_psi(problem, B) if psi is None else psi(B)
        gen = assemble_generator(problem, B, 1.0)
        sols = []
        for l in lam:
            gen.lam = float(l)
            sols.append(solve_poisson(gen, rhs))
        out.append(sols)
    base, fine = out
    n0 = np.array([s.norm for s in base])
    g0 = np.array([s.grad_p_norm for s in base])
    n1 = np.array([s.norm for s in fine])
    g1 = np.array([s.grad_p_norm for s in fine])
    conv = (np.abs(n1 - n0) <= REFINE_TOL * n1) & (np.abs(g1 - g0) <= REFINE_TOL * g1)
    return SweepTable(lam, n0, g0, np.array([s.residual for s in base]), n1, g1, conv, _kind(problem))


# ---------------------------------------------------------------------------
# matrix dump
# ---------------------------------------------------------------------------

TRIPLET_MAGIC = "# kramerslab sparse triplet v1"


def write_triplets(path, matrix) -> None:
    """Write ``row col value`` lines after a two-line header (magic, ``n_rows n_cols nnz``)."""
    M = sp.coo_matrix(matrix)
    order = np.lexsort((M.col, M.row))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"{TRIPLET_MAGIC}\n{M.shape[0]} {M.shape[1]} {M.nnz}\n")
        for k in order:
            fh.write(f"{M.row[k]} {M.col[k]} {M.data[k]:.17g}\n")


def read_triplets(path) -> sp.csr_matrix:
    with open(path, encoding="ascii") as fh:
        if fh.readline().rstrip("\n") != TRIPLET_MAGIC:
            raise ValidationError("not a sparse triplet file")
        n, m, nnz = (int(v) for v in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
    if data.shape[0] != nnz:
        raise ValidationError("triplet count does not match the header")
    return sp.csr_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=(n, m))
