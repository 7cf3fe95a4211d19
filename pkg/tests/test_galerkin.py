import math

import numpy as np
import pytest

from kramerslab import galerkin as gk
from kramerslab.errors import UnsupportedError, ValidationError
from kramerslab.model import (Domain, KineticEnergy, MatrixField, ProblemSpec, ScalarPotential, default_problem,
                              sine_field)


def _flat(D=None, beta=1.0):
    dom = Domain.torus(1)
    return ProblemSpec(dom, ScalarPotential(dom, []), KineticEnergy.quadratic(1.0), beta, "underdamped",
                       {"D": D or MatrixField.constant(1.0)})


@pytest.fixture(scope="module")
def small():
    prob = default_problem("underdamped")
    return prob, gk.build_basis(prob, 8, 12)


def test_basis_orthonormal(small):
    _, B = small
    assert B.gram_error < 1e-12
    assert B.hermite_gram_error() < 1e-12


def test_derivative_matrices_match_grid(small):
    _, B = small
    phi = B.position_values()
    h = 1e-6
    # ∂_q of each basis function, projected back, must reproduce Qd
    w = 2 * math.pi / B.length
    cols = []
    for k in range(1, B.K + 1):
        cols += [-k * w * np.sin(k * w * B.grid), k * w * np.cos(k * w * B.grid)]
    dE = np.column_stack([np.zeros_like(B.grid)] + cols)
    dphi = dE @ B.C
    Qd = phi.T @ (dphi * B.weights[:, None])
    np.testing.assert_allclose(Qd, B.Qd, atol=1e-11)
    p = np.linspace(-2, 2, 5)
    H = B.hermite(p)
    dH = (B.hermite(p + h) - B.hermite(p - h)) / (2 * h)
    np.testing.assert_allclose(dH, H @ B.Pd, atol=1e-6)


def test_ou_dissipative_part_is_number_operator():
    prob = _flat()
    B = gk.build_basis(prob, 2, 6)
    gen = gk.assemble_generator(prob, B, 1.0)
    S = gen.S.toarray()
    expected = -np.kron(np.eye(B.n_pos), np.diag(np.arange(B.n_mom)))
    np.testing.assert_allclose(S, expected, atol=1e-12)


@pytest.mark.parametrize("family", ["underdamped", "cg"])
def test_generator_structure(family):
    prob = default_problem(family)
    B = gk.build_basis(prob, 6, 10)
    gen = gk.assemble_generator(prob, B, 3.0)
    A, S = gen.A.toarray(), gen.S.toarray()
    assert np.abs(A + A.T).max() < 1e-10
    assert np.abs(S - S.T).max() < 1e-10
    g = np.random.default_rng(0)
    for _ in range(20):
        f = g.standard_normal(B.size)
        assert f @ (gen.matrix @ f) <= 1e-10
    # constants are in the kernel of the generator and of its adjoint
    e0 = np.zeros(B.size)
    e0[0] = 1.0
    assert np.abs(gen.matrix @ e0).max() < 1e-10
    assert np.abs(gen.matrix.T @ e0).max() < 1e-10


def test_generator_matches_pointwise_action():
    # f = p sin q on the default problem (β = M = 1): 𝓛f = p ∂_q f − V′ ∂_p f − λ D⁻¹ p ∂_p f
    prob = default_problem("underdamped")
    B = gk.build_basis(prob, 20, 6)
    gen = gk.assemble_generator(prob, B, 2.0)
    q = B.grid
    c = np.zeros((B.n_pos, B.n_mom))
    c[:, 1] = B.project_position(np.sin(q))
    Lc = (gen.matrix @ c.ravel())
    qs = np.array([0.3, 1.7, 4.0])
    ps = np.array([0.5, -1.2, 2.0])
    D = 2 + np.sin(qs)
    exact = ps * ps * np.cos(qs) - (-np.sin(qs)) * np.sin(qs) - 2.0 * ps * np.sin(qs) / D
    np.testing.assert_allclose(B.evaluate(Lc, qs, ps), exact, atol=1e-6)


def test_psi_has_zero_momentum_average(small):
    prob, B = small
    psi = gk.assemble_psi(prob, B)
    assert np.all(gk.pi0_block(B, psi) == 0)
    qs = np.array([0.5, 2.0])
    ps = np.array([1.3, -0.4])
    np.testing.assert_allclose(B.evaluate(psi, qs, ps), np.cos(qs) * (ps ** 2 - 1), atol=1e-10)


@pytest.mark.parametrize("family", ["underdamped", "cg"])
def test_poisson_energy_identity(family):
    prob = default_problem(family)
    B = gk.build_basis(prob, 8, 14)
    gen = gk.assemble_generator(prob, B, 4.0)
    sol = gk.solve_poisson(gen, gk.assemble_psi(prob, B))
    assert sol.residual < 1e-9
    # ⟨ψ, Φ⟩ = ⟨𝓛Φ, Φ⟩ = −λ dissipation
    assert sol.pairing == pytest.approx(-sol.dissipation, rel=1e-8)


def test_poisson_rejects_non_centered_rhs(small):
    prob, B = small
    gen = gk.assemble_generator(prob, B, 1.0)
    rhs = np.zeros(B.size)
    rhs[0] = 1.0
    with pytest.raises(ValidationError):
        gk.solve_poisson(gen, rhs)


def test_large_lambda_gradient_decay():
    # for ψ in the degree-2 Hermite sector, 𝓢 dominates at large λ and Φ ≈ ψ / (λ 𝓢)
    prob = default_problem("underdamped")
    tab = gk.hypocoercivity_sweep(prob, [16.0, 64.0, 256.0], K=8, n_hermite=12, refine=4)
    assert np.all(tab.residual < 1e-9)
    assert tab.grad_slope == pytest.approx(-1.0, abs=0.1)


def test_euclidean_problem_unsupported():
    dom = Domain.euclidean(1)
    prob = ProblemSpec(dom, ScalarPotential.quadratic(dom, 1.0), KineticEnergy.quadratic(1.0), 1.0, "underdamped",
                       {"D": sine_field(2.0, 1.0)})
    with pytest.raises(UnsupportedError):
        gk.build_basis(prob, 4, 4)


def test_triplet_round_trip(tmp_path, small):
    prob, B = small
    M = gk.assemble_generator(prob, B, 2.0).matrix
    gk.write_triplets(tmp_path / "L.txt", M)
    back = gk.read_triplets(tmp_path / "L.txt")
    assert (back != M).nnz == 0
    (tmp_path / "bad.txt").write_text("nope\n")
    with pytest.raises(ValidationError):
        gk.read_triplets(tmp_path / "bad.txt")
