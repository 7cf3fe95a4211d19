import math

import numpy as np
import pytest
from scipy.integrate import quad

from kramerslab import transform as tr
from kramerslab.model import Domain, MatrixField, ScalarPotential, default_problem, sine_field


@pytest.fixture(scope="module")
def sine_mass():
    return tr.factorize_1d(sine_field(2.0, 1.0))


def test_constant_mass_is_linear():
    fact, xm = tr.factorize_1d(MatrixField.constant(4.0))
    q = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(xm.forward(q), 2 * q, atol=1e-13)


def test_period_matches_adaptive_quadrature(sine_mass):
    _, xm = sine_mass
    ref, _ = quad(lambda t: math.sqrt(2 + math.sin(t)), 0, 2 * math.pi, epsabs=1e-13, epsrel=1e-13, limit=200)
    assert xm.period_out == pytest.approx(ref, abs=1e-10)
    assert xm.forward(np.array([2 * math.pi]))[0] - xm.forward(np.array([0.0]))[0] == pytest.approx(ref, abs=1e-10)


def test_inverse_round_trip(sine_mass):
    _, xm = sine_mass
    q = np.linspace(-20, 20, 1000)
    assert np.max(np.abs(xm.inverse(xm.forward(q)) - q)) <= 1e-9


def test_derivative_is_root_mass(sine_mass):
    _, xm = sine_mass
    q = np.linspace(0, 6, 13)
    h = 1e-6
    fd = (xm.forward(q + h) - xm.forward(q - h)) / (2 * h)
    np.testing.assert_allclose(xm.derivative(q), np.sqrt(2 + np.sin(q)), rtol=1e-13)
    np.testing.assert_allclose(fd, xm.derivative(q), rtol=1e-8)


def test_factorization_residual(sine_mass):
    fact, _ = sine_mass
    assert tr.factorization_residual(fact, np.linspace(0, 6, 50)) < 1e-13
    f2, _ = tr.hessian_family()
    assert tr.factorization_residual(f2, np.random.default_rng(0).standard_normal((50, 2))) < 1e-12


def test_state_map_example():
    fact, xm = tr.factorize_1d(MatrixField.constant(4.0))
    _, v = tr.transform_state(fact, xm, [0.0], [1.0])
    assert v[0, 0] == pytest.approx(0.5)


def test_state_round_trip(sine_mass):
    fact, xm = sine_mass
    g = np.random.default_rng(1)
    q, p = g.uniform(-10, 10, 200), g.standard_normal(200)
    x, v = tr.transform_state(fact, xm, q, p)
    q2, p2 = tr.inverse_transform_state(fact, xm, x, v)
    assert np.max(np.abs(q2[:, 0] - q)) <= 1e-9 and np.max(np.abs(p2[:, 0] - p)) <= 1e-9


def test_symplectic_constant_and_curved(sine_mass):
    g = np.random.default_rng(2)
    const = tr.factorize_1d(MatrixField.constant(3.0))
    q, p = g.uniform(0, 6, 1000), g.standard_normal(1000)
    assert tr.check_symplectic(*const, q, p) <= 1e-10
    assert tr.check_symplectic(*sine_mass, q, p) <= 1e-8


def test_symplectic_two_dimensional_family():
    fact, xm = tr.hessian_family()
    g = np.random.default_rng(3)
    q, p = g.standard_normal((1000, 2)), g.standard_normal((1000, 2))
    assert tr.check_symplectic(fact, xm, q, p) <= 1e-8
    assert tr.check_symmetry(fact, xm, q, p) <= 1e-8


def test_gradient_map_inverse():
    _, xm = tr.hessian_family()
    q = np.random.default_rng(4).standard_normal((100, 2))
    np.testing.assert_allclose(xm.inverse(xm.forward(q)), q, atol=1e-10)


def test_negative_controls_fail(sine_mass):
    g = np.random.default_rng(5)
    for fact, xm, q, p in ((*sine_mass, g.uniform(0, 6, 100), g.standard_normal(100)),
                           (*tr.hessian_family(), g.standard_normal((100, 2)), g.standard_normal((100, 2)))):
        for name, vel in tr.negative_controls(fact).items():
            assert tr.check_symplectic(fact, xm, q, p, vel) > 1e-2, name


def test_additive_shift_is_canonical_in_one_dimension(sine_mass):
    # v = A p + q changes only the lower-left Jacobian block, which is harmless in 1D
    fact, xm = sine_mass
    q, p = np.linspace(0, 6, 20), np.linspace(-1, 1, 20)
    vel = lambda qq, pp: fact.velocity(qq, pp) + np.asarray(qq).reshape(-1, 1)
    assert tr.check_symplectic(fact, xm, q, p, vel) < 1e-8


def test_limit_drift_examples():
    q = np.array([math.pi / 2])
    sig = MatrixField.diagonal(1.0, 0.5)
    drift, diff = tr.limit_drift_1d(lambda x: np.zeros_like(x), sig, 1.0, q)
    assert drift[0] == pytest.approx(0.5, rel=1e-12)
    assert diff[0] == pytest.approx(math.sqrt(2.0))
    V = ScalarPotential.cosine(Domain.torus(1))
    x = np.linspace(0, 6, 9)
    drift, diff = tr.limit_drift_1d(V, (np.ones_like, np.zeros_like), 1.0, x)
    np.testing.assert_allclose(drift, np.sin(x), atol=1e-14)


def test_limit_drift_matches_overdamped_form():
    # D = 1/σ: −D w′ + (1/β) D′ with D′ = −σ′/σ²
    V = ScalarPotential.cosine(Domain.torus(1))
    sig = MatrixField.diagonal(1.0, 0.5)
    x = np.linspace(0, 6, 9)
    s = 1 + 0.5 * np.cos(x)
    ds = -0.5 * np.sin(x)
    drift, _ = tr.limit_drift_1d(V, sig, 2.0, x)
    np.testing.assert_allclose(drift, -(1 / s) * (-np.sin(x)) + (-ds / s ** 2) / 2.0, atol=1e-14)


def test_stationary_velocity_variance():
    m, se = tr.stationary_velocity_moment(default_problem("mass"), N=20000)
    assert abs(m - 1.0) <= 3 * se


def test_transform_consistency_shrinks():
    res = tr.transform_consistency(default_problem("mass"), N=200, levels=3)
    assert np.all(res.shrink > 1.2)
    assert np.all(np.diff(res.sup_diff) < 0)
