import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kramerslab import cg
from kramerslab.errors import QuadratureError, ValidationError


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
def test_linear_cv_has_no_gap(c1, c2, z):
    cv = cg.CollectiveVariable.linear(c1, c2)
    avg = cg.level_set_average(cv, z=z)
    G = c1 * c1 + c2 * c2
    assert avg.A == pytest.approx(math.sqrt(G), rel=1e-12)
    assert abs(avg.a_xi - avg.A ** 2) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.6), st.floats(-2.0, 2.0))
def test_gap_is_conditional_variance(eps, z):
    for cv in (cg.CollectiveVariable.sine(eps), cg.CollectiveVariable.product(eps)):
        avg = cg.level_set_average(cv, z=z)
        assert avg.a_xi - avg.A ** 2 > 0
        assert avg.a_xi - avg.A ** 2 == pytest.approx(avg.var_root, rel=1e-8, abs=1e-14)


def test_small_eps_continuity():
    assert cg.effective_A(cg.CollectiveVariable.sine(1e-8), z=0.7) == pytest.approx(1.0, abs=1e-12)


def test_sine_family_matches_direct_quadrature():
    # ξ = q₁ + ε sin q₂, V = |q|²/2: on ξ = 0 the weight is exp(−(ε² sin² t + t²)/2), G = 1 + ε² cos² t
    eps = 0.3
    cv = cg.CollectiveVariable.sine(eps)
    avg = cg.level_set_average(cv, z=0.0)
    t = np.linspace(-12, 12, 200001)
    rho = np.exp(-0.5 * ((eps * np.sin(t)) ** 2 + t * t))
    G = 1 + eps ** 2 * np.cos(t) ** 2
    assert avg.a_xi == pytest.approx(np.sum(rho * G) / np.sum(rho), rel=1e-10)


@pytest.mark.parametrize("family", ["sine", "product"])
def test_quadrature_matches_slab_monte_carlo(family):
    cv = cg.CollectiveVariable(family, (0.3,))
    z = 0.5
    est = cg.slab_average(cv, z, N=2_000_000, seed=1)
    exact = cg.effective_A(cv, z=z)
    assert est.extrapolated == pytest.approx(exact, rel=0.01)


def test_commutativity_gap_tables():
    lin = cg.commutativity_gap(cg.CollectiveVariable.linear(1.0, 0.0))
    assert lin.max_gap <= 1e-10
    curved = cg.commutativity_gap(cg.CollectiveVariable.sine(0.3))
    assert curved.max_gap > 10 * cg.QUAD_TOL
    assert len(curved.rows()) == 9 and len(curved.rows()[0]) == len(cg.GapTable.HEADER)


def test_gap_sweep_slopes():
    eps = [0.025, 0.05, 0.1, 0.2]
    # product family: Var(|∇ξ|) has an O(ε²) term from the q₁ cos q₂ factor
    assert cg.gap_sweep("product", eps).slope == pytest.approx(2.0, abs=0.1)
    # sine family: |∇ξ| = sqrt(1 + ε² cos² q₂), so the variance is O(ε⁴)
    assert cg.gap_sweep("sine", eps).slope == pytest.approx(4.0, abs=0.1)


def test_free_energy_linear_is_quadratic():
    z = np.linspace(-1.5, 1.5, 7)
    F = cg.free_energy(cg.CollectiveVariable.linear(1.0, 0.0), z_grid=z)
    np.testing.assert_allclose(F, 0.5 * z ** 2, atol=1e-10)


def test_invalid_variables():
    with pytest.raises(ValidationError):
        cg.CollectiveVariable.linear(0.0, 1.0)
    with pytest.raises(ValidationError):
        cg.CollectiveVariable.product(1.5)
    with pytest.raises(ValidationError):
        cg.CollectiveVariable("spiral", (1.0,))


def test_quadrature_failure_raises():
    with pytest.raises(QuadratureError):
        cg.level_set_average(cg.CollectiveVariable.sine(0.3), z=0.0, tol=1e-30, max_panels=32)

