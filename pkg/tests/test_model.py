import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numba import njit

from kramerslab import model as m
from kramerslab.errors import AssumptionError, ConfigurationError, NotSPDError, ValidationError


@njit
def _grad1_all(pk, xs):
    out = np.empty(xs.size)
    for i in range(xs.size):
        out[i] = m.pot_grad1(pk, xs[i])
    return out


@njit
def _field1_all(fp, xs, power):
    g = np.empty(xs.size)
    dg = np.empty(xs.size)
    for i in range(xs.size):
        g[i], dg[i] = m.field1(fp, xs[i], power)
    return g, dg


def test_cosine_potential_values():
    V = m.ScalarPotential.cosine(m.Domain.torus(1))
    q = np.array([[0.0], [math.pi / 2], [math.pi]])
    np.testing.assert_allclose(V.value(q), [1, 0, -1], atol=1e-15)
    np.testing.assert_allclose(V.gradient(q)[:, 0], [0, -1, 0], atol=1e-15)
    assert V.gradient_lipschitz == pytest.approx(1.0)


def test_gradients_match_finite_differences():
    dom = m.Domain.euclidean(2)
    V = m.ScalarPotential(dom, [m.PotentialTerm("quadratic", {"matrix": [[2.0, 0.5], [0.5, 1.0]]}),
                                m.PotentialTerm("double_well", {"scale": 0.3}),
                                m.PotentialTerm("plane_wave", {"amplitude": 0.7, "wavevector": [1, 2]})])
    assert m.check_gradient_fd(V) < 1e-7


def test_double_well_is_flagged_non_lipschitz():
    dom = m.Domain.euclidean(1)
    V = m.ScalarPotential(dom, [m.PotentialTerm("double_well", {"scale": 1.0})])
    assert not math.isfinite(V.gradient_lipschitz)
    fields = {"D": m.MatrixField.constant([[1.0]])}
    with pytest.raises(AssumptionError):
        m.ProblemSpec(dom, V, m.KineticEnergy.quadratic(1.0), 1.0, "overdamped", fields)
    m.ProblemSpec(dom, V, m.KineticEnergy.quadratic(1.0), 1.0, "overdamped", fields, strict=False)


def test_polynomial_terms_rejected_on_torus():
    with pytest.raises(ValidationError):
        m.ScalarPotential.quadratic(m.Domain.torus(1), 1.0)


@pytest.mark.parametrize("power", [1, 2, -1])
def test_field_derivative_matches_fd(power):
    f = m.MatrixField.diagonal([2.0, 3.0], [1.0, -0.5], [0.3, 1.0], dim=2)
    assert m.check_field_fd(f, m.Domain.torus(2), power=power) < 1e-7
    g = m.MatrixField.conformal(3.0, [1.0, 0.5], dim=2)
    assert m.check_field_fd(g, m.Domain.torus(2), power=power) < 1e-7


def test_field_derived_quantities_consistent():
    f = m.MatrixField.conformal(3.0, [1.0, 0.5], dim=2)
    ev = f.evaluate(np.random.default_rng(0).uniform(0, 6, (20, 2)))
    eye = np.eye(2)
    np.testing.assert_allclose(ev["value"] @ ev["inv"], np.broadcast_to(eye, (20, 2, 2)), atol=1e-13)
    np.testing.assert_allclose(ev["sqrt"] @ ev["sqrt"], ev["value"], atol=1e-13)
    np.testing.assert_allclose(ev["invsqrt"] @ ev["value"] @ ev["invsqrt"], np.broadcast_to(eye, (20, 2, 2)),
                               atol=1e-13)
    # div_i = Σ_j ∂_j F_ij
    np.testing.assert_allclose(ev["div"], np.einsum("njij->ni", ev["derivative"]))


def test_ellipticity_violation_rejected():
    with pytest.raises(AssumptionError):
        m.MatrixField.diagonal(1.0, 1.0)
    with pytest.raises(NotSPDError):
        m.MatrixField.constant([[1.0, 2.0], [2.0, 1.0]])


def test_spd_sqrt():
    A = np.array([[4.0, 1.0], [1.0, 3.0]])
    S = m.spd_sqrt(A)
    np.testing.assert_allclose(S @ S, A, atol=1e-14)
    with pytest.raises(ValidationError):
        m.spd_sqrt([[1.0, 2.0], [0.0, 1.0]])


@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50), st.floats(0.1, 3), st.sampled_from([1, 2, -1]))
def test_scalar_field_kernel_matches_general(x, amp, power):
    f = m.MatrixField.diagonal(amp + 1.0, amp, 0.7)
    g, dg = _field1_all(f.pack, np.array([x]), power)
    ev = f.evaluate(np.array([[x]]), power)
    assert g[0] == pytest.approx(ev["value"][0, 0, 0], rel=1e-13)
    assert dg[0] == pytest.approx(ev["derivative"][0, 0, 0, 0], rel=1e-12, abs=1e-13)


def test_scalar_potential_kernel_matches_general():
    xs = np.linspace(-20, 20, 101)
    for V in (m.ScalarPotential.cosine(m.Domain.torus(1), 1.3),
              m.ScalarPotential(m.Domain.euclidean(1), [m.PotentialTerm("quadratic", {"matrix": [[2.0]]}),
                                                        m.PotentialTerm("double_well", {"scale": 0.2}),
                                                        m.PotentialTerm("plane_wave",
                                                                        {"amplitude": 0.5, "wavevector": [3]})])):
        np.testing.assert_allclose(_grad1_all(V.pack, xs), V.gradient(xs[:, None])[:, 0], rtol=1e-13,
                                   atol=1e-12)


@pytest.mark.parametrize("fam", ["underdamped", "cg"])
def test_noise_drift_identity(fam):
    prob = m.default_problem(fam)
    fld = prob.fields["D" if fam == "underdamped" else "A"]
    for q in np.linspace(0, 2 * math.pi, 16, endpoint=False):
        assert m.noise_drift_identity_check(fld, prob.gibbs, np.array([q])) <= 1e-8


def test_noise_drift_identity_two_dims():
    dom = m.Domain.torus(2)
    V = m.ScalarPotential.cosine(dom)
    gibbs = m.GibbsSpec(2.0, V, m.KineticEnergy.quadratic([[2.0, 0.3], [0.3, 1.0]]))
    f = m.MatrixField.conformal(3.0, [1.0, 0.5], dim=2)
    assert m.noise_drift_identity_check(f, gibbs, np.array([0.4, 2.0]), quad_order=8) <= 1e-8


def test_remainder_has_zero_momentum_average():
    prob = m.default_problem("underdamped")
    q = np.array([1.1])
    val = m.pi0_project(lambda _q, P: m.remainder_psi(prob.fields["D"], prob.kinetic, prob.beta, q, P),
                        prob.gibbs, q)
    assert np.max(np.abs(val)) < 1e-12


def test_gibbs_average_reference_values():
    V = m.ScalarPotential.cosine(m.Domain.torus(1))
    # E cos = -I1(1)/I0(1) under exp(-cos q)
    from scipy.special import iv
    assert m.gibbs_average(V, 1.0, "cos") == pytest.approx(-iv(1, 1) / iv(0, 1), abs=1e-12)


def test_observables_on_torus_use_minimal_image():
    dom = m.Domain.torus(1)
    v = m.observable_values("min_abs", np.array([[0.2], [2 * math.pi - 0.2], [3.0]]), dom)
    np.testing.assert_allclose(v, [0.2, 0.2, 1.0], atol=1e-14)


def test_problem_toml_round_trip():
    for fam in m.FAMILIES:
        p = m.default_problem(fam)
        q = m.ProblemSpec.from_toml(p.to_toml())
        assert q.digest() == p.digest()


def test_problem_rejects_unknown_keys():
    d = m.default_problem("underdamped").to_dict()
    d["colour"] = "red"
    with pytest.raises(ConfigurationError):
        m.ProblemSpec.from_dict(d)


def test_problem_field_roles_enforced():
    p = m.default_problem("underdamped")
    with pytest.raises(ValidationError):
        p.with_family("mass")
