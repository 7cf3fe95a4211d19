import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import trapezoid

from kramerslab import estimate as es
from kramerslab.errors import AlignmentError, ConfigurationError, ValidationError

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
samples = arrays(np.float64, st.integers(1, 40), elements=finite)


@settings(max_examples=100, deadline=None)
@given(samples, samples, st.sampled_from([0.5, 1.0, 1.5, 2.0]))
def test_wasserstein_symmetric_nonnegative(a, b, alpha):
    w = es.wasserstein_alpha_1d(a, b, alpha)
    assert w >= 0
    assert w == pytest.approx(es.wasserstein_alpha_1d(b, a, alpha), rel=1e-12, abs=1e-12)
    assert es.wasserstein_alpha_1d(a, a, alpha) == 0.0


@settings(max_examples=100, deadline=None)
@given(samples, samples, samples, st.sampled_from([1.0, 1.5, 2.0]))
def test_wasserstein_triangle_inequality(a, b, c, alpha):
    ab = es.wasserstein_alpha_1d(a, b, alpha)
    bc = es.wasserstein_alpha_1d(b, c, alpha)
    ac = es.wasserstein_alpha_1d(a, c, alpha)
    assert ac <= ab + bc + 1e-9 * (1 + ab + bc)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(0, 6.28)),
       arrays(np.float64, st.integers(2, 30), elements=st.floats(0, 6.28)))
def test_circle_w1_matches_cdf_formula(a, b):
    n = min(a.size, b.size)
    a, b = a[:n], b[:n]
    L = 2 * math.pi
    assert es.wasserstein_alpha_1d(a, b, 1.0, period=L) == pytest.approx(es.circle_w1_cdf(a, b, L), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(samples, finite)
def test_w1_translation(a, m):
    assert es.wasserstein_alpha_1d(a, a + m, 1.0) == pytest.approx(abs(m), rel=1e-9, abs=1e-9)


def test_w1_point_masses_and_gaussian_shift():
    assert es.wasserstein_alpha_1d([0.0], [1.0], 1.0) == 1.0
    g = np.random.default_rng(0)
    w = es.wasserstein_alpha_1d(g.standard_normal(20000), 0.7 + g.standard_normal(20000), 1.0)
    assert w == pytest.approx(0.7, abs=0.03)


def test_unequal_sizes_use_quantile_functions():
    # {0, 1} vs {0, 0.5, 1}: quantile gap is 0.5 on a third of [0, 1]
    assert es.wasserstein_alpha_1d([0.0, 1.0], [0.0, 0.5, 1.0], 1.0) == pytest.approx(1 / 6)


def test_wasserstein_rejects_bad_input():
    with pytest.raises(ValidationError):
        es.wasserstein_alpha_1d([], [1.0])
    with pytest.raises(ValidationError):
        es.wasserstein_alpha_1d([np.nan], [1.0])
    with pytest.raises(ValidationError):
        es.wasserstein_alpha_1d([1.0], [1.0], 3.0)


def test_split_sample_floor_scales_like_inverse_root_n():
    g = np.random.default_rng(1)
    f1 = np.mean([es.split_sample_floor(g.standard_normal(2000), seed=s) for s in range(10)])
    f2 = np.mean([es.split_sample_floor(g.standard_normal(8000), seed=s) for s in range(10)])
    assert f1 / f2 == pytest.approx(2.0, rel=0.25)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(0.01, 100))
def test_fit_rate_exact_power(slope, c):
    lam = [4.0, 8.0, 16.0, 32.0, 64.0]
    fit = es.fit_rate(lam, [c * l ** slope for l in lam])
    assert fit.slope == pytest.approx(slope, abs=1e-10)
    assert fit.residual_rms < 1e-10
    np.testing.assert_allclose(fit.predict(lam), [c * l ** slope for l in lam], rtol=1e-9)


def test_fit_rate_jittered():
    g = np.random.default_rng(2)
    lam = np.array([4.0, 8.0, 16.0, 32.0, 64.0])
    slopes = [es.fit_rate(lam, 3 / np.sqrt(lam) * np.exp(0.1 * g.standard_normal(5))).slope for _ in range(50)]
    assert np.all(np.abs(np.array(slopes) + 0.5) < 0.1 + 0.05)
    assert abs(np.mean(slopes) + 0.5) < 0.02


def test_fit_rate_validation():
    with pytest.raises(ConfigurationError):
        es.fit_rate([1.0, 2.0, 4.0], [1.0, 0.5, 0.25])
    with pytest.raises(ConfigurationError):
        es.fit_rate([1.0, 2.0, 3.0, 4.0], [1.0, 0.5, 0.3, 0.25])
    with pytest.raises(ValidationError):
        es.fit_rate([1.0, 2.0, 4.0, 16.0], [1.0, 0.0, 0.25, 0.1])
    with pytest.raises(AlignmentError):
        es.fit_rate([1.0, 2.0, 4.0, 16.0], [1.0, 0.5, 0.25, 0.1], np.ones((10, 3)))


def test_fit_rate_bootstrap_interval():
    lam = [4.0, 8.0, 16.0, 32.0, 64.0]
    g = np.random.default_rng(3)
    reps = np.array([[l ** -1 * math.exp(0.05 * g.standard_normal()) for l in lam] for _ in range(200)])
    fit = es.fit_rate(lam, [l ** -1 for l in lam], reps)
    assert 0 < fit.confidence_halfwidth < 0.2


def test_strong_error_identical_paths_is_zero():
    x = np.random.default_rng(0).standard_normal((50, 9))
    e = es.strong_error_sup((x, x), 2.0, n_boot=20)
    assert e.value == 0.0 and e.ci_high == 0.0


def test_strong_error_is_max_over_times():
    a = np.zeros((4, 3))
    b = np.array([[0, 1, 0], [0, 1, 0], [0, 3, 0], [0, 1, 2.0]])
    e = es.strong_error_sup((a, b), 2.0, n_boot=0)
    assert e.value == pytest.approx((1 + 1 + 9 + 1) / 4)
    assert e.ci_low <= e.value <= e.ci_high


def test_strong_error_shape_mismatch():
    with pytest.raises(AlignmentError):
        es.strong_error_sup((np.zeros((3, 4)), np.zeros((3, 5))))


def test_strong_error_wraps_on_torus():
    a = np.full((2, 2), 0.1)
    b = np.full((2, 2), 2 * math.pi - 0.1)
    assert es.strong_error_sup((a, b), 1.0, period=2 * math.pi, n_boot=0).value == pytest.approx(0.2)


class _Run:
    observables = ("cos",)
    horizon = 2.0

    def __init__(self, integrals):
        self.integrals = integrals


def test_traj_average_error_bounded_by_lipschitz_sup():
    g = np.random.default_rng(0)
    fine = g.standard_normal((100, 17)).cumsum(axis=1) * 0.1
    coarse = fine + 0.05 * g.standard_normal((100, 17))
    t = np.linspace(0, 2.0, 17)
    integ = np.stack([trapezoid(np.cos(fine), t, axis=1), trapezoid(np.cos(coarse), t, axis=1)], axis=-1)
    run = _Run(integ[:, None, :])
    ta = es.traj_average_error(run, "cos", 1.0, 1.0, n_boot=0)
    sup = np.mean(np.max(np.abs(fine - coarse), axis=1))
    assert ta.value <= es.observable_lipschitz("cos") * sup + 1e-12


def test_traj_average_error_constant_observable_zero():
    run = _Run(np.full((10, 1, 2), 3.0))
    assert es.traj_average_error(run, "cos", n_boot=0).value == 0.0
    with pytest.raises(ValidationError):
        es.traj_average_error(run, "cos", eta=1.5)
    with pytest.raises(ValidationError):
        es.traj_average_error(run, "min_abs")


def test_increment_moment_brownian():
    g = np.random.default_rng(4)
    dt = 1e-3
    paths = np.cumsum(g.standard_normal((2000, 200)) * math.sqrt(dt), axis=1)
    im = es.increment_moment(paths, dt, 4.0)
    assert im.slope == pytest.approx(2.0, abs=0.1)
    np.testing.assert_allclose(im.moments, 3 * im.lags ** 2, rtol=0.1)


def test_increment_moment_constant_and_validation():
    im = es.increment_moment(np.ones((5, 40)), 0.1)
    assert np.all(im.moments == 0) and math.isnan(im.slope)
    with pytest.raises(ConfigurationError):
        es.increment_moment(np.ones((5, 40)), 0.1, lags=(1, 2, 4))


def test_tidy_rows():
    e = es.ErrorEstimate(1.0, 0.5, 1.5, 10)
    rows = es.tidy_rows(4.0, {"a": e, "b": 2})
    assert rows == [[4.0, "a", 1.0, 0.5, 1.5, 10], [4.0, "b", 2.0, "", "", ""]]
