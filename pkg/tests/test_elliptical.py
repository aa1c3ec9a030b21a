import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hdmed.elliptical import (
    HdEdComponent,
    MixingFamily,
    generator_eval,
    log_det_scale,
    log_pdf,
    mahalanobis_reduced,
    sample_component,
    scale_matrix,
    weight_posterior,
)
from hdmed.exceptions import DimensionError, InvalidComponentError
from oracles import dense_logpdf, dense_mahalanobis, dense_scale, quad_weight_moments, random_component


def test_scale_matrix_matches_dense_construction():
    rng = np.random.default_rng(0)
    comp = random_component(rng, 9, 3)
    np.testing.assert_allclose(scale_matrix(comp), dense_scale(comp), atol=1e-12)


def test_mahalanobis_and_logdet_against_dense_linear_algebra():
    rng = np.random.default_rng(1)
    for _ in range(20):
        M = int(rng.integers(2, 12))
        comp = random_component(rng, M, int(rng.integers(1, M)))
        Y = rng.normal(0, 3, (7, M))
        np.testing.assert_allclose(mahalanobis_reduced(comp, Y), dense_mahalanobis(comp, Y), rtol=1e-10)
        sign, logdet = np.linalg.slogdet(dense_scale(comp))
        assert sign == 1
        assert log_det_scale(comp) == pytest.approx(logdet, rel=1e-12, abs=1e-10)


@pytest.mark.parametrize("family", ["gaussian", "student"])
def test_log_pdf_against_scipy(family):
    rng = np.random.default_rng(2)
    for _ in range(10):
        comp = random_component(rng, 6, 2, family)
        Y = comp.mu + rng.normal(0, 2, (5, 6))
        np.testing.assert_allclose(log_pdf(comp, Y), dense_logpdf(comp, Y), rtol=1e-10)


def test_single_row_returns_scalar():
    comp = random_component(np.random.default_rng(3), 4, 1)
    assert isinstance(log_pdf(comp, np.zeros(4)), float)
    assert isinstance(mahalanobis_reduced(comp, np.zeros(4)), float)


def test_mean_point_has_zero_distance():
    comp = random_component(np.random.default_rng(4), 5, 2)
    assert mahalanobis_reduced(comp, comp.mu) == 0.0


def test_isotropic_hand_case():
    # a = 4 along e1, b = 1 elsewhere: u = y1^2 / 4 + y2^2
    comp = HdEdComponent(np.zeros(2), np.array([[1.0], [0.0]]), [4.0], 1.0)
    assert mahalanobis_reduced(comp, [2.0, 3.0]) == pytest.approx(1.0 + 9.0)
    assert log_det_scale(comp) == pytest.approx(np.log(4.0))
    expected = -np.log(2 * np.pi) - 0.5 * np.log(4.0) - 0.5 * 10.0
    assert log_pdf(comp, [2.0, 3.0]) == pytest.approx(expected)


def test_tiny_residual_eigenvalue_stays_accurate():
    # the residual part is computed explicitly, so b = 1e-10 does not cancel
    D = np.eye(3)[:, :1]
    comp = HdEdComponent(np.zeros(3), D, [1.0], 1e-10)
    y = np.array([1e3, 1e-5, 0.0])
    assert mahalanobis_reduced(comp, y) == pytest.approx(1e6 + 1e-10 / 1e-10, rel=1e-12)


def test_generator_derivative_by_finite_differences():
    mixing = MixingFamily.student(3.5)
    u = np.linspace(0.1, 40, 9)
    h = 1e-6
    fd = (generator_eval(mixing, u + h, 7).log_g - generator_eval(mixing, u - h, 7).log_g) / (2 * h)
    np.testing.assert_allclose(generator_eval(mixing, u, 7).dlog_g, fd, rtol=1e-7)
    np.testing.assert_allclose(generator_eval(MixingFamily.gaussian(), u, 7).dlog_g, -0.5)


def test_generator_is_normalised_by_radial_quadrature():
    # integral of |y|^(M-1) * area(S^{M-1}) * g(|y|^2) over the radius is one
    from scipy import integrate
    from scipy.special import gammaln

    for mixing in (MixingFamily.gaussian(), MixingFamily.student(4.0)):
        M = 5
        log_area = np.log(2) + 0.5 * M * np.log(np.pi) - gammaln(0.5 * M)
        f = lambda r: np.exp(log_area + (M - 1) * np.log(r) + generator_eval(mixing, r * r, M).log_g)
        total, _ = integrate.quad(f, 0, np.inf, epsabs=0, epsrel=1e-11, limit=200)
        assert total == pytest.approx(1.0, rel=1e-9)


def test_weight_posterior_closed_form_and_quadrature():
    rng = np.random.default_rng(5)
    comp = random_component(rng, 6, 2, "student", nu=4.0)
    y = comp.mu + rng.normal(0, 2, 6)
    e_w, e_logw = weight_posterior(comp, y)
    u = mahalanobis_reduced(comp, y)
    assert e_w == pytest.approx((4.0 + 6) / (4.0 + u), rel=1e-13)
    q_w, q_logw = quad_weight_moments(4.0, 6, u)
    assert e_w == pytest.approx(q_w, rel=1e-9)
    assert e_logw == pytest.approx(q_logw, rel=1e-9, abs=1e-10)


def test_gaussian_weight_posterior_is_degenerate():
    comp = random_component(np.random.default_rng(6), 4, 1)
    assert weight_posterior(comp, np.ones(4)) == (1.0, 0.0)


def test_student_sample_covariance_matches_scaled_scale_matrix():
    rng = np.random.default_rng(7)
    comp = random_component(rng, 5, 2, "student", nu=8.0, a_scale=5.0)
    X = sample_component(comp, 200_000, seed=8)
    np.testing.assert_allclose(X.mean(axis=0), comp.mu, atol=0.05)
    target = dense_scale(comp) * 8.0 / 6.0
    np.testing.assert_allclose(np.cov(X.T), target, atol=0.06 * np.abs(target).max())


def test_gaussian_sample_passes_ks_on_mahalanobis():
    rng = np.random.default_rng(9)
    comp = random_component(rng, 6, 3)
    u = mahalanobis_reduced(comp, sample_component(comp, 5000, seed=10))
    assert stats.kstest(u, stats.chi2(6).cdf).pvalue > 1e-3


def test_full_dimension_component_samples_with_its_scale():
    D = np.linalg.qr(np.random.default_rng(11).standard_normal((3, 3)))[0]
    comp = HdEdComponent(np.zeros(3), D, [2.0, 2.0, 2.0], 0.5)
    X = sample_component(comp, 100_000, seed=12)
    np.testing.assert_allclose(np.cov(X.T), 2.0 * np.eye(3), atol=0.05)


@pytest.mark.parametrize(
    "kwargs, err",
    [
        (dict(a=[1.0, 2.0]), InvalidComponentError),  # increasing
        (dict(a=[2.0, 0.5]), InvalidComponentError),  # below b
        (dict(b=0.0), InvalidComponentError),
        (dict(b=np.nan), InvalidComponentError),
        (dict(mu=np.zeros(3)), DimensionError),
        (dict(a=[3.0]), DimensionError),
        (dict(Dstar=np.ones((4, 2))), InvalidComponentError),
    ],
)
def test_invalid_components_are_rejected(kwargs, err):
    base = dict(mu=np.zeros(4), Dstar=np.eye(4)[:, :2], a=[3.0, 2.0], b=1.0)
    base.update(kwargs)
    with pytest.raises(err):
        HdEdComponent(**base)


def test_component_arrays_are_read_only():
    comp = random_component(np.random.default_rng(13), 4, 2)
    with pytest.raises(ValueError):
        comp.mu[0] = 1.0


def test_wrong_observation_length():
    comp = random_component(np.random.default_rng(14), 4, 2)
    with pytest.raises(DimensionError):
        log_pdf(comp, np.zeros(5))


def test_mixing_family_validation():
    with pytest.raises(ValueError):
        MixingFamily.student(-1.0)
    with pytest.raises(ValueError):
        MixingFamily("laplace")
    assert MixingFamily.student(6).alpha == 3.0


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    M=st.integers(2, 10),
    shift=st.floats(-5, 5),
)
def test_log_pdf_translation_invariance(seed, M, shift):
    rng = np.random.default_rng(seed)
    comp = random_component(rng, M, int(rng.integers(1, M)), "student")
    y = comp.mu + rng.normal(0, 1, M)
    moved = HdEdComponent(comp.mu + shift, comp.Dstar, comp.a, comp.b, comp.mixing)
    assert log_pdf(moved, y + shift) == pytest.approx(log_pdf(comp, y), rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), M=st.integers(2, 10))
def test_mahalanobis_is_non_negative_and_dense_consistent(seed, M):
    rng = np.random.default_rng(seed)
    comp = random_component(rng, M, int(rng.integers(1, M + 1)) if M > 1 else 1)
    Y = rng.normal(0, 10, (4, M))
    u = mahalanobis_reduced(comp, Y)
    assert np.all(u >= 0)
    np.testing.assert_allclose(u, dense_mahalanobis(comp, Y), rtol=1e-9)
