import numpy as np
import pytest
from scipy.special import logsumexp

from hdmed.elliptical import HdEdComponent, MixingFamily
from hdmed.exceptions import DegenerateInputError, DimensionError, InvalidComponentError
from hdmed.mixture import (
    HdMedModel,
    assign,
    bic,
    log_likelihood,
    n_free_params,
    responsibilities,
    score_samples,
)
from oracles import dense_logpdf, random_component


def random_mixture(rng, K=3, M=6, family="gaussian"):
    comps = tuple(random_component(rng, M, int(rng.integers(1, M)), family, nu=5.0) for _ in range(K))
    w = rng.dirichlet(np.ones(K))
    return HdMedModel(comps, w / w.sum())


def dense_mixture_logp(model, Y):
    return np.column_stack([np.log(w) + dense_logpdf(c, Y) for w, c in zip(model.weights, model.components)])


@pytest.mark.parametrize("family", ["gaussian", "student"])
def test_responsibilities_and_scores_against_dense_oracle(family):
    rng = np.random.default_rng(0)
    model = random_mixture(rng, family=family)
    Y = rng.normal(0, 4, (20, 6))
    logp = dense_mixture_logp(model, Y)
    np.testing.assert_allclose(score_samples(model, Y), logsumexp(logp, axis=1), rtol=1e-10)
    np.testing.assert_allclose(responsibilities(model, Y), np.exp(logp - logsumexp(logp, axis=1, keepdims=True)), atol=1e-12)
    np.testing.assert_array_equal(assign(model, Y), np.argmax(logp, axis=1))


def test_responsibilities_sum_to_one_far_from_all_components():
    model = random_mixture(np.random.default_rng(1))
    r = responsibilities(model, np.full((3, 6), 1e4))
    np.testing.assert_allclose(r.sum(axis=1), 1.0)


def test_assign_ties_go_to_lowest_index():
    comp = HdEdComponent(np.zeros(3), np.eye(3)[:, :1], [2.0], 1.0)
    model = HdMedModel((comp, comp, comp), np.full(3, 1 / 3))
    assert assign(model, np.ones(3)) == 0
    np.testing.assert_array_equal(assign(model, np.ones((4, 3))), 0)


def test_single_component_responsibility_is_one():
    model = HdMedModel((random_component(np.random.default_rng(2), 4, 2),), np.array([1.0]))
    np.testing.assert_array_equal(responsibilities(model, np.ones((5, 4))), 1.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_observation_is_degenerate():
    model = random_mixture(np.random.default_rng(3))
    with pytest.raises(DegenerateInputError):
        responsibilities(model, np.full(6, np.inf))


def test_parameter_count_by_hand():
    # M=5, d=2: 5 + 10 - 3 + 2 + 1 = 15; Student adds one; two components add one weight
    D = np.eye(5)[:, :2]
    g = HdEdComponent(np.zeros(5), D, [3.0, 2.0], 1.0)
    assert n_free_params(HdMedModel((g,), np.array([1.0]))) == 15
    t = g.with_mixing(MixingFamily.student(4.0))
    assert n_free_params(HdMedModel((t, t), np.array([0.5, 0.5]))) == 2 * 16 + 1


def test_bic_against_direct_formula_and_streaming():
    rng = np.random.default_rng(4)
    model = random_mixture(rng)
    Y = rng.normal(0, 3, (301, 6))
    ll = logsumexp(dense_mixture_logp(model, Y), axis=1).sum()
    assert log_likelihood(model, Y, chunk_rows=17) == pytest.approx(ll, rel=1e-11)
    expected = -2 * ll + n_free_params(model) * np.log(301)
    assert bic(model, Y, 301, chunk_rows=50) == pytest.approx(expected, rel=1e-11)
    chunks = lambda: (Y[i:i + 40] for i in range(0, 301, 40))
    assert bic(model, chunks, 301) == pytest.approx(expected, rel=1e-11)


def test_bic_rejects_wrong_count():
    model = random_mixture(np.random.default_rng(5))
    with pytest.raises(ValueError):
        bic(model, np.zeros((10, 6)), 11)


def test_model_validation():
    rng = np.random.default_rng(6)
    a = random_component(rng, 4, 2)
    with pytest.raises(InvalidComponentError):
        HdMedModel((a, a), np.array([0.6, 0.5]))
    with pytest.raises(InvalidComponentError):
        HdMedModel((a, a), np.array([1.0, 0.0]))
    with pytest.raises(DimensionError):
        HdMedModel((a, random_component(rng, 5, 2)), np.array([0.5, 0.5]))
    with pytest.raises(InvalidComponentError):
        HdMedModel((a, a.with_mixing(MixingFamily.student(3.0))), np.array([0.5, 0.5]))
    with pytest.raises(DimensionError):
        HdMedModel((a,), np.array([0.5, 0.5]))


def test_model_exposes_structure():
    rng = np.random.default_rng(7)
    model = random_mixture(rng, K=4, M=7, family="student")
    assert (model.K, model.M, model.family) == (4, 7, "student")
    assert model.dims.shape == (4,)
    with pytest.raises(ValueError):
        model.weights[0] = 1.0
