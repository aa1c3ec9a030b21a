import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.decomposition import PCA

from hdmed.elliptical import HdEdComponent, sample_component
from hdmed.exceptions import DimensionError
from hdmed.mixture import HdMedModel
from hdmed.projection import loading_matrix, project, reconstruct, reconstruction_rmse
from hdmed.synthetic import random_model, MixtureStream
from oracles import dense_scale, random_component


def hand_component():
    return HdEdComponent(np.zeros(2), np.array([[1.0], [0.0]]), [4.0], 1.0)


def test_hand_loading_matrix():
    op = loading_matrix(hand_component())
    np.testing.assert_allclose(op.V, [[np.sqrt(3.0)], [0.0]])
    np.testing.assert_allclose(op.Uinv, [[0.25]])


def test_hand_projection_and_reconstruction():
    op = loading_matrix(hand_component())
    assert project(op, [2 * np.sqrt(3.0), 5.0]) == pytest.approx([1.5])
    np.testing.assert_allclose(reconstruct(op, [1.5]), [1.5 * np.sqrt(3.0), 0.0])
    np.testing.assert_allclose(project(op, np.zeros(2)), [0.0])
    np.testing.assert_allclose(reconstruct(op, [0.0]), np.zeros(2))


def test_uinv_inverts_u_and_gram_is_diagonal():
    comp = random_component(np.random.default_rng(0), 10, 4)
    op = loading_matrix(comp)
    U = comp.b * np.eye(4) + op.V.T @ op.V
    np.testing.assert_allclose(op.Uinv @ U, np.eye(4), atol=1e-9)
    np.testing.assert_allclose(op.V.T @ op.V, np.diag(comp.a - comp.b), atol=1e-9)


def test_scale_rebuilt_from_loadings_has_component_spectrum():
    comp = random_component(np.random.default_rng(1), 12, 3)
    op = loading_matrix(comp)
    S = comp.b * np.eye(12) + op.V @ op.V.T
    np.testing.assert_allclose(S, dense_scale(comp), atol=1e-9)
    evals = np.sort(np.linalg.eigvalsh(S))[::-1]
    np.testing.assert_allclose(evals, np.r_[comp.a, np.full(9, comp.b)], rtol=1e-10)


def test_near_flat_spectrum_gives_short_loadings():
    eps = 1e-6
    comp = HdEdComponent(np.zeros(4), np.eye(4)[:, :3], [1 + eps] * 3, 1.0)
    np.testing.assert_allclose(np.linalg.norm(loading_matrix(comp).V, axis=0), np.sqrt(eps), rtol=1e-6)


def test_projection_equals_conditional_mean_of_latent():
    # E[X | y] for y = V x + mu + e, x ~ N(0, I), e ~ N(0, b I), by Gaussian conditioning
    comp = random_component(np.random.default_rng(2), 7, 3)
    op = loading_matrix(comp)
    y = np.random.default_rng(3).normal(size=7)
    cov_yy = op.V @ op.V.T + comp.b * np.eye(7)
    expected = op.V.T @ np.linalg.solve(cov_yy, y - comp.mu)
    np.testing.assert_allclose(project(op, y), expected, rtol=1e-10)


def test_shrinkage_of_project_after_reconstruct():
    comp = random_component(np.random.default_rng(4), 8, 3)
    op = loading_matrix(comp)
    x = np.random.default_rng(5).normal(size=(6, 3))
    shrink = (comp.a - comp.b) / comp.a
    np.testing.assert_allclose(project(op, reconstruct(op, x)), x * shrink, atol=1e-10)
    # applying the pair twice shrinks twice
    once = project(op, np.random.default_rng(6).normal(size=(4, 8)))
    np.testing.assert_allclose(project(op, reconstruct(op, once)), once * shrink, atol=1e-10)


def test_residual_is_bounded_below_by_hard_projection_residual():
    rng = np.random.default_rng(7)
    comp = random_component(rng, 9, 3)
    op = loading_matrix(comp)
    Y = rng.normal(0, 4, (50, 9))
    soft = Y - reconstruct(op, project(op, Y))
    diff = Y - comp.mu
    hard = diff - diff @ comp.Dstar @ comp.Dstar.T
    assert np.all(np.sum(soft**2, 1) >= np.sum(hard**2, 1) - 1e-10)


def test_single_component_rmse_matches_expected_residual():
    # error variance: b in the M - d residual directions, b^2 / a_j inside
    rng = np.random.default_rng(8)
    M = 10
    comp = random_component(rng, M, M - 1, a_scale=10.0)
    model = HdMedModel((comp,), np.array([1.0]))
    X = sample_component(comp, 200_000, seed=9)
    expected = comp.b + np.sum(comp.b**2 / comp.a)
    assert reconstruction_rmse(model, X) ** 2 == pytest.approx(expected, rel=0.02)


def test_noiseless_limit():
    rng = np.random.default_rng(10)
    D = np.linalg.qr(rng.standard_normal((6, 2)))[0]
    X = rng.normal(size=(500, 2)) * [3.0, 2.0] @ D.T
    for b in (1e-2, 1e-4, 1e-6):
        model = HdMedModel((HdEdComponent(np.zeros(6), D, [9.0, 4.0], b),), np.array([1.0]))
        assert reconstruction_rmse(model, X) < 3 * b


def test_rmse_non_increasing_along_nested_subspaces():
    rng = np.random.default_rng(11)
    M = 12
    X = rng.normal(size=(3000, M)) * np.linspace(5, 0.5, M)
    evals, evecs = np.linalg.eigh(np.cov(X.T))
    evals, evecs = evals[::-1], evecs[:, ::-1]
    mu = X.mean(axis=0)
    rmses = []
    for d in range(1, M):
        b = evals[d:].mean()
        comp = HdEdComponent(mu, evecs[:, :d], evals[:d], b)
        rmses.append(reconstruction_rmse(HdMedModel((comp,), np.array([1.0])), X))
    assert np.all(np.diff(rmses) <= 1e-12)


def test_single_cluster_reconstruction_between_pca_and_random_subspaces():
    # PCA is the optimal rank-d reconstruction; the posterior mean shrinks
    # towards the centre and loses a little, but beats any other subspace
    rng = np.random.default_rng(12)
    M, d = 15, 3
    comp = random_component(rng, M, d, b_range=(0.5, 0.6), a_scale=30.0)
    X = sample_component(comp, 20_000, seed=13)
    pca = PCA(d).fit(X)
    pca_rmse = np.sqrt(np.mean(np.sum((X - pca.inverse_transform(pca.transform(X))) ** 2, 1)))
    evals = pca.explained_variance_
    resid = np.linalg.eigvalsh(np.cov(X.T))[::-1][d:].mean()
    fitted = HdEdComponent(pca.mean_, pca.components_.T, evals, resid)
    hd_rmse = reconstruction_rmse(HdMedModel((fitted,), np.array([1.0])), X)
    assert pca_rmse <= hd_rmse <= pca_rmse * 1.02
    for _ in range(20):
        Q = np.linalg.qr(rng.standard_normal((M, d)))[0]
        diff = X - pca.mean_
        other = np.sqrt(np.mean(np.sum((diff - diff @ Q @ Q.T) ** 2, 1)))
        assert hd_rmse < other


def test_mixture_beats_single_global_pca_on_clustered_data():
    true = random_model(30, (2, 2, 2), b=0.01, seed=14)
    X = np.concatenate(list(MixtureStream(true, 6000, seed=15)()))
    pca = PCA(2).fit(X)
    global_rmse = np.sqrt(np.mean(np.sum((X - pca.inverse_transform(pca.transform(X))) ** 2, 1)))
    assert reconstruction_rmse(true, X) < 0.5 * global_rmse


def test_projection_dimension_errors():
    op = loading_matrix(hand_component())
    with pytest.raises(DimensionError):
        project(op, np.zeros(3))
    with pytest.raises(DimensionError):
        reconstruct(op, np.zeros(2))


def test_rmse_rejects_empty_stream():
    model = HdMedModel((hand_component(),), np.array([1.0]))
    with pytest.raises(ValueError):
        reconstruction_rmse(model, np.empty((0, 2)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), M=st.integers(3, 12))
def test_projection_is_affine(seed, M):
    rng = np.random.default_rng(seed)
    comp = random_component(rng, M, int(rng.integers(1, M)))
    op = loading_matrix(comp)
    y1, y2 = rng.normal(size=(2, M))
    t = rng.uniform()
    lhs = project(op, t * y1 + (1 - t) * y2)
    rhs = t * project(op, y1) + (1 - t) * project(op, y2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
