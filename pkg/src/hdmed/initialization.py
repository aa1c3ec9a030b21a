"""Spectral initialisation: batch full-covariance EM, then per-cluster scree.

Each covariance from the batch fit is eigendecomposed; its intrinsic
dimension is the knee of the sorted eigenvalue curve, the leading
eigenvalues become ``a`` and the remaining ones are averaged into ``b``.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh
from scipy.special import digamma, gammaln, logsumexp
from sklearn.cluster import KMeans

from .elliptical import HdEdComponent, MixingFamily
from .mixture import HdMedModel
from .online_em import InitSpec, fit_scale, solve_student_dof

VARIANCE_FALLBACK = 0.95


def kneedle(values, sensitivity=1.0):
    """Knee of a non-increasing curve, or ``None`` when there is none.

    Offline kneedle on the convex/decreasing variant: the curve is flipped
    to ``max - y``, both axes are min-max normalised and the knee is the
    first local maximum of ``y_norm - x_norm`` after which the difference
    drops below ``max - sensitivity * mean(diff(x_norm))``.
    """
    y = np.asarray(values, dtype=np.float64)
    n = y.shape[0]
    if n < 3:
        raise ValueError("kneedle needs at least three points")
    if np.any(np.diff(y) > 0):
        raise ValueError("kneedle expects a non-increasing sequence")
    span = y[0] - y[-1]
    if span <= 0:
        return None
    x_norm = np.arange(n) / (n - 1)
    y_norm = (y[0] - y) / span
    diff = y_norm - x_norm
    # differences below this are round-off of a straight line
    eps = 1e-12
    step = sensitivity / (n - 1)
    knee, threshold = None, None
    for i in range(1, n):
        if i < n - 1 and diff[i] > diff[i - 1] + eps and diff[i] >= diff[i + 1] and diff[i] > eps:
            knee, threshold = i, diff[i] - step
            continue
        if knee is not None and diff[i] < threshold:
            return knee
    return None


def variance_rule(evals, fraction=VARIANCE_FALLBACK):
    """Smallest ``d`` whose leading eigenvalues explain ``fraction`` of the total."""
    evals = np.clip(np.asarray(evals, dtype=np.float64), 0.0, None)
    total = evals.sum()
    if total <= 0:
        return 1
    return int(np.searchsorted(np.cumsum(evals) / total, fraction - 1e-12) + 1)


def select_dimension(evals, sensitivity=1.0, d_max=None):
    """Intrinsic dimension from a descending spectrum; returns ``(d, used_fallback)``."""
    M = len(evals)
    cap = M - 1 if d_max is None else max(1, min(int(d_max), M - 1))
    d = kneedle(evals, sensitivity)
    fallback = d is None
    if fallback:
        d = variance_rule(evals)
    return int(min(max(d, 1), cap)), fallback


@dataclass
class BatchFit:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    nus: np.ndarray
    loglik: list = field(default_factory=list)
    ridged: int = 0
    floor: float = 1e-300


def _ridge_cholesky(cov, floor=1e-300):
    """Cholesky factor, adding a growing ridge until the matrix is definite.

    The ridge is relative to the average variance of ``cov``, or to
    ``floor`` when that is smaller (a cluster of identical rows).
    """
    M = cov.shape[0]
    scale = max(np.trace(cov) / M, floor)
    eps = 0.0
    while True:
        try:
            return cho_factor(cov + eps * scale * np.eye(M), lower=True), eps
        except LinAlgError:
            eps = 1e-10 if eps == 0.0 else eps * 10.0
            if eps > 1.0:
                raise


def _log_densities(X, fit, family):
    """``(n, K)`` log densities plus ``(n, K)`` Mahalanobis distances."""
    n, M = X.shape
    K = fit.means.shape[0]
    logf = np.empty((n, K))
    u = np.empty((n, K))
    for k in range(K):
        (L, lower), eps = _ridge_cholesky(fit.covariances[k], fit.floor)
        if eps:
            scale = max(np.trace(fit.covariances[k]) / M, fit.floor)
            fit.covariances[k] = fit.covariances[k] + eps * scale * np.eye(M)
            fit.ridged += 1
        diff = X - fit.means[k]
        z = cho_solve((L, lower), diff.T)
        u[:, k] = np.einsum("ij,ji->i", diff, z)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        if family == "gaussian":
            logf[:, k] = -0.5 * (M * np.log(2 * np.pi) + logdet + u[:, k])
        else:
            nu = fit.nus[k]
            logf[:, k] = (
                gammaln(0.5 * (nu + M))
                - gammaln(0.5 * nu)
                - 0.5 * M * np.log(nu * np.pi)
                - 0.5 * logdet
                - 0.5 * (nu + M) * np.log1p(u[:, k] / nu)
            )
    return logf, u


def _m_step(X, r, u, fit, family):
    n, M = X.shape
    for k in range(r.shape[1]):
        rk = r[:, k]
        nk = rk.sum()
        if family == "gaussian":
            w = np.ones(n)
        else:
            nu = fit.nus[k]
            w = (nu + M) / (nu + u[:, k])
            logw = digamma(0.5 * (nu + M)) - np.log(0.5 * (nu + u[:, k]))
        rw = rk * w
        mean = rw @ X / rw.sum()
        diff = X - mean
        cov = (diff * rw[:, None]).T @ diff / nk
        fit.means[k] = mean
        fit.covariances[k] = 0.5 * (cov + cov.T)
        fit.weights[k] = nk / n
        if family == "student":
            fit.nus[k] = solve_student_dof(rk @ (logw - w) / nk)
    fit.weights /= fit.weights.sum()


def fit_batch(X, K, family="gaussian", iters=50, seed=0, nu0=10.0):
    """Full-covariance EM on an in-memory sample.

    Starts from a k-means partition; ``loglik`` records the total
    log-likelihood before every M-step and after the last one.
    """
    X = np.asarray(X, dtype=np.float64)
    n, M = X.shape
    if n < K:
        raise ValueError(f"need at least K={K} rows, got {n}")
    labels = KMeans(n_clusters=K, n_init=1, random_state=seed).fit_predict(X)
    r = np.zeros((n, K))
    r[np.arange(n), labels] = 1.0
    fit = BatchFit(
        weights=np.full(K, 1.0 / K),
        means=np.zeros((K, M)),
        covariances=np.zeros((K, M, M)),
        nus=np.full(K, nu0) if family == "student" else np.zeros(K),
        floor=max(1e-12 * float(np.var(X, axis=0).mean()), 1e-300),
    )
    # first M-step from the hard partition; Student weights start at 1
    _m_step(X, r, np.full((n, K), float(M)), fit, family)
    for _ in range(iters):
        logf, u = _log_densities(X, fit, family)
        logp = logf + np.log(fit.weights)
        norm = logsumexp(logp, axis=1)
        fit.loglik.append(float(norm.sum()))
        r = np.exp(logp - norm[:, None])
        _reseed_empty(X, r, fit)
        _m_step(X, r, u, fit, family)
    logf, _ = _log_densities(X, fit, family)
    fit.loglik.append(float(logsumexp(logf + np.log(fit.weights), axis=1).sum()))
    return fit


def _reseed_empty(X, r, fit):
    mass = r.sum(axis=0)
    empty = np.flatnonzero(mass < 1e-8 * X.shape[0])
    if empty.size:
        # hand the component the rows farthest from every current mean
        far = np.argsort(-np.min(((X[:, None, :] - fit.means[None]) ** 2).sum(-1), axis=1))
        for j, k in enumerate(empty):
            r[far[j::len(empty)][: max(2, X.shape[1] + 1)], k] = 1.0
        r /= r.sum(axis=1, keepdims=True)


def spectral_init(X, K, family="gaussian", spec=InitSpec(), seed=0):
    """Initial HD-MED from a batch EM fit on an in-memory subsample."""
    X = np.asarray(X, dtype=np.float64)
    M = X.shape[1]
    fixed = None
    if spec.dims is not None:
        fixed = np.broadcast_to(np.asarray(spec.dims, dtype=int), (K,))
        if np.any(fixed < 1) or np.any(fixed >= M):
            raise ValueError(f"fixed dimensions must lie in [1, {M - 1}]")
    fit = fit_batch(X, K, family, iters=spec.iters, seed=seed)
    comps, info = [], {"selected_dims": [], "fallback": [], "repairs": {}}
    for k in range(K):
        cov = 0.5 * (fit.covariances[k] + fit.covariances[k].T)
        vals, vecs = eigh(cov)
        vals, vecs = np.clip(vals[::-1], 0.0, None), vecs[:, ::-1]
        if fixed is None:
            d, fallback = select_dimension(vals, spec.sensitivity, spec.d_max)
        else:
            d, fallback = int(fixed[k]), False
        info["selected_dims"].append(d)
        info["fallback"].append(fallback)
        D, a, b, flags = fit_scale(vecs, vals, vals.sum(), M, d)
        if flags:
            info["repairs"][k] = sorted(set(flags))
        mixing = MixingFamily.gaussian() if family == "gaussian" else MixingFamily.student(fit.nus[k])
        comps.append(HdEdComponent(fit.means[k], D, a, b, mixing))
    info["batch_loglik"] = fit.loglik
    return HdMedModel(tuple(comps), fit.weights / fit.weights.sum(), {"init": info})
