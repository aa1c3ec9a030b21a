"""Finite mixtures of high-dimensional elliptical components."""
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .elliptical import HdEdComponent, _as_batch, _log_pdf_from_u, _mahalanobis_batch
from .exceptions import DegenerateInputError, DimensionError, InvalidComponentError
from .streams import iter_chunks


@dataclass(frozen=True, eq=False)
class HdMedModel:
    """``K`` weighted components sharing ambient dimension and mixing family."""

    components: tuple
    weights: np.ndarray
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise InvalidComponentError("a mixture needs at least one component")
        if not all(isinstance(c, HdEdComponent) for c in comps):
            raise TypeError("components must be HdEdComponent instances")
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != len(comps):
            raise DimensionError(f"{w.shape[0]} weights for {len(comps)} components")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise InvalidComponentError("mixture weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InvalidComponentError(f"mixture weights sum to {w.sum()!r}, not 1")
        if len({c.M for c in comps}) != 1:
            raise DimensionError("components disagree on the ambient dimension")
        if len({c.mixing.tag for c in comps}) != 1:
            raise InvalidComponentError("components disagree on the mixing family")
        w.setflags(write=False)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    @property
    def M(self):
        return self.components[0].M

    @property
    def K(self):
        return len(self.components)

    @property
    def family(self):
        return self.components[0].mixing.tag

    @property
    def dims(self):
        return np.array([c.d for c in self.components])


def weighted_log_densities(model, y):
    """``log pi_k + log f_k(y)`` as an ``(n, K)`` array (``(K,)`` for one row)."""
    Y, single = _as_batch(model.components[0], y)
    out = np.empty((Y.shape[0], model.K))
    for k, comp in enumerate(model.components):
        out[:, k] = np.log(model.weights[k]) + _log_pdf_from_u(comp, _mahalanobis_batch(comp, Y))
    return out[0] if single else out


def _normalise(logp):
    norm = logsumexp(logp, axis=-1, keepdims=True)
    if np.any(~np.isfinite(norm)):
        raise DegenerateInputError("no component assigns finite density to the observation")
    return np.exp(logp - norm), norm[..., 0]


def responsibilities(model, y):
    """Posterior cluster probabilities, shape ``(K,)`` or ``(n, K)``."""
    r, _ = _normalise(weighted_log_densities(model, y))
    return r


def assign(model, y):
    """Most probable cluster; ties go to the lowest index."""
    logp = weighted_log_densities(model, y)
    _normalise(logp)
    labels = np.argmax(logp, axis=-1)
    return int(labels) if np.ndim(labels) == 0 else labels


def score_samples(model, y):
    """Per-observation mixture log density."""
    return _normalise(weighted_log_densities(model, y))[1]


def _loglik_and_count(model, data, chunk_rows):
    total, n = 0.0, 0
    for Y in iter_chunks(data, chunk_rows):
        total += float(np.sum(score_samples(model, Y)))
        n += Y.shape[0]
    if n == 0:
        raise ValueError("log-likelihood needs at least one observation")
    return total, n


def log_likelihood(model, data, chunk_rows=8192):
    """Total log-likelihood of a (possibly streamed) data source."""
    return _loglik_and_count(model, data, chunk_rows)[0]


def n_free_params(model):
    """Free parameter count used by :func:`bic`.

    Per component: mean, Stiefel coordinates ``M d - d (d + 1) / 2``, the
    ``d`` leading eigenvalues, ``b`` and the mixing parameters; plus
    ``K - 1`` weights.
    """
    M = model.M
    rho = model.K - 1
    for c in model.components:
        d = c.d
        rho += M + d * M - d * (d + 1) // 2 + d + 1 + c.mixing.n_params
    return rho


def bic(model, data, n, chunk_rows=8192):
    if n <= 0:
        raise ValueError("bic needs a positive sample size")
    total, seen = _loglik_and_count(model, data, chunk_rows)
    if seen != n:
        raise ValueError(f"bic was told n={n} but the stream held {seen} observations")
    return -2.0 * total + n_free_params(model) * np.log(n)
