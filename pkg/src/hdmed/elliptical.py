"""High-dimensional elliptical components (Gaussian scale mixtures).

A component stores its scale matrix in parsimonious form: the ``d`` leading
eigenvectors ``Dstar`` with eigenvalues ``a`` and a single residual
eigenvalue ``b`` shared by the ``M - d`` trailing directions. Nothing here
ever materialises the trailing eigenvectors or an ``M x M`` matrix.

All functions accept either a single observation of shape ``(M,)`` or a
batch of shape ``(n, M)`` and return a scalar or an ``(n,)`` array
accordingly.
"""
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import digamma, gammaln

from .exceptions import DimensionError, InvalidComponentError

LOG_2PI = np.log(2.0 * np.pi)

# Round-off in the Mahalanobis form below this is clamped to zero, anything
# more negative is a bug.
_NEG_U_TOL = -1e-12


@dataclass(frozen=True)
class MixingFamily:
    """Distribution of the positive mixing variable ``W``.

    ``tag`` is ``"gaussian"`` (``W == 1``) or ``"student"`` (``W`` Gamma with
    shape = rate = ``nu / 2``).
    """

    tag: str = "gaussian"
    nu: Optional[float] = None

    def __post_init__(self):
        if self.tag not in ("gaussian", "student"):
            raise ValueError(f"unknown mixing family {self.tag!r}")
        if self.tag == "student":
            if self.nu is None or not np.isfinite(self.nu) or self.nu <= 0:
                raise ValueError(f"Student degrees of freedom must be > 0, got {self.nu}")
            object.__setattr__(self, "nu", float(self.nu))
        elif self.nu is not None:
            raise ValueError("Gaussian mixing takes no degrees of freedom")

    @classmethod
    def gaussian(cls):
        return cls("gaussian")

    @classmethod
    def student(cls, nu):
        return cls("student", nu)

    @property
    def is_gaussian(self):
        return self.tag == "gaussian"

    @property
    def alpha(self):
        return None if self.is_gaussian else self.nu / 2.0

    @property
    def beta(self):
        return None if self.is_gaussian else self.nu / 2.0

    @property
    def n_params(self):
        return 0 if self.is_gaussian else 1


@dataclass(frozen=True, eq=False)
class HdEdComponent:
    """One elliptical component with scale ``b I + Dstar diag(a - b) Dstar^T``.

    ``d == M`` is accepted (no residual subspace); it is only meaningful for
    lossless test configurations.
    """

    mu: np.ndarray
    Dstar: np.ndarray
    a: np.ndarray
    b: float
    mixing: MixingFamily = MixingFamily()

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(-1)
        D = np.array(self.Dstar, dtype=np.float64)
        a = np.array(self.a, dtype=np.float64).reshape(-1)
        b = float(self.b)
        if D.ndim == 1:
            D = D[:, None]
        M, d = D.shape
        if mu.shape[0] != M:
            raise DimensionError(f"mu has length {mu.shape[0]} but Dstar has {M} rows")
        if a.shape[0] != d:
            raise DimensionError(f"a has length {a.shape[0]} but Dstar has {d} columns")
        if not 1 <= d <= M:
            raise InvalidComponentError(f"intrinsic dimension must be in [1, M], got {d}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(D)) and np.all(np.isfinite(a))):
            raise InvalidComponentError("component parameters must be finite")
        if not (np.isfinite(b) and b > 0):
            raise InvalidComponentError(f"residual eigenvalue b must be > 0, got {b}")
        if np.any(a <= b):
            raise InvalidComponentError(f"leading eigenvalues must exceed b={b}, got {a}")
        if np.any(np.diff(a) > 1e-12 * a[0]):
            raise InvalidComponentError("leading eigenvalues must be sorted non-increasing")
        gram = D.T @ D
        if not np.allclose(gram, np.eye(d), rtol=0.0, atol=1e-10):
            raise InvalidComponentError("Dstar columns are not orthonormal")
        for arr in (mu, D, a):
            arr.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Dstar", D)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def M(self):
        return self.mu.shape[0]

    @property
    def d(self):
        return self.a.shape[0]

    def with_mixing(self, mixing):
        return HdEdComponent(self.mu, self.Dstar, self.a, self.b, mixing)


class GeneratorEval(NamedTuple):
    log_g: np.ndarray
    dlog_g: np.ndarray


def _as_batch(comp, y):
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    Y = y[None, :] if single else y
    if Y.ndim != 2 or Y.shape[1] != comp.M:
        raise DimensionError(f"expected observations of length {comp.M}, got shape {y.shape}")
    return Y, single


def _unbatch(values, single):
    return float(values[0]) if single else values


def scale_matrix(comp):
    """Dense ``M x M`` scale matrix. Only for small ``M`` (tests, batch EM)."""
    D = comp.Dstar
    S = comp.b * np.eye(comp.M) + (D * (comp.a - comp.b)) @ D.T
    return 0.5 * (S + S.T)


def _mahalanobis_batch(comp, Y):
    diff = Y - comp.mu
    proj = diff @ comp.Dstar
    inside = np.sum(proj * proj / comp.a, axis=1)
    if comp.d == comp.M:
        return inside
    # explicit residual instead of |diff|^2 - |proj|^2: no cancellation when b is tiny
    resid = diff - proj @ comp.Dstar.T
    u = inside + np.einsum("ij,ij->i", resid, resid) / comp.b
    if np.any(u < _NEG_U_TOL):
        raise ArithmeticError("negative squared Mahalanobis distance")
    return np.maximum(u, 0.0)


def mahalanobis_reduced(comp, y):
    """Squared Mahalanobis distance using only ``Dstar``, ``a`` and ``b``."""
    Y, single = _as_batch(comp, y)
    return _unbatch(_mahalanobis_batch(comp, Y), single)


def log_det_scale(comp):
    return float(np.sum(np.log(comp.a)) + (comp.M - comp.d) * np.log(comp.b))


def generator_eval(mixing, u, M):
    """Normalised log density generator and its derivative in ``u``.

    ``log_g`` carries every constant, so that
    ``log_pdf = -0.5 * log|Sigma| + log_g(u)``.
    """
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0):
        raise ValueError("u must be non-negative")
    if mixing.is_gaussian:
        log_g = -0.5 * M * LOG_2PI - 0.5 * u
        dlog_g = np.full_like(u, -0.5)
    else:
        alpha, beta = mixing.alpha, mixing.beta
        shape = alpha + 0.5 * M
        log_g = (
            gammaln(shape)
            - gammaln(alpha)
            + alpha * np.log(beta)
            - 0.5 * M * LOG_2PI
            - shape * np.log(beta + 0.5 * u)
        )
        dlog_g = -shape / (2.0 * beta + u)
    if log_g.ndim == 0:
        return GeneratorEval(float(log_g), float(dlog_g))
    return GeneratorEval(log_g, dlog_g)


def _log_pdf_from_u(comp, u):
    return -0.5 * log_det_scale(comp) + generator_eval(comp.mixing, u, comp.M).log_g


def log_pdf(comp, y):
    """Fully normalised log density of the component at ``y``."""
    Y, single = _as_batch(comp, y)
    return _unbatch(_log_pdf_from_u(comp, _mahalanobis_batch(comp, Y)), single)


def _weight_posterior_from_u(mixing, u, M):
    if mixing.is_gaussian:
        return np.ones_like(u), np.zeros_like(u)
    alpha, beta = mixing.alpha, mixing.beta
    # posterior of W given y is Gamma(alpha + M/2, beta + u/2)
    shape = alpha + 0.5 * M
    rate = beta + 0.5 * u
    return shape / rate, digamma(shape) - np.log(rate)


def weight_posterior(comp, y):
    """``(E[W | y], E[log W | y])`` under the component's mixing law."""
    Y, single = _as_batch(comp, y)
    e_w, e_logw = _weight_posterior_from_u(comp.mixing, _mahalanobis_batch(comp, Y), comp.M)
    if single:
        return float(e_w[0]), float(e_logw[0])
    return e_w, e_logw


def sample_weights(mixing, n, rng):
    if mixing.is_gaussian:
        return np.ones(n)
    return rng.gamma(shape=mixing.alpha, scale=1.0 / mixing.beta, size=n)


def sample_component(comp, n, seed=None):
    """Draw ``n`` rows from the latent-variable generative model."""
    from .projection import loading_matrix

    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    V = loading_matrix(comp).V
    w = sample_weights(comp.mixing, n, rng)
    scale = 1.0 / np.sqrt(w)[:, None]
    x = rng.standard_normal((n, comp.d)) * scale
    e = rng.standard_normal((n, comp.M)) * scale * np.sqrt(comp.b)
    return x @ V.T + comp.mu + e
