"""scikit-learn style estimator around the HD-MED fitting pipeline."""
import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, DensityMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import CollapseError, DimensionError
from .initialization import spectral_init
from .mixture import assign, bic, responsibilities, score_samples
from .online_em import (
    FitConfig,
    InitSpec,
    LearningRateSchedule,
    expected_stats,
    fit_online,
    m_step,
    reseed,
    sa_update,
)
from .projection import loading_matrix, project, reconstruct
from .streams import is_random_access, known_length, sample_rows


class HDMixture(ClusterMixin, DensityMixin, BaseEstimator):
    """Mixture of high-dimensional elliptical components fitted by online EM.

    Each component has a scale matrix ``b I + D diag(a - b) D^T`` with its
    own intrinsic dimension ``d_k``; ``family`` selects Gaussian or
    Student-t components.

    Parameters
    ----------
    n_components : int
        Number of mixture components ``K``.
    family : {"gaussian", "student"}
    batch_size : int
        Rows per online EM step.
    passes : int
        Sweeps over the data (needs a replayable source when > 1).
    kappa, i0 : float
        Learning rates ``(i + i0) ** -kappa``.
    init_rows : int
        Size of the random subsample used by the spectral initialisation.
    sensitivity : float
        Knee detector sensitivity for the intrinsic dimensions.
    d_max : int or None
        Upper bound on the selected dimensions.
    dims : int, sequence of int or None
        Fixed intrinsic dimensions, bypassing the knee detector.
    on_collapse : {"raise", "reseed"}
    shuffle : bool
        Visit rows of arrays and dictionary stores in a seeded random order.
    random_state : int

    Attributes
    ----------
    model_ : HdMedModel
    report_ : FitReport or None
    weights_, means_ : ndarray
    dims_ : ndarray of int
    n_features_in_ : int
    """

    def __init__(self, n_components=1, family="gaussian", batch_size=2048, passes=1,
                 kappa=0.6, i0=2.0, init_rows=10000, sensitivity=1.0, d_max=None,
                 dims=None, init_iters=50, on_collapse="raise", shuffle=True, random_state=0):
        self.n_components = n_components
        self.family = family
        self.batch_size = batch_size
        self.passes = passes
        self.kappa = kappa
        self.i0 = i0
        self.init_rows = init_rows
        self.sensitivity = sensitivity
        self.d_max = d_max
        self.dims = dims
        self.init_iters = init_iters
        self.on_collapse = on_collapse
        self.shuffle = shuffle
        self.random_state = random_state

    def _seed(self):
        return 0 if self.random_state is None else int(self.random_state)

    def _init_spec(self):
        return InitSpec(self.init_rows, self.sensitivity, self.d_max, self.init_iters, self.dims)

    def _config(self):
        return FitConfig(
            K=self.n_components,
            family=self.family,
            batch_size=self.batch_size,
            passes=self.passes,
            schedule=LearningRateSchedule(self.kappa, self.i0),
            init=self._init_spec(),
            seed=self._seed(),
            on_collapse=self.on_collapse,
            shuffle=self.shuffle,
        )

    def _set_model(self, model):
        self.model_ = model
        self.weights_ = model.weights
        self.means_ = np.array([c.mu for c in model.components])
        self.dims_ = np.asarray(model.dims)
        self.n_features_in_ = model.M
        return self

    def _validate(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(f"X has {X.shape[1]} features, model expects {self.n_features_in_}")
        return X

    def fit(self, X, y=None):
        """Fit on an array, a :class:`DictionaryStore` or a chunk stream."""
        cfg = self._config()
        if isinstance(X, np.ndarray) or isinstance(X, list):
            X = check_array(X, dtype=np.float64, ensure_min_samples=max(2, self.n_components))
        X0 = sample_rows(X, self.init_rows, self._seed())
        init = spectral_init(X0, self.n_components, self.family, cfg.init, seed=self._seed())
        model, report = fit_online(X, cfg, init)
        self.report_ = report
        self._stats_ = None
        return self._set_model(model)

    def partial_fit(self, X, y=None):
        """One online EM step on the batch ``X``.

        The first call initialises the model from ``X`` itself.
        """
        X = check_array(X, dtype=np.float64, ensure_min_samples=max(2, self.n_components))
        if not hasattr(self, "model_") or getattr(self, "_stats_", None) is None:
            model = spectral_init(X, self.n_components, self.family, self._init_spec(), seed=self._seed())
            self._step_ = 0
            self._stats_ = expected_stats(model, X)
            self.report_ = None
        else:
            self._validate(X)
            model = self.model_
            self._step_ += 1
            gamma = LearningRateSchedule(self.kappa, self.i0)(self._step_)
            self._stats_ = sa_update(self._stats_, expected_stats(model, X), gamma)
        try:
            model = m_step(self._stats_, model)
        except CollapseError as err:
            if self.on_collapse == "raise":
                raise
            self._stats_ = reseed(self._stats_, model, X, err.components)
            model = m_step(self._stats_, model)
        return self._set_model(model)

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)

    def predict(self, X):
        X = self._validate(X)
        return assign(self.model_, X)

    def predict_proba(self, X):
        X = self._validate(X)
        return responsibilities(self.model_, X)

    def score_samples(self, X):
        X = self._validate(X)
        return score_samples(self.model_, X)

    def score(self, X, y=None):
        """Mean log-likelihood per row."""
        return float(np.mean(self.score_samples(X)))

    def bic(self, X):
        check_is_fitted(self, "model_")
        if not is_random_access(X):
            X = check_array(X, dtype=np.float64)
        return bic(self.model_, X, known_length(X))

    def transform(self, X):
        """Reduced coordinates in each row's most probable cluster.

        Rows are zero-padded to the largest intrinsic dimension; use
        :meth:`predict` to know which projection was applied.
        """
        X = self._validate(X)
        labels = assign(self.model_, X)
        out = np.zeros((X.shape[0], int(self.dims_.max())))
        for k, comp in enumerate(self.model_.components):
            sel = labels == k
            if sel.any():
                out[sel, :comp.d] = project(loading_matrix(comp), X[sel])
        return out

    def reconstruct(self, X):
        """Posterior-mean reconstructions through each row's most probable cluster."""
        X = self._validate(X)
        labels = assign(self.model_, X)
        out = np.empty_like(X)
        for k, comp in enumerate(self.model_.components):
            sel = labels == k
            if sel.any():
                op = loading_matrix(comp)
                out[sel] = reconstruct(op, project(op, X[sel]))
        return out

    def sample(self, n_samples=1, random_state=None):
        """Draw ``(X, labels)`` from the fitted mixture."""
        from .elliptical import sample_component

        check_is_fitted(self, "model_")
        rng = np.random.default_rng(self._seed() if random_state is None else random_state)
        labels = rng.choice(self.model_.K, size=n_samples, p=self.model_.weights)
        X = np.empty((n_samples, self.n_features_in_))
        for k, comp in enumerate(self.model_.components):
            sel = labels == k
            if sel.any():
                X[sel] = sample_component(comp, int(sel.sum()), rng)
        return X, labels
