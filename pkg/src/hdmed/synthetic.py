"""Synthetic HD-MED models and replayable sample streams."""
import numpy as np

from .elliptical import HdEdComponent, MixingFamily, sample_component
from .mixture import HdMedModel


def random_orthonormal(M, d, rng):
    Q, R = np.linalg.qr(rng.standard_normal((M, d)))
    return Q * np.sign(np.diag(R))


def random_model(M, dims, weights=None, family="gaussian", nu=5.0, b=1.0,
                 top_eigenvalue=40.0, separation=12.0, seed=0):
    """A well-separated mixture with planted intrinsic dimensions.

    Leading eigenvalues of component ``k`` are spaced linearly from
    ``top_eigenvalue`` down to ``top_eigenvalue / 4``; means sit on random
    directions ``separation * sqrt(top_eigenvalue)`` apart from the origin.
    """
    rng = np.random.default_rng(seed)
    K = len(dims)
    weights = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, float)
    mixing = MixingFamily.gaussian() if family == "gaussian" else MixingFamily.student(nu)
    comps = []
    for d in dims:
        a = np.linspace(top_eigenvalue, top_eigenvalue / 4.0, d) if d > 1 else np.array([top_eigenvalue])
        mu = random_orthonormal(M, 1, rng)[:, 0] * separation * np.sqrt(top_eigenvalue)
        comps.append(HdEdComponent(mu, random_orthonormal(M, d, rng), a, b, mixing))
    return HdMedModel(tuple(comps), weights / weights.sum())


class MixtureStream:
    """Replayable stream of ``n`` mixture draws, generated chunk by chunk.

    Calling the object returns a fresh iterator over signal chunks; the
    same seed always yields the same rows, so it is a valid multi-pass data
    source. ``outliers`` replaces that fraction of rows by uniform draws in
    a box ``outlier_scale`` times wider than the component means.
    """

    def __init__(self, model, n, chunk_rows=4096, seed=0, outliers=0.0, outlier_scale=3.0):
        self.model = model
        self.n = int(n)
        self.chunk_rows = int(chunk_rows)
        self.seed = seed
        self.outliers = outliers
        means = np.array([c.mu for c in model.components])
        self._box = outlier_scale * max(np.abs(means).max(), 1.0)

    def _chunk(self, index):
        rng = np.random.default_rng([self.seed, index])
        rows = min(self.chunk_rows, self.n - index * self.chunk_rows)
        labels = rng.choice(self.model.K, size=rows, p=self.model.weights)
        X = np.empty((rows, self.model.M))
        for k, comp in enumerate(self.model.components):
            sel = labels == k
            if sel.any():
                X[sel] = sample_component(comp, int(sel.sum()), rng)
        if self.outliers:
            bad = rng.random(rows) < self.outliers
            X[bad] = rng.uniform(-self._box, self._box, size=(int(bad.sum()), self.model.M))
            labels[bad] = -1
        return X, labels

    def __len__(self):
        return self.n

    @property
    def n_chunks(self):
        return -(-self.n // self.chunk_rows)

    def __call__(self):
        for i in range(self.n_chunks):
            yield self._chunk(i)[0]

    def labels(self):
        """True component of every row, ``-1`` for outliers."""
        return np.concatenate([self._chunk(i)[1] for i in range(self.n_chunks)])

    def head(self, rows):
        """The first ``rows`` rows as one array (for in-memory initialisation)."""
        out, got = [], 0
        for chunk in self():
            out.append(chunk[: rows - got])
            got += out[-1].shape[0]
            if got >= rows:
                break
        return np.concatenate(out)
