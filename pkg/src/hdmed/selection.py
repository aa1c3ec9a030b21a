"""Choosing the number of components from a BIC sweep."""
from dataclasses import dataclass, field

import numpy as np

from .exceptions import CollapseError
from .initialization import kneedle, spectral_init
from .mixture import bic, n_free_params
from .online_em import FitConfig, InitSpec, fit_online
from .streams import known_length, sample_rows


def fit_model(data, K, family="gaussian", init_spec=InitSpec(), seed=0, **config):
    """Spectral initialisation on a row subsample followed by online EM."""
    X0 = sample_rows(data, init_spec.rows, seed)
    init = spectral_init(X0, K, family, init_spec, seed=seed)
    cfg = FitConfig(K=K, family=family, init=init_spec, seed=seed, **config)
    return fit_online(data, cfg, init)


@dataclass
class SelectionResult:
    Ks: list
    bics: list
    n_params: list
    dims: list
    models: dict = field(default_factory=dict, repr=False)

    @property
    def best_K(self):
        vals = np.array(self.bics, dtype=float)
        if not np.isfinite(vals).any():
            return None
        return self.Ks[int(np.nanargmin(np.where(np.isfinite(vals), vals, np.nan)))]

    @property
    def elbow_K(self):
        """Knee of the BIC curve, made non-increasing by a running minimum."""
        vals = np.array(self.bics, dtype=float)
        ok = np.isfinite(vals)
        if ok.sum() < 3:
            return None
        Ks = np.array(self.Ks)[ok]
        knee = kneedle(np.minimum.accumulate(vals[ok]))
        return None if knee is None else int(Ks[knee])

    def to_text(self, delimiter="\t"):
        lines = [delimiter.join(["K", "bic", "n_params", "dims"])]
        for K, v, p, d in zip(self.Ks, self.bics, self.n_params, self.dims):
            dims = ",".join(str(x) for x in d) if d else ""
            lines.append(delimiter.join([str(K), repr(float(v)), str(p), dims]))
        return "\n".join(lines) + "\n"


def select_k(data, Ks, family="gaussian", init_spec=InitSpec(), seed=0, keep_models=False, **config):
    """Fit one model per ``K`` with the same seed and tabulate its BIC.

    A fit that collapses is reported with an infinite BIC instead of
    aborting the sweep.
    """
    n = known_length(data)
    if n is None:
        raise ValueError("BIC needs a data source of known length")
    result = SelectionResult([], [], [], [])
    for K in Ks:
        result.Ks.append(int(K))
        try:
            model, _ = fit_model(data, K, family, init_spec, seed, **config)
        except CollapseError:
            result.bics.append(float("inf"))
            result.n_params.append(0)
            result.dims.append(())
            continue
        result.bics.append(bic(model, data, n))
        result.n_params.append(n_free_params(model))
        result.dims.append(tuple(int(d) for d in model.dims))
        if keep_models:
            result.models[int(K)] = model
    return result
