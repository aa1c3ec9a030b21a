"""Mixtures of high-dimensional elliptical distributions for dictionary compression and matching."""
__version__ = "0.1.0"

from .dictionary_io import (
    CompressedDictionary,
    DictionaryStore,
    DictionaryWriter,
    SyntheticSpec,
    compress,
    deserialize_model,
    generate_synthetic,
    load_model,
    open_dictionary,
    save_model,
    serialize_model,
    write_dictionary,
)
from .elliptical import (
    HdEdComponent,
    MixingFamily,
    log_det_scale,
    log_pdf,
    mahalanobis_reduced,
    sample_component,
    weight_posterior,
)
from .estimator import HDMixture
from .exceptions import (
    CollapseError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    HDMEDError,
    InvalidComponentError,
)
from .initialization import kneedle, spectral_init
from .matching import MatchResult, full_match, mae, match_compressed, rmse_signals
from .mixture import HdMedModel, assign, bic, log_likelihood, n_free_params, responsibilities
from .online_em import FitConfig, FitReport, InitSpec, LearningRateSchedule, fit_online
from .projection import ProjectionOperator, loading_matrix, project, reconstruct, reconstruction_rmse
from .selection import fit_model, select_k
