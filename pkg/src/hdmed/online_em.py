"""Online (stochastic-approximation) EM for HD-ED mixtures.

The complete-data likelihood of every component is an exponential family in
``(w y, w y y^T, w y^T y, w, s_w(w))``. The online algorithm keeps a running
convex combination of the per-batch conditional expectations of these
statistics and maps it back to parameters with a closed-form M-step.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh
from scipy.special import digamma, polygamma

from .elliptical import (
    HdEdComponent,
    MixingFamily,
    _log_pdf_from_u,
    _mahalanobis_batch,
    _weight_posterior_from_u,
)
from .exceptions import CollapseError, DimensionError, InvalidComponentError
from .mixture import HdMedModel, _normalise, score_samples
from .streams import BlockShuffle, is_random_access, is_replayable, iter_chunks, known_length, rebatch

COLLAPSE_MASS = 1e-8
EIG_FLOOR_REL = 1e-10
NU_MIN, NU_MAX = 0.1, 1e3


@dataclass
class SuffStats:
    """Per-component running statistics, stacked along the first axis.

    ``s5[:, 0]`` holds ``E[r w]`` and ``s5[:, 1]`` holds ``E[r log w]``.
    """

    s0: np.ndarray
    s1: np.ndarray
    S2: np.ndarray
    s3: np.ndarray
    s4: np.ndarray
    s5: np.ndarray

    _FIELDS = ("s0", "s1", "S2", "s3", "s4", "s5")

    @property
    def K(self):
        return self.s0.shape[0]

    @property
    def M(self):
        return self.s1.shape[1]

    def copy(self):
        return SuffStats(*(getattr(self, f).copy() for f in self._FIELDS))

    def blend(self, other, gamma):
        return SuffStats(
            *(gamma * getattr(other, f) + (1.0 - gamma) * getattr(self, f) for f in self._FIELDS)
        )


@dataclass(frozen=True)
class LearningRateSchedule:
    """``gamma_i = (i + i0) ** -kappa``."""

    kappa: float = 0.6
    i0: int = 2

    def __post_init__(self):
        if not 0.5 < self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in (0.5, 1], got {self.kappa}")
        if self.i0 < 0:
            raise ValueError("i0 must be non-negative")
        if self.kappa == 1.0 and self.i0 == 0:
            raise ValueError("kappa=1 with i0=0 gives gamma_1 = 1")

    def __call__(self, i):
        if i < 1:
            raise ValueError("steps are numbered from 1")
        return (i + self.i0) ** -self.kappa


@dataclass(frozen=True)
class InitSpec:
    """Spectral initialisation settings.

    ``dims`` overrides the knee selection with a fixed intrinsic dimension
    (an int for every component, or one value per component).
    """

    rows: int = 10000
    sensitivity: float = 1.0
    d_max: int = None
    iters: int = 50
    dims: object = None


@dataclass(frozen=True)
class FitConfig:
    K: int = 1
    family: str = "gaussian"
    batch_size: int = 2048
    passes: int = 1
    schedule: LearningRateSchedule = LearningRateSchedule()
    init: InitSpec = InitSpec()
    seed: int = 0
    heldout_rows: int = None
    on_collapse: str = "raise"
    report_every: int = 1
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.passes < 1:
            raise ValueError("passes must be >= 1")
        if self.on_collapse not in ("raise", "reseed"):
            raise ValueError("on_collapse must be 'raise' or 'reseed'")
        if self.family not in ("gaussian", "student"):
            raise ValueError(f"unknown family {self.family!r}")


@dataclass
class FitReport:
    step: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    heldout_loglik: list = field(default_factory=list)
    min_mass: list = field(default_factory=list)
    events: list = field(default_factory=list)
    n_seen: int = 0
    n_heldout: int = 0

    @property
    def degenerate(self):
        return any(isinstance(e, dict) for _, e in self.events)

    def record(self, step, gamma, loglik, min_mass):
        self.step.append(step)
        self.gamma.append(gamma)
        self.heldout_loglik.append(loglik)
        self.min_mass.append(min_mass)

    def to_text(self, delimiter="\t"):
        lines = [delimiter.join(("step", "gamma", "heldout_loglik", "min_component_mass"))]
        for row in zip(self.step, self.gamma, self.heldout_loglik, self.min_mass):
            lines.append(delimiter.join(repr(float(v)) if i else str(v) for i, v in enumerate(row)))
        return "\n".join(lines) + "\n"


def _component_terms(model, Y):
    """Mahalanobis distances and weighted log densities, both ``(n, K)``."""
    n = Y.shape[0]
    u = np.empty((n, model.K))
    logp = np.empty((n, model.K))
    for k, comp in enumerate(model.components):
        u[:, k] = _mahalanobis_batch(comp, Y)
        logp[:, k] = np.log(model.weights[k]) + _log_pdf_from_u(comp, u[:, k])
    return u, logp


def expected_stats(model, y, return_loglik=False):
    """Conditional expectation of the statistics, averaged over the batch."""
    Y = np.asarray(y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[None, :]
    if Y.shape[1] != model.M:
        raise DimensionError(f"expected observations of length {model.M}, got {Y.shape[1]}")
    n, M, K = Y.shape[0], model.M, model.K
    u, logp = _component_terms(model, Y)
    r, norm = _normalise(logp)
    sq = np.einsum("ij,ij->i", Y, Y)
    s0 = r.mean(axis=0)
    s1 = np.empty((K, M))
    S2 = np.empty((K, M, M))
    s3 = np.empty(K)
    s4 = np.empty(K)
    s5 = np.empty((K, 2))
    for k, comp in enumerate(model.components):
        e_w, e_logw = _weight_posterior_from_u(comp.mixing, u[:, k], M)
        rw = r[:, k] * e_w
        s1[k] = rw @ Y / n
        S2[k] = (Y * rw[:, None]).T @ Y / n
        s3[k] = rw @ sq / n
        s4[k] = rw.mean()
        s5[k] = (s4[k], r[:, k] @ e_logw / n)
    stats = SuffStats(s0, s1, 0.5 * (S2 + S2.transpose(0, 2, 1)), s3, s4, s5)
    if return_loglik:
        return stats, float(norm.sum())
    return stats


def sa_update(s_prev, s_new, gamma):
    """``gamma * s_new + (1 - gamma) * s_prev``, field by field."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"learning rate must lie in (0, 1), got {gamma}")
    return s_prev.blend(s_new, gamma)


def _dof_equation(nu, c):
    return c + 1.0 + np.log(nu / 2.0) - digamma(nu / 2.0)


def solve_student_dof(mean_logw_minus_w, lo=NU_MIN, hi=NU_MAX):
    """Root in ``nu`` of ``E[log w] - E[w] - psi(nu/2) + log(nu/2) + 1 = 0``.

    The left side decreases in ``nu``; the root is clamped to ``[lo, hi]``.
    """
    c = float(mean_logw_minus_w)
    if _dof_equation(hi, c) >= 0.0:
        return hi
    if _dof_equation(lo, c) <= 0.0:
        return lo
    # bisection in log(nu), then Newton with the bracket as safeguard
    a, b = math.log(lo), math.log(hi)
    for _ in range(60):
        mid = 0.5 * (a + b)
        if _dof_equation(math.exp(mid), c) > 0.0:
            a = mid
        else:
            b = mid
    lo_nu, hi_nu = math.exp(a), math.exp(b)
    nu = 0.5 * (lo_nu + hi_nu)
    for _ in range(8):
        f = _dof_equation(nu, c)
        fp = 1.0 / nu - 0.5 * polygamma(1, nu / 2.0)
        if fp == 0.0:
            break
        step = nu - f / fp
        if not lo_nu <= step <= hi_nu:
            break
        if step == nu:
            break
        nu = step
    return float(nu)


def _eig_floor(trace, M):
    return EIG_FLOOR_REL * trace / M if trace > 0 else 1e-12


def fit_scale(evecs, evals, trace, M, d, flags=None):
    """Turn leading eigenpairs into ``(Dstar, a, b)`` meeting the invariants.

    ``evals`` are sorted descending and may hold more than ``d`` entries. The
    residual eigenvalue is the average of what the leading ones leave of
    ``trace``. Components whose ``a_d`` does not exceed ``b`` lose trailing
    directions; a fully flat spectrum keeps one direction nudged above ``b``.
    """
    flags = [] if flags is None else flags
    trace = max(float(trace), 0.0)
    floor = _eig_floor(trace, M)
    while True:
        a = np.array(evals[:d], dtype=np.float64)
        b = (trace - a.sum()) / (M - d)
        if b < floor:
            b = floor
            flags.append("b_floor")
        if a[-1] > b or d == 1:
            break
        d -= 1
        flags.append("dim_shrunk")
    if a[0] <= b:
        a = np.full(1, b * (1.0 + 1e-6))
        flags.append("flat_spectrum")
    # ties between eigenvalues are fine, reversed order from round-off is not
    a = np.minimum.accumulate(a)
    return np.array(evecs[:, :d]), a, b, flags


def _top_eigh(S, d):
    M = S.shape[0]
    vals, vecs = eigh(S, subset_by_index=[M - d, M - 1])
    return vecs[:, ::-1], vals[::-1]


def m_step(s, prev):
    """Map running statistics to parameters.

    Intrinsic dimensions and the mixing family come from ``prev``. Raises
    :class:`CollapseError` if a component's mass falls below ``1e-8``.
    """
    if s.K != prev.K or s.M != prev.M:
        raise DimensionError("statistics and model disagree on K or M")
    collapsed = [k for k in range(s.K) if not s.s0[k] > COLLAPSE_MASS]
    if collapsed:
        raise CollapseError(f"components {collapsed} have collapsed", collapsed)
    M = s.M
    comps, flags = [], {}
    for k, old in enumerate(prev.components):
        if old.d >= M:
            raise InvalidComponentError("the M-step needs d < M")
        inv0 = 1.0 / s.s0[k]
        s1, S2 = s.s1[k] * inv0, s.S2[k] * inv0
        s3, s4 = s.s3[k] * inv0, s.s4[k] * inv0
        mu = s1 / s4
        scatter = S2 - np.outer(s1, s1) / s4
        scatter = 0.5 * (scatter + scatter.T)
        trace = s4 * mu @ mu + s3 - 2.0 * mu @ s1
        evecs, evals = _top_eigh(scatter, old.d)
        D, a, b, comp_flags = fit_scale(evecs, evals, trace, M, old.d)
        if old.mixing.is_gaussian:
            mixing = old.mixing
        else:
            w, logw = s.s5[k] * inv0
            mixing = MixingFamily.student(solve_student_dof(logw - w))
        comps.append(HdEdComponent(mu, D, a, b, mixing))
        if comp_flags:
            flags[k] = sorted(set(comp_flags))
    weights = s.s0 / s.s0.sum()
    return HdMedModel(tuple(comps), weights / weights.sum(), {"m_step": flags} if flags else {})


def reseed(s, model, Y, components):
    """Replace collapsed components by ones centred on badly explained rows.

    Each reseeded component keeps its previous scale and receives 5% of the
    mass (at most ``1/K``) as if it had seen a point cloud with that scale.
    """
    from .elliptical import scale_matrix

    s = s.copy()
    worst = np.argsort(score_samples(model, Y))
    mass = min(0.05, 1.0 / model.K)
    for j, k in enumerate(components):
        old = model.components[k]
        y = Y[worst[j % Y.shape[0]]]
        scale = scale_matrix(old)
        if old.mixing.is_gaussian:
            e_logw = 0.0
        else:
            e_logw = digamma(old.mixing.nu / 2.0) - np.log(old.mixing.nu / 2.0)
        s.s0[k] = mass
        s.s1[k] = mass * y
        s.S2[k] = mass * (scale + np.outer(y, y))
        s.s3[k] = mass * (np.trace(scale) + y @ y)
        s.s4[k] = mass
        s.s5[k] = (mass, mass * e_logw)
    s.s0 /= s.s0.sum()
    return s


def _heldout_size(data, cfg):
    if cfg.heldout_rows is not None:
        return int(cfg.heldout_rows)
    n = known_length(data)
    if n is None:
        return min(cfg.batch_size, 10000)
    return min(int(math.ceil(0.01 * n)), 10000)


def _skip_heldout(chunks, n_heldout, sink):
    """Drop the first ``n_heldout`` rows of a stream, appending them to ``sink``."""
    left = n_heldout
    for chunk in chunks:
        if left:
            take = min(left, chunk.shape[0])
            if sink is not None:
                sink.append(chunk[:take].copy())
            left -= take
            chunk = chunk[take:]
        if chunk.shape[0]:
            yield chunk


def fit_online(data, cfg, init, chunk_rows=None):
    """Stream ``data`` through mini-batch online EM starting from ``init``.

    Returns ``(model, report)``. Memory use depends on ``batch_size``, ``M``
    and ``K`` only, never on the number of rows in ``data``. A small fixed
    subset of rows is held out to monitor the log-likelihood: the first rows
    of a plain stream, or the first blocks of the shuffled order when
    ``cfg.shuffle`` applies to an array or a dictionary store.
    """
    if cfg.passes > 1 and not is_replayable(data):
        raise ValueError("several passes need a replayable data source")
    chunk_rows = chunk_rows or cfg.batch_size
    n_heldout = _heldout_size(data, cfg)
    held_parts = []
    if cfg.shuffle and is_random_access(data):
        order = BlockShuffle(data, cfg.seed, heldout_rows=n_heldout)
        heldout = order.heldout()

        def epoch(p):
            return order.epoch(p, chunk_rows)
    else:
        heldout = None

        def epoch(p):
            sink = held_parts if p == 0 else None
            return _skip_heldout(iter_chunks(data, chunk_rows), n_heldout, sink)

    report = FitReport()
    model, s, step = init, None, 0
    for p in range(cfg.passes):
        for Y in rebatch(epoch(p), cfg.batch_size):
            if Y.shape[1] != init.M:
                raise DimensionError(f"stream rows have length {Y.shape[1]}, model expects {init.M}")
            if heldout is None and held_parts:
                heldout = np.concatenate(held_parts)
            report.n_seen += Y.shape[0]
            new = expected_stats(model, Y)
            if s is None:
                s, gamma = new, 1.0
            else:
                step += 1
                gamma = cfg.schedule(step)
                s = sa_update(s, new, gamma)
            try:
                model = m_step(s, model)
            except CollapseError as err:
                if cfg.on_collapse == "raise":
                    raise
                s = reseed(s, model, Y, err.components)
                report.events.append((step, f"reseeded components {list(err.components)}"))
                model = m_step(s, model)
            if model.flags:
                report.events.append((step, model.flags))
            if step % cfg.report_every == 0:
                report.n_heldout = 0 if heldout is None else heldout.shape[0]
                ll = float(np.mean(score_samples(model, heldout))) if report.n_heldout else float("nan")
                report.record(step, gamma, ll, float(model.weights.min()))
    if s is None:
        raise ValueError("the data stream holds no rows beyond the held-out set")
    return model, report
