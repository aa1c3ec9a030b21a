"""Cluster-wise compression and reconstruction operators.

The reduced representation of ``y`` is the posterior mean of the latent
factor, ``Uinv V^T (y - mu)``, and the reconstruction is ``V x + mu``. With
``V = Dstar sqrt(diag(a) - b I)`` the matrix ``U = b I + V^T V`` is simply
``diag(a)``, so only its diagonal inverse is kept.
"""
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, InvalidComponentError


@dataclass(frozen=True, eq=False)
class ProjectionOperator:
    V: np.ndarray
    uinv_diag: np.ndarray
    mu: np.ndarray
    b: float

    @property
    def Uinv(self):
        return np.diag(self.uinv_diag)

    @property
    def M(self):
        return self.V.shape[0]

    @property
    def d(self):
        return self.V.shape[1]

    @property
    def _coef(self):
        # (Uinv V^T)^T, with Uinv diagonal
        return self.V * self.uinv_diag


def loading_matrix(comp):
    """Build the ``(V, Uinv)`` pair of a component."""
    excess = comp.a - comp.b
    if np.any(excess <= 0):
        raise InvalidComponentError("loading matrix needs a_m > b for every m")
    V = comp.Dstar * np.sqrt(excess)
    return ProjectionOperator(V=V, uinv_diag=1.0 / comp.a, mu=comp.mu, b=comp.b)


def project(op, y):
    """Reduced coordinates ``Uinv V^T (y - mu)``; accepts ``(M,)`` or ``(n, M)``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != op.M or y.ndim > 2:
        raise DimensionError(f"expected observations of length {op.M}, got shape {y.shape}")
    return (y - op.mu) @ op._coef


def reconstruct(op, xhat):
    xhat = np.asarray(xhat, dtype=np.float64)
    if xhat.shape[-1] != op.d or xhat.ndim > 2:
        raise DimensionError(f"expected reduced vectors of length {op.d}, got shape {xhat.shape}")
    return xhat @ op.V.T + op.mu


def reconstruction_rmse(model, data, chunk_rows=8192):
    """Root mean squared reconstruction error over a stream, in one pass.

    ``data`` is anything :func:`hdmed.streams.iter_chunks` understands. Each
    row is compressed with the operator of its most probable cluster.
    """
    from .mixture import assign
    from .streams import iter_chunks

    ops = [loading_matrix(c) for c in model.components]
    total, count = 0.0, 0
    for Y in iter_chunks(data, chunk_rows):
        labels = assign(model, Y)
        for k in np.unique(labels):
            Yk = Y[labels == k]
            err = Yk - reconstruct(ops[k], project(ops[k], Yk))
            total += float(np.einsum("ij,ij->", err, err))
        count += Y.shape[0]
    if count == 0:
        raise ValueError("reconstruction_rmse needs at least one observation")
    return float(np.sqrt(total / count))
