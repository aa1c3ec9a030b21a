"""Nearest-neighbour matching against full and compressed dictionaries."""
from dataclasses import dataclass

import numpy as np

from .dictionary_io import l2_normalize
from .exceptions import DimensionError
from .mixture import responsibilities
from .projection import loading_matrix, project, reconstruct

# rows of the pairwise distance block evaluated at once
_BLOCK_ELEMS = 1 << 22


@dataclass(eq=False)
class MatchResult:
    """Per-query matches.

    ``madds`` counts multiply-adds spent in the nearest-neighbour searches;
    ``overhead_madds`` counts those spent on cluster assignment and
    projection of the queries (zero for full matching).
    """

    params: np.ndarray
    index: np.ndarray
    cluster: np.ndarray
    distance: np.ndarray
    fallback: np.ndarray
    madds: int = 0
    overhead_madds: int = 0

    def __len__(self):
        return self.index.shape[0]

    def to_text(self, delimiter="\t"):
        L = self.params.shape[1]
        lines = [delimiter.join(["query_id", "cluster", "dict_index", "distance"] + [f"t_{j}" for j in range(L)])]
        for q in range(len(self)):
            row = [str(q), str(int(self.cluster[q])), str(int(self.index[q])), repr(float(self.distance[q]))]
            row += [repr(float(v)) for v in self.params[q]]
            lines.append(delimiter.join(row))
        return "\n".join(lines) + "\n"

    def write(self, path, delimiter="\t"):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text(delimiter))


def read_match_table(path, delimiter="\t"):
    """Read back the table written by :meth:`MatchResult.write`."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(delimiter)
        data = np.loadtxt(fh, delimiter=delimiter, ndmin=2)
    if header[:4] != ["query_id", "cluster", "dict_index", "distance"]:
        raise ValueError(f"{path}: not a match table")
    if data.size == 0:
        data = data.reshape(0, len(header))
    return MatchResult(
        params=data[:, 4:],
        index=data[:, 2].astype(np.int64),
        cluster=data[:, 1].astype(np.int64),
        distance=data[:, 3],
        fallback=np.zeros(data.shape[0], bool),
    )


def _check_queries(queries, M):
    Y = np.asarray(queries, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[None, :]
    if Y.ndim != 2 or Y.shape[1] != M:
        raise DimensionError(f"queries must have width {M}, got shape {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise ValueError("queries must be finite")
    return Y


def _nearest(Q, R):
    """Index and squared distance of the nearest row of ``R`` for each row of ``Q``.

    Ties go to the lowest row of ``R``.
    """
    best = np.full(Q.shape[0], np.inf)
    arg = np.zeros(Q.shape[0], dtype=np.int64)
    if R.shape[0] == 0:
        return arg, best
    rn = np.einsum("ij,ij->i", R, R)
    step = max(1, _BLOCK_ELEMS // max(R.shape[0], 1))
    for s in range(0, Q.shape[0], step):
        q = Q[s:s + step]
        d2 = rn[None, :] - 2.0 * (q @ R.T)
        j = np.argmin(d2, axis=1)
        arg[s:s + step] = j
        diff = q - R[j]
        best[s:s + step] = np.einsum("ij,ij->i", diff, diff)
    return arg, best


METRICS = ("reduced", "signal")


def match_compressed(cd, queries, top_p=1, metric="reduced"):
    """Cluster-wise matching of ``queries`` against a compressed dictionary.

    Each query is assigned to its most probable cluster, reduced with that
    cluster's projection and compared to the cluster's reduced rows by
    squared Euclidean distance. Clusters with no dictionary rows are
    skipped in favour of the next most probable one (``fallback`` is set).
    With ``top_p > 1`` the best candidate of each of the ``top_p`` most
    probable non-empty clusters is kept and the one whose reconstruction is
    closest to the query in signal space wins.

    ``metric="reduced"`` compares reduced coordinates directly;
    ``metric="signal"`` compares the reconstructions ``V x`` instead, which
    amounts to weighting reduced coordinate ``m`` by ``sqrt(a_m - b)``.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    model = cd.model
    Y = _check_queries(queries, model.M)
    if cd.normalize:
        Y = l2_normalize(Y)
    if top_p < 1:
        raise ValueError("top_p must be >= 1")
    n, K = Y.shape[0], model.K
    counts = cd.counts
    if counts.sum() == 0:
        raise ValueError("compressed dictionary is empty")
    ops = [loading_matrix(c) for c in model.components]
    order = np.argsort(-responsibilities(model, Y), axis=1, kind="stable")
    # drop empty clusters, keeping the probability order
    usable = [row[counts[row] > 0][:top_p] for row in order]
    fallback = np.array([u[0] != row[0] for u, row in zip(usable, order)])
    overhead = n * sum(c.M * c.d for c in model.components)

    best_idx = np.zeros(n, dtype=np.int64)
    best_k = np.zeros(n, dtype=np.int64)
    best_dist = np.full(n, np.inf)
    best_score = np.full(n, np.inf)
    best_params = np.zeros((n, cd.L))
    madds = 0
    for rank in range(min(top_p, K)):
        cand = np.array([u[rank] if rank < len(u) else -1 for u in usable])
        for k in range(K):
            sel = np.flatnonzero(cand == k)
            if sel.size == 0:
                continue
            part = cd.partitions[k]
            R = np.asarray(part.reduced, dtype=np.float64)
            X = project(ops[k], Y[sel])
            if metric == "signal":
                w = np.sqrt(model.components[k].a - model.components[k].b)
                R, X = R * w, X * w
            j, dist = _nearest(X, R)
            madds += sel.size * R.shape[0] * R.shape[1]
            if top_p == 1:
                score = dist
            else:
                diff = Y[sel] - reconstruct(ops[k], np.asarray(part.reduced[j], dtype=np.float64))
                score = np.einsum("ij,ij->i", diff, diff)
                overhead += sel.size * model.M * (model.components[k].d + 1)
            idx = part.indices[j]
            win = (score < best_score[sel]) | ((score == best_score[sel]) & (idx < best_idx[sel]))
            upd = sel[win]
            best_score[upd] = score[win]
            best_dist[upd] = dist[win]
            best_idx[upd] = idx[win]
            best_k[upd] = k
            best_params[upd] = part.params[j[win]]
    return MatchResult(best_params, best_idx, best_k, best_dist, fallback, int(madds), int(overhead))


def full_match(store, queries, chunk_rows=8192, normalize=False):
    """Exhaustive nearest neighbour over every dictionary row (ties to the lowest index)."""
    if store.N == 0:
        raise ValueError("dictionary is empty")
    Y = _check_queries(queries, store.M)
    if normalize:
        Y = l2_normalize(Y)
    n = Y.shape[0]
    best = np.full(n, np.inf)
    best_idx = np.zeros(n, dtype=np.int64)
    best_params = np.zeros((n, store.L))
    offset = 0
    for signals, params in store.read_chunks(chunk_rows):
        S = signals.astype(np.float64)
        if normalize:
            S = l2_normalize(S)
        j, dist = _nearest(Y, S)
        win = dist < best
        best[win] = dist[win]
        best_idx[win] = j[win] + offset
        best_params[win] = params[j[win]]
        offset += S.shape[0]
    return MatchResult(
        best_params, best_idx, np.zeros(n, dtype=np.int64), best,
        np.zeros(n, bool), int(n) * store.N * store.M, 0,
    )


def mae(params, reference):
    """Per-parameter mean absolute error."""
    params = getattr(params, "params", params)
    a = np.asarray(params, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        raise ValueError("no rows to compare")
    return np.mean(np.abs(a - b), axis=0)


def rmse_signals(a, b):
    """Root of the mean squared difference over all entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty input")
    return float(np.sqrt(np.mean((a - b) ** 2)))
