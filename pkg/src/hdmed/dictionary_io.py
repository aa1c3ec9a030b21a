"""On-disk dictionaries, models and compressed dictionaries.

HDMD dictionary layout (little-endian, 64-byte header)::

    offset  size  field
         0     4  magic  b"HDMD"
         4     2  version (u16, currently 1)
         6     2  dtype tag (u16, 1 = float32, 2 = float64)
         8     8  N (u64) rows
        16     4  M (u32) signal length
        20     4  L (u32) parameter count
        24    40  zero padding
        64        signals, N x M, row-major
                  params,  N x L, row-major

The payload length must match the header exactly.
"""
import csv
import io
import itertools
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .elliptical import HdEdComponent, MixingFamily
from .exceptions import DimensionError, FormatError
from .mixture import HdMedModel, assign
from .projection import loading_matrix, project

MAGIC = b"HDMD"
VERSION = 1
HEADER_SIZE = 64
_HEADER = struct.Struct("<4sHHQII")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}

MODEL_MAGIC = b"HDMM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sHHII")
_COMP_HEADER = struct.Struct("<IIdd")
_FAMILIES = {"gaussian": 0, "student": 1}

COMPRESSED_VERSION = 1


def _dtype(dtype):
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in _TAGS:
        raise ValueError(f"unsupported dictionary dtype {dtype!r}; use float32 or float64")
    return dt


def _pack_header(N, M, L, dtype):
    head = _HEADER.pack(MAGIC, VERSION, _TAGS[_dtype(dtype)], N, M, L)
    return head + b"\0" * (HEADER_SIZE - len(head))


class DictionaryStore:
    """Read-only handle on an HDMD file.

    Several iterators may read the same store concurrently; each call to
    :meth:`read_chunks` opens its own memory map.
    """

    def __init__(self, path):
        self.path = os.fspath(path)
        with open(self.path, "rb") as fh:
            raw = fh.read(HEADER_SIZE)
        if len(raw) < HEADER_SIZE:
            raise FormatError(f"{self.path}: file shorter than the {HEADER_SIZE}-byte header")
        magic, version, tag, N, M, L = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise FormatError(f"{self.path}: bad magic {magic!r}, not an HDMD dictionary")
        if version != VERSION:
            raise FormatError(f"{self.path}: unsupported HDMD version {version}")
        if tag not in _DTYPES:
            raise FormatError(f"{self.path}: unknown dtype tag {tag}")
        if M < 1:
            raise FormatError(f"{self.path}: signal length must be positive")
        self.N, self.M, self.L = int(N), int(M), int(L)
        self.dtype = _DTYPES[tag]
        expected = HEADER_SIZE + self.N * (self.M + self.L) * self.dtype.itemsize
        actual = os.path.getsize(self.path)
        if actual != expected:
            raise FormatError(
                f"{self.path}: payload is {actual - HEADER_SIZE} bytes, header implies "
                f"{expected - HEADER_SIZE} (truncated or corrupted)"
            )

    def __repr__(self):
        return f"DictionaryStore({self.path!r}, N={self.N}, M={self.M}, L={self.L}, dtype={self.dtype.name})"

    def __len__(self):
        return self.N

    def _maps(self):
        if self.N == 0:
            return np.empty((0, self.M), self.dtype), np.empty((0, self.L), self.dtype)
        sig = np.memmap(self.path, self.dtype, "r", HEADER_SIZE, (self.N, self.M))
        par_off = HEADER_SIZE + self.N * self.M * self.dtype.itemsize
        if self.L:
            par = np.memmap(self.path, self.dtype, "r", par_off, (self.N, self.L))
        else:
            par = np.empty((self.N, 0), self.dtype)
        return sig, par

    def read_chunks(self, chunk_rows=8192):
        """Yield ``(signals, params)`` copies of at most ``chunk_rows`` rows."""
        if chunk_rows < 1:
            raise ValueError("chunk_rows must be >= 1")
        sig, par = self._maps()
        for start in range(0, self.N, chunk_rows):
            stop = min(start + chunk_rows, self.N)
            yield np.array(sig[start:stop]), np.array(par[start:stop])

    def read_all(self):
        sig, par = self._maps()
        return np.array(sig), np.array(par)

    def rows(self, index):
        """Signals and params of the given row indices."""
        sig, par = self._maps()
        index = np.asarray(index)
        return np.array(sig[index]), np.array(par[index])


def open_dictionary(path):
    return DictionaryStore(path)


class DictionaryWriter:
    """Streaming HDMD writer for a known number of rows."""

    def __init__(self, path, N, M, L, dtype="float32"):
        self.path = os.fspath(path)
        self.N, self.M, self.L = int(N), int(M), int(L)
        self.dtype = _dtype(dtype)
        self._written = 0
        self._fh = open(self.path, "wb")
        self._fh.write(_pack_header(self.N, self.M, self.L, self.dtype))
        self._fh.truncate(HEADER_SIZE + self.N * (self.M + self.L) * self.dtype.itemsize)
        self._par_off = HEADER_SIZE + self.N * self.M * self.dtype.itemsize

    def append(self, signals, params):
        signals = np.asarray(signals)
        params = np.asarray(params).reshape(signals.shape[0], -1) if self.L else np.empty((signals.shape[0], 0))
        if signals.ndim != 2 or signals.shape[1] != self.M or params.shape[1] != self.L:
            raise DimensionError(
                f"expected chunks of width ({self.M}, {self.L}), got {signals.shape} and {params.shape}"
            )
        if signals.shape[0] != params.shape[0]:
            raise DimensionError("signals and params have different row counts")
        if not (np.all(np.isfinite(signals)) and np.all(np.isfinite(params))):
            raise ValueError("dictionary values must be finite")
        n = signals.shape[0]
        if self._written + n > self.N:
            raise ValueError(f"writer declared {self.N} rows, got more")
        item = self.dtype.itemsize
        self._fh.seek(HEADER_SIZE + self._written * self.M * item)
        self._fh.write(np.ascontiguousarray(signals, dtype=self.dtype).tobytes())
        if self.L:
            self._fh.seek(self._par_off + self._written * self.L * item)
            self._fh.write(np.ascontiguousarray(params, dtype=self.dtype).tobytes())
        self._written += n

    def close(self):
        if self._fh is None:
            return
        self._fh.close()
        self._fh = None
        if self._written != self.N:
            os.remove(self.path)
            raise ValueError(f"writer declared {self.N} rows but received {self._written}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and self._fh is not None:
            self._fh.close()
            self._fh = None
            os.remove(self.path)
            return False
        self.close()
        return False


def write_dictionary(path, signals, params=None, dtype="float32", chunk_rows=65536):
    signals = np.asarray(signals)
    if signals.ndim != 2:
        raise DimensionError("signals must be a 2-D array")
    N, M = signals.shape
    params = np.empty((N, 0)) if params is None else np.asarray(params).reshape(N, -1)
    with DictionaryWriter(path, N, M, params.shape[1], dtype) as writer:
        for start in range(0, N, chunk_rows):
            writer.append(signals[start:start + chunk_rows], params[start:start + chunk_rows])
    return DictionaryStore(path)


def read_csv_dictionary(path):
    """Signals and params from a CSV with header ``y_0..y_{M-1}, t_0..t_{L-1}``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty CSV file")
        header = [h.strip() for h in header]
        ycols = [i for i, h in enumerate(header) if h.startswith("y_")]
        tcols = [i for i, h in enumerate(header) if h.startswith("t_")]
        if not ycols or len(ycols) + len(tcols) != len(header):
            raise FormatError(f"{path}: header must consist of y_* columns followed by t_* columns")
        try:
            rows = np.array([[float(v) for v in row] for row in reader if row], dtype=np.float64)
        except ValueError as err:
            raise FormatError(f"{path}: {err}") from None
    if rows.size == 0:
        rows = rows.reshape(0, len(header))
    if rows.shape[1] != len(header):
        raise FormatError(f"{path}: ragged CSV rows")
    return rows[:, ycols], rows[:, tcols]


def load_signals(path):
    """Signals and params from an HDMD file, a CSV file or a ``.npy`` array."""
    path = os.fspath(path)
    if path.endswith(".csv"):
        return read_csv_dictionary(path)
    if path.endswith(".npy"):
        arr = np.load(path)
        return np.atleast_2d(arr).astype(np.float64), None
    sig, par = DictionaryStore(path).read_all()
    return sig.astype(np.float64), par.astype(np.float64)


def as_store(path_or_store, scratch_dir=None):
    """A :class:`DictionaryStore` for an HDMD path, or a CSV converted beside it."""
    if isinstance(path_or_store, DictionaryStore):
        return path_or_store
    path = os.fspath(path_or_store)
    if path.endswith(".csv"):
        sig, par = read_csv_dictionary(path)
        out = os.path.join(scratch_dir or os.path.dirname(os.path.abspath(path)),
                           os.path.basename(path)[:-4] + ".hdmd")
        return write_dictionary(out, sig, par, dtype="float64")
    return DictionaryStore(path)


# ---------------------------------------------------------------------------
# synthetic dictionaries


@dataclass(frozen=True)
class SyntheticSpec:
    """Regular parameter grid pushed through a fixed forward model.

    ``ranges`` holds one ``(low, high, count)`` triple per parameter.
    ``kind="linear"`` makes every signal a combination of ``L`` damped
    sinusoids weighted by the normalised parameters (rank at most ``L``);
    ``kind="relaxation"`` lets each parameter set the decay and frequency of
    its own damped oscillation, a curved manifold closer to real fingerprints.
    """

    M: int
    ranges: tuple
    noise_sd: float = 0.0
    seed: int = 0
    kind: str = "linear"
    max_rows: int = 50_000_000

    def __post_init__(self):
        ranges = tuple(tuple(r) for r in self.ranges)
        object.__setattr__(self, "ranges", ranges)
        if self.M < 2:
            raise ValueError("signal length M must be >= 2")
        if not ranges:
            raise ValueError("at least one parameter range is required")
        for lo, hi, count in ranges:
            if int(count) < 1 or int(count) != count:
                raise ValueError(f"grid counts must be positive integers, got {count}")
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
                raise ValueError(f"invalid range ({lo}, {hi})")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if self.kind not in ("linear", "relaxation"):
            raise ValueError(f"unknown forward model {self.kind!r}")
        if self.N > self.max_rows:
            raise ValueError(f"grid has {self.N} rows, above the cap of {self.max_rows}")

    @property
    def L(self):
        return len(self.ranges)

    @property
    def N(self):
        return int(np.prod([int(c) for _, _, c in self.ranges], dtype=object))

    @classmethod
    def from_mapping(cls, cfg):
        params = cfg.get("params") or cfg.get("param")
        if params is None:
            raise ValueError("spec needs a [[params]] table per parameter")
        ranges = tuple((float(p["low"]), float(p["high"]), int(p["count"])) for p in params)
        return cls(
            M=int(cfg["M"]),
            ranges=ranges,
            noise_sd=float(cfg.get("noise_sd", 0.0)),
            seed=int(cfg.get("seed", 0)),
            kind=str(cfg.get("kind", "linear")),
        )

    @classmethod
    def from_toml(cls, path):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return cls.from_mapping(tomllib.load(fh))


def _basis(M, L):
    """Unit-norm damped sinusoids with distinct frequencies and decays."""
    tau = np.linspace(0.0, 1.0, M)
    j = np.arange(1, L + 1)[:, None]
    phi = np.exp(-tau * (0.5 + 0.5 * j)) * np.cos(2 * np.pi * (0.75 * j) * tau + 0.3 * j)
    return phi / np.linalg.norm(phi, axis=1, keepdims=True)


def forward_model(spec, t):
    """Noise-free signals for parameter rows ``t`` (shape ``(n, L)``)."""
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    lo = np.array([r[0] for r in spec.ranges])
    hi = np.array([r[1] for r in spec.ranges])
    width = np.where(hi > lo, hi - lo, 1.0)
    tn = np.where(hi > lo, (t - lo) / width, 1.0)
    if spec.kind == "linear":
        return tn @ _basis(spec.M, spec.L)
    tau = np.linspace(0.0, 1.0, spec.M)[None, :]
    out = np.zeros((t.shape[0], spec.M))
    for j in range(spec.L):
        decay = 1.0 + 4.0 * tn[:, j:j + 1]
        freq = (j + 1) * (1.0 + 0.5 * tn[:, j:j + 1])
        out += np.exp(-decay * tau) * np.cos(2 * np.pi * freq * tau + 0.4 * j)
    return out / np.sqrt(spec.L)


def iter_grid(spec, chunk_rows=65536):
    """Parameter grid rows in lexicographic order (last parameter fastest)."""
    axes = [np.linspace(lo, hi, int(c)) for lo, hi, c in spec.ranges]
    it = itertools.product(*axes)
    while True:
        block = list(itertools.islice(it, chunk_rows))
        if not block:
            return
        yield np.array(block, dtype=np.float64)


def generate_synthetic(spec, path, dtype="float32", chunk_rows=65536):
    """Write the dictionary of ``spec`` to ``path`` and return its store."""
    rng = np.random.default_rng(spec.seed)
    with DictionaryWriter(path, spec.N, spec.M, spec.L, dtype) as writer:
        for t in iter_grid(spec, chunk_rows):
            y = forward_model(spec, t)
            if spec.noise_sd:
                y = y + spec.noise_sd * rng.standard_normal(y.shape)
            writer.append(y, t)
    return DictionaryStore(path)


# ---------------------------------------------------------------------------
# model serialisation


def serialize_model(model):
    """Little-endian binary image of a model, full float64 precision."""
    buf = io.BytesIO()
    buf.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, _FAMILIES[model.family], model.K, model.M))
    buf.write(np.asarray(model.weights, "<f8").tobytes())
    for c in model.components:
        nu = 0.0 if c.mixing.is_gaussian else c.mixing.nu
        buf.write(_COMP_HEADER.pack(c.d, 0, c.b, nu))
        buf.write(np.asarray(c.mu, "<f8").tobytes())
        buf.write(np.asarray(c.a, "<f8").tobytes())
        buf.write(np.ascontiguousarray(c.Dstar, "<f8").tobytes())
    return buf.getvalue()


def deserialize_model(data):
    data = bytes(data)
    if len(data) < _MODEL_HEADER.size:
        raise FormatError("model image shorter than its header")
    magic, version, fam, K, M = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad model magic {magic!r}")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    families = {v: k for k, v in _FAMILIES.items()}
    if fam not in families or K < 1 or M < 1:
        raise FormatError("corrupted model header")
    off = _MODEL_HEADER.size

    def take(count):
        nonlocal off
        end = off + 8 * count
        if end > len(data):
            raise FormatError("model image is truncated")
        arr = np.frombuffer(data, "<f8", count, off).astype(np.float64)
        off = end
        return arr

    weights = take(K)
    comps = []
    for _ in range(K):
        if off + _COMP_HEADER.size > len(data):
            raise FormatError("model image is truncated")
        d, _, b, nu = _COMP_HEADER.unpack_from(data, off)
        off += _COMP_HEADER.size
        if not 1 <= d <= M:
            raise FormatError(f"corrupted component dimension {d}")
        mu, a, D = take(M), take(d), take(M * d).reshape(M, d)
        mixing = MixingFamily.gaussian() if families[fam] == "gaussian" else MixingFamily.student(nu)
        comps.append(HdEdComponent(mu, D, a, b, mixing))
    if off != len(data):
        raise FormatError("trailing bytes after the model image")
    return HdMedModel(tuple(comps), weights)


def save_model(path, model):
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def load_model(path):
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())


# ---------------------------------------------------------------------------
# compressed dictionaries


def l2_normalize(Y):
    norms = np.linalg.norm(Y, axis=1, keepdims=True)
    return Y / np.where(norms > 0, norms, 1.0)


@dataclass(eq=False)
class Partition:
    reduced: np.ndarray
    params: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        # rows kept in ascending original order so that scans break ties by index
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size and np.any(np.diff(self.indices) < 0):
            order = np.argsort(self.indices, kind="stable")
            self.reduced = self.reduced[order]
            self.params = self.params[order]
            self.indices = self.indices[order]

    @property
    def n(self):
        return self.indices.shape[0]


@dataclass(eq=False)
class CompressedDictionary:
    """Per-cluster reduced signals, parameter rows and original row indices."""

    model: HdMedModel
    partitions: list
    N: int
    normalize: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def counts(self):
        return np.array([p.n for p in self.partitions])

    @property
    def L(self):
        return self.partitions[0].params.shape[1]

    def payload_bytes(self):
        return int(sum(p.reduced.nbytes for p in self.partitions))

    def compression_ratio(self):
        """``M`` over the average stored reduced length per signal."""
        stored = sum(p.n * p.reduced.shape[1] for p in self.partitions)
        return self.model.M * self.N / stored if stored else float("inf")

    def check(self):
        if int(self.counts.sum()) != self.N:
            raise FormatError("partition sizes do not add up to N")
        allidx = np.concatenate([p.indices for p in self.partitions]) if self.partitions else np.empty(0)
        if not np.array_equal(np.sort(allidx), np.arange(self.N)):
            raise FormatError("partition indices are not a permutation of 0..N-1")

    def save(self, path):
        arrays = {
            "format": np.array([COMPRESSED_VERSION, self.N, int(self.normalize)], dtype="<i8"),
            "model": np.frombuffer(serialize_model(self.model), dtype=np.uint8),
        }
        for k, p in enumerate(self.partitions):
            arrays[f"reduced_{k}"] = p.reduced
            arrays[f"params_{k}"] = p.params
            arrays[f"indices_{k}"] = p.indices
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        try:
            with np.load(path, allow_pickle=False) as z:
                version, N, normalize = (int(v) for v in z["format"])
                if version != COMPRESSED_VERSION:
                    raise FormatError(f"{path}: unsupported compressed-dictionary version {version}")
                model = deserialize_model(z["model"].tobytes())
                parts = [
                    Partition(z[f"reduced_{k}"], z[f"params_{k}"], z[f"indices_{k}"])
                    for k in range(model.K)
                ]
        except FormatError:
            raise
        except (OSError, ValueError, KeyError) as err:
            raise FormatError(f"{path}: not a compressed dictionary ({err})") from None
        cd = cls(model, parts, N, bool(normalize))
        cd.check()
        return cd


def compress(store, model, dtype=None, chunk_rows=8192, normalize=False):
    """Assign every dictionary row to its cluster and keep its reduced form."""
    if store.M != model.M:
        raise DimensionError(f"dictionary has M={store.M}, model has M={model.M}")
    dtype = store.dtype if dtype is None else np.dtype(dtype)
    ops = [loading_matrix(c) for c in model.components]
    buffers = [([], [], []) for _ in range(model.K)]
    offset = 0
    for signals, params in store.read_chunks(chunk_rows):
        Y = signals.astype(np.float64)
        if normalize:
            Y = l2_normalize(Y)
        labels = assign(model, Y)
        for k in np.unique(labels):
            sel = np.flatnonzero(labels == k)
            red, par, idx = buffers[k]
            red.append(project(ops[k], Y[sel]).astype(dtype))
            par.append(params[sel].astype(dtype))
            idx.append(sel + offset)
        offset += Y.shape[0]
    parts = []
    for k, (red, par, idx) in enumerate(buffers):
        if red:
            parts.append(Partition(np.concatenate(red), np.concatenate(par), np.concatenate(idx)))
        else:
            parts.append(Partition(
                np.empty((0, model.components[k].d), dtype),
                np.empty((0, store.L), dtype),
                np.empty(0, dtype=np.int64),
            ))
    cd = CompressedDictionary(model, parts, store.N, normalize)
    cd.check()
    return cd
