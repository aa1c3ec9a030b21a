"""Uniform chunked access to in-memory arrays, stores and generators.

A *data source* is one of

* a 2-D array (sliced into views, never copied as a whole),
* a :class:`hdmed.dictionary_io.DictionaryStore` (signals are read from disk
  chunk by chunk),
* a zero-argument callable returning a fresh iterable of 2-D chunks
  (replayable, so usable for several passes),
* any other iterable of 2-D chunks (single pass only).
"""
import numpy as np


def is_replayable(data):
    from .dictionary_io import DictionaryStore

    return isinstance(data, (np.ndarray, DictionaryStore)) or callable(data)


def known_length(data):
    from .dictionary_io import DictionaryStore

    if isinstance(data, np.ndarray):
        return data.shape[0]
    if isinstance(data, DictionaryStore):
        return data.N
    try:
        return len(data)
    except TypeError:
        return None


def iter_chunks(data, chunk_rows=8192):
    """Yield float64 2-D chunks of at most ``chunk_rows`` rows."""
    from .dictionary_io import DictionaryStore

    if chunk_rows < 1:
        raise ValueError("chunk_rows must be >= 1")
    if isinstance(data, DictionaryStore):
        for signals, _ in data.read_chunks(chunk_rows):
            yield np.asarray(signals, dtype=np.float64)
        return
    if isinstance(data, np.ndarray):
        if data.ndim == 1:
            data = data[None, :]
        for start in range(0, data.shape[0], chunk_rows):
            yield np.asarray(data[start:start + chunk_rows], dtype=np.float64)
        return
    source = data() if callable(data) else data
    for chunk in source:
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.ndim == 1:
            chunk = chunk[None, :]
        for start in range(0, chunk.shape[0], chunk_rows):
            yield chunk[start:start + chunk_rows]


def rebatch(chunks, batch_size):
    """Regroup a chunk stream into batches of exactly ``batch_size`` rows.

    Only the last batch may be shorter. At most one batch plus one chunk is
    held in memory.
    """
    pending, n_pending = [], 0
    for chunk in chunks:
        while chunk.shape[0]:
            take = min(batch_size - n_pending, chunk.shape[0])
            pending.append(chunk[:take])
            n_pending += take
            chunk = chunk[take:]
            if n_pending == batch_size:
                yield pending[0] if len(pending) == 1 else np.concatenate(pending)
                pending, n_pending = [], 0
    if n_pending:
        yield pending[0] if len(pending) == 1 else np.concatenate(pending)


def is_random_access(data):
    from .dictionary_io import DictionaryStore

    return isinstance(data, (np.ndarray, DictionaryStore))


def take_rows(data, index):
    """Rows ``index`` (sorted, unique) of a random-access source as float64."""
    from .dictionary_io import DictionaryStore

    if isinstance(data, DictionaryStore):
        return data.rows(index)[0].astype(np.float64)
    return np.asarray(np.atleast_2d(data)[index], dtype=np.float64)


def sample_rows(data, rows, seed=0, chunk_rows=8192):
    """A uniform random subset of ``rows`` rows in storage order.

    Sources without random access fall back to their first ``rows`` rows.
    """
    if is_random_access(data):
        n = known_length(data)
        if n == 0:
            raise ValueError("data source is empty")
        if rows >= n:
            return take_rows(data, np.arange(n))
        idx = np.sort(np.random.default_rng(seed).choice(n, size=rows, replace=False))
        return take_rows(data, idx)
    out, got = [], 0
    for chunk in iter_chunks(data, chunk_rows):
        out.append(chunk[: rows - got])
        got += out[-1].shape[0]
        if got >= rows:
            break
    if not out:
        raise ValueError("data source is empty")
    return np.concatenate(out)


class BlockShuffle:
    """Seeded visiting order over a random-access source, in small contiguous blocks.

    Stored dictionaries are usually sorted along a parameter grid, which
    breaks the i.i.d. assumption of stochastic approximation; permuting
    blocks of ``block_rows`` rows restores it while keeping disk reads
    sequential within each block. The first blocks of the permutation form
    a fixed held-out set; the remaining ones are reshuffled on every epoch.
    """

    def __init__(self, data, seed=0, block_rows=64, heldout_rows=0):
        if not is_random_access(data):
            raise TypeError("block shuffling needs an array or a DictionaryStore")
        self.data = data
        self.n = known_length(data)
        self.block_rows = int(block_rows)
        self.seed = seed
        n_blocks = -(-self.n // self.block_rows)
        perm = np.random.default_rng(seed).permutation(n_blocks)
        hb = min(-(-int(heldout_rows) // self.block_rows), max(n_blocks - 1, 0))
        self.heldout_blocks = np.sort(perm[:hb])
        self.train_blocks = perm[hb:]

    def _rows(self, blocks):
        starts = blocks * self.block_rows
        stops = np.minimum(starts + self.block_rows, self.n)
        return np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)]) if len(blocks) else np.empty(0, int)

    def heldout(self):
        idx = self._rows(self.heldout_blocks)
        return take_rows(self.data, idx) if idx.size else None

    def epoch(self, index, chunk_rows):
        """Chunks of the training rows in the order of epoch ``index``."""
        order = self.train_blocks
        if index:
            order = np.random.default_rng([self.seed, index]).permutation(order)
        per = max(1, chunk_rows // self.block_rows)
        for s in range(0, len(order), per):
            blocks = order[s:s + per]
            # read in storage order, then restore the shuffled order
            idx = self._rows(np.sort(blocks))
            rows = take_rows(self.data, idx)
            pos = {b: i for i, b in enumerate(np.sort(blocks))}
            sizes = np.minimum(np.sort(blocks) * self.block_rows + self.block_rows, self.n) - np.sort(blocks) * self.block_rows
            offsets = np.concatenate([[0], np.cumsum(sizes)])
            yield np.concatenate([rows[offsets[pos[b]]:offsets[pos[b] + 1]] for b in blocks])
