"""Token-level key-value storage, exact search, and the KVDS-RAW file format.

A datastore is an ordered collection of (key vector, value token) entries;
entry ids are positions (0-based, stable). Keys come from some producing
model; the pairing rule is the same for every alignment strategy and the
strategy tag records the provenance contract of the states.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Callable, Iterator, NamedTuple

import numpy as np

MAGIC_RAW = b"KVDR"
RAW_VERSION = 1

METRIC_L2 = "l2"  # squared Euclidean distance
METRIC_COSINE = "cosine"  # 1 - cosine similarity
_METRICS = (METRIC_L2, METRIC_COSINE)


class FormatError(ValueError):
    """Raised when a KVDS file is malformed."""


class AlignmentStrategy(enum.Enum):
    """How the producing model computed the states paired with tokens.

    MLM states see the full sentence; DAE and CLM states are causal, i.e.
    the state paired with token t was computed from the prefix before t
    (DAE additionally sees the full sentence on its encoder side).
    """

    MLM = 0
    DAE = 1
    CLM = 2
    OTHER = 3


class Entry(NamedTuple):
    key: np.ndarray
    value: int


class Neighbor(NamedTuple):
    entry_id: int
    value: int
    distance: float


@dataclass(frozen=True)
class NeighborSet:
    """Retrieval result: parallel arrays sorted ascending by (distance, id)."""

    ids: np.ndarray
    values: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        if not (len(self.ids) == len(self.values) == len(self.distances)):
            raise ValueError("ids, values, distances must have equal length")
        if len(self.distances):
            if np.min(self.distances) < 0:
                raise ValueError("distances must be non-negative")
            order = np.lexsort((self.ids, self.distances))
            if not np.array_equal(order, np.arange(len(order))):
                # Normalize rather than reject so every producer ends up
                # with the same canonical ordering.
                object.__setattr__(self, "ids", self.ids[order])
                object.__setattr__(self, "values", self.values[order])
                object.__setattr__(self, "distances", self.distances[order])

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Neighbor]:
        for i in range(len(self.ids)):
            yield Neighbor(int(self.ids[i]), int(self.values[i]), float(self.distances[i]))


# A searcher maps (query, k) to a NeighborSet; metrics and decoding take one
# so exact and approximate retrieval are interchangeable.
Searcher = Callable[[np.ndarray, int], NeighborSet]


@dataclass
class RawDatastore:
    """Keys (count x dim, float) and values (count, token ids) plus metadata.

    The source label is in-memory metadata only; the KVDS-RAW format persists
    just the strategy tag.
    """

    keys: np.ndarray
    values: np.ndarray
    strategy: AlignmentStrategy = AlignmentStrategy.OTHER
    source: str = ""

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.int64)
        if self.keys.ndim != 2:
            raise ValueError("keys must be a 2-D array")
        if self.keys.shape[0] != self.values.shape[0]:
            raise ValueError("keys and values must have equal counts")
        if self.keys.shape[1] == 0:
            raise ValueError("dim must be positive")
        if not np.all(np.isfinite(self.keys)):
            raise ValueError("keys contain non-finite values")
        if len(self.values) and np.min(self.values) < 0:
            raise ValueError("values must be non-negative token ids")

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def __len__(self) -> int:
        return self.keys.shape[0]

    def entry(self, entry_id: int) -> Entry:
        return Entry(self.keys[entry_id], int(self.values[entry_id]))

    def searcher(self, metric: str = METRIC_L2) -> Searcher:
        return lambda query, k: exact_search(self, query, k, metric)

    @classmethod
    def from_pairs(
        cls,
        pairs: list[Entry],
        dim: int,
        strategy: AlignmentStrategy = AlignmentStrategy.OTHER,
        source: str = "",
    ) -> "RawDatastore":
        keys = np.stack([p.key for p in pairs]) if pairs else np.empty((0, dim))
        values = np.array([p.value for p in pairs], dtype=np.int64)
        return cls(keys=keys, values=values, strategy=strategy, source=source)


def align_states_to_pairs(
    states: list[np.ndarray] | np.ndarray,
    tokens: list[int] | np.ndarray,
    strategy: AlignmentStrategy,
) -> list[Entry]:
    """Pair state t with token t for one sentence.

    The pairing arithmetic is identical for every strategy; what differs is
    the caller's contract about how states were produced (full-sentence for
    MLM, prefix-causal for DAE/CLM). That provenance is recorded via the
    strategy tag on the datastore built from these pairs.
    """
    if len(states) != len(tokens):
        raise ValueError(f"length mismatch: {len(states)} states vs {len(tokens)} tokens")
    return [Entry(np.asarray(s, dtype=np.float64), int(t)) for s, t in zip(states, tokens)]


def _pairwise_distances(keys: np.ndarray, queries: np.ndarray, metric: str) -> np.ndarray:
    """Distances of shape (n_queries, n_keys) under the given metric."""
    if metric == METRIC_L2:
        d2 = (
            np.sum(queries * queries, axis=1)[:, None]
            + np.sum(keys * keys, axis=1)[None, :]
            - 2.0 * queries @ keys.T
        )
        return np.clip(d2, 0.0, None)
    if metric == METRIC_COSINE:
        qn = np.linalg.norm(queries, axis=1, keepdims=True)
        kn = np.linalg.norm(keys, axis=1, keepdims=True)
        sims = (queries / np.where(qn == 0, 1.0, qn)) @ (keys / np.where(kn == 0, 1.0, kn)).T
        return np.clip(1.0 - sims, 0.0, None)
    raise ValueError(f"unknown metric {metric!r}, expected one of {_METRICS}")


def exact_search(
    ds: RawDatastore, query: np.ndarray, k: int, metric: str = METRIC_L2
) -> NeighborSet:
    """True k nearest entries under the metric, ties broken by entry id."""
    if len(ds) == 0:
        raise ValueError("cannot search an empty datastore")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (ds.dim,):
        raise ValueError(f"query dim {query.shape} does not match datastore dim {ds.dim}")
    if k < 1:
        raise ValueError("k must be >= 1")
    dists = _pairwise_distances(ds.keys, query[None, :], metric)[0]
    order = np.lexsort((np.arange(len(ds)), dists))[: min(k, len(ds))]
    return NeighborSet(ids=order, values=ds.values[order], distances=dists[order])


def exact_search_batch(
    ds: RawDatastore, queries: np.ndarray, k: int, metric: str = METRIC_L2
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized top-k exact search: (ids, values, distances), each (B, k).

    Requires k <= len(ds). Candidate sets come from argpartition with a tie
    margin of 16, so entry-id ordering among large groups of exactly equal
    distances can differ from `exact_search`; the distances themselves and
    the returned (distance, value) multisets are exact.
    """
    if len(ds) == 0:
        raise ValueError("cannot search an empty datastore")
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != ds.dim:
        raise ValueError("queries must be (B, dim)")
    if not 1 <= k <= len(ds):
        raise ValueError(f"k must be in [1, {len(ds)}]")

    n = len(ds)
    ids = np.empty((len(queries), k), dtype=np.int64)
    dists_out = np.empty((len(queries), k), dtype=np.float64)
    cand = min(n, k + 16)
    for start in range(0, len(queries), 512):
        block = queries[start : start + 512]
        d = _pairwise_distances(ds.keys, block, metric)
        if cand < n:
            part = np.argpartition(d, cand - 1, axis=1)[:, :cand]
        else:
            part = np.broadcast_to(np.arange(n), (len(block), n))
        dp = np.take_along_axis(d, part, axis=1)
        order = np.lexsort((part, dp), axis=1)[:, :k]
        ids[start : start + 512] = np.take_along_axis(part, order, axis=1)
        dists_out[start : start + 512] = np.take_along_axis(dp, order, axis=1)
    return ids, ds.values[ids], dists_out


def write_raw(ds: RawDatastore, path) -> None:
    """Write the KVDS-RAW format (little-endian, float32 keys)."""
    record = np.dtype([("key", "<f4", (ds.dim,)), ("value", "<u4")])
    body = np.empty(len(ds), dtype=record)
    body["key"] = ds.keys.astype(np.float32)
    body["value"] = ds.values.astype(np.uint32)
    header = struct.pack("<4sIIQB7x", MAGIC_RAW, RAW_VERSION, ds.dim, len(ds), ds.strategy.value)
    with open(path, "wb") as f:
        f.write(header)
        f.write(body.tobytes())


def read_raw(path) -> RawDatastore:
    """Read a KVDS-RAW file; rejects bad magic, version, dim, or truncation."""
    with open(path, "rb") as f:
        data = f.read()
    header_size = struct.calcsize("<4sIIQB7x")
    if len(data) < header_size:
        raise FormatError("file too short for KVDS-RAW header")
    magic, version, dim, count, tag = struct.unpack_from("<4sIIQB7x", data)
    if magic != MAGIC_RAW:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC_RAW!r}")
    if version != RAW_VERSION:
        raise FormatError(f"unsupported KVDS-RAW version {version}")
    if dim == 0:
        raise FormatError("dim must be positive")
    record = np.dtype([("key", "<f4", (dim,)), ("value", "<u4")])
    expected = header_size + count * record.itemsize
    if len(data) != expected:
        raise FormatError(f"file size {len(data)} != expected {expected} (truncated or padded)")
    body = np.frombuffer(data, dtype=record, count=count, offset=header_size)
    try:
        strategy = AlignmentStrategy(tag)
    except ValueError as e:
        raise FormatError(f"unknown strategy tag {tag}") from e
    keys = body["key"].astype(np.float64).reshape(count, dim)
    return RawDatastore(keys=keys, values=body["value"].astype(np.int64), strategy=strategy)


def oracle_codebook(vocab_size: int, d: int, seed: int) -> np.ndarray:
    """Seeded random unit vector per vocabulary token, shape (vocab_size, d)."""
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((vocab_size, d))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def generate_oracle_datastore(
    corpus: list[list[int]],
    d: int,
    epsilon: float,
    seed: int,
) -> RawDatastore:
    """Synthetic datastore whose key-value consistency is set by epsilon.

    Every token id gets a fixed unit codebook vector; each occurrence emits
    key = normalize(codebook[token] + epsilon * gaussian). epsilon = 0 gives
    identical keys per token; large epsilon washes the structure out.
    """
    if not corpus or all(len(s) == 0 for s in corpus):
        raise ValueError("corpus must contain at least one token")
    if d < 8:
        raise ValueError("d must be >= 8")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")

    tokens = np.concatenate([np.asarray(s, dtype=np.int64) for s in corpus if len(s)])
    if np.min(tokens) < 0:
        raise ValueError("token ids must be non-negative")
    vocab_size = int(np.max(tokens)) + 1
    codebook = oracle_codebook(vocab_size, d, seed)
    rng = np.random.default_rng(seed + 1)
    noise = rng.standard_normal((len(tokens), d))
    keys = codebook[tokens] + epsilon * noise
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    return RawDatastore(
        keys=keys,
        values=tokens,
        strategy=AlignmentStrategy.OTHER,
        source=f"oracle(eps={epsilon},seed={seed})",
    )
