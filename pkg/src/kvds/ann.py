"""Inverted-file approximate nearest neighbor index with product quantization.

Pipeline: optional PCA projection, a coarse k-means quantizer over ``nlist``
cells, then per cell either raw residual vectors (flat) or 8-bit product
quantization codes. Queries scan the ``nprobe`` closest cells and score
candidates with asymmetric distance computation; an optional rerank pass
rescores all probed candidates against retained raw residuals.

Distances are squared Euclidean throughout. Entry ids refer to positions in
the source datastore, so results are directly comparable with
``datastore.exact_search``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional

import numpy as np

from .datastore import FormatError, NeighborSet, RawDatastore
from .linalg import PcaModel, kmeans, pca_apply, pca_fit

MAGIC_IDX = b"KVDI"
IDX_VERSION = 1

FLAG_PCA = 1
FLAG_PQ = 2
FLAG_RAW = 4

PQ_CENTROIDS = 256  # one byte per subvector code

MAX_NLIST = 4096
PCA_SAMPLE_CAP = 100_000


def default_nlist(count: int) -> int:
    """Heuristic cell count: about sqrt(N), clamped to [1, 4096]."""
    return int(min(MAX_NLIST, max(1, round(count ** 0.5))))


@dataclass(frozen=True)
class IndexConfig:
    """Training-time knobs.

    m=None builds a flat index (raw residuals per cell); otherwise m is the
    number of PQ subvectors and must divide the indexed dimension.
    retain_raw additionally keeps residuals next to PQ codes so searches can
    rerank exactly.
    """

    use_pca: bool = False
    pca_dim: Optional[int] = None
    nlist: Optional[int] = None
    m: Optional[int] = None
    retain_raw: bool = False


@dataclass(frozen=True)
class SearchParams:
    k: int = 8
    nprobe: Optional[int] = None  # None: max(1, nlist // 8)
    rerank: bool = False


@dataclass
class IvfPqIndex:
    dim_in: int
    dim: int
    pca: Optional[PcaModel]
    coarse: np.ndarray  # (nlist, dim)
    codebooks: Optional[np.ndarray]  # (m, 256, dim // m) or None for flat
    list_ids: list  # per cell: (len_c,) int64 entry ids
    list_codes: list  # per cell: (len_c, m) uint8, [] entries when flat
    list_residuals: list  # per cell: (len_c, dim) float, [] when not retained
    values: np.ndarray  # (count,) int64, indexed by entry id

    @property
    def nlist(self) -> int:
        return self.coarse.shape[0]

    @property
    def m(self) -> int:
        return 0 if self.codebooks is None else self.codebooks.shape[0]

    @property
    def has_raw(self) -> bool:
        return any(len(r) for r in self.list_residuals) or self.codebooks is None

    def __len__(self) -> int:
        return len(self.values)


def _round_f32(a: np.ndarray) -> np.ndarray:
    # Canonicalize to float32 precision while computing in float64, so a
    # trained index and its disk round trip search identically.
    return a.astype(np.float32).astype(np.float64)


def train_index(ds: RawDatastore, config: IndexConfig, seed: int) -> IvfPqIndex:
    if len(ds) == 0:
        raise ValueError("cannot train an index on an empty datastore")
    count, dim_in = ds.keys.shape
    rng = np.random.default_rng(seed)

    keys = ds.keys
    pca_model = None
    if config.use_pca:
        if config.pca_dim is None:
            raise ValueError("use_pca requires pca_dim")
        if not (1 <= config.pca_dim <= dim_in):
            raise ValueError(f"pca_dim {config.pca_dim} out of range for dim {dim_in}")
        sample = keys
        if count > PCA_SAMPLE_CAP:
            pick = rng.choice(count, size=PCA_SAMPLE_CAP, replace=False)
            sample = keys[np.sort(pick)]
        if len(sample) < config.pca_dim:
            raise ValueError("not enough entries to fit the PCA projection")
        fitted = pca_fit(sample, config.pca_dim)
        pca_model = PcaModel(
            mean=_round_f32(fitted.mean),
            components=_round_f32(fitted.components),
            explained_variance=_round_f32(fitted.explained_variance),
        )
        keys = pca_apply(pca_model, keys)
    dim = keys.shape[1]

    nlist = config.nlist if config.nlist is not None else default_nlist(count)
    if not (1 <= nlist <= MAX_NLIST):
        raise ValueError(f"nlist must be in [1, {MAX_NLIST}]")
    if count < nlist:
        raise ValueError(f"need at least nlist={nlist} entries, got {count}")

    if config.m is not None:
        if config.m < 1 or dim % config.m != 0:
            raise ValueError(f"m={config.m} must divide indexed dim {dim}")
        if count < PQ_CENTROIDS:
            raise ValueError(
                f"product quantization needs at least {PQ_CENTROIDS} entries, got {count}"
            )

    coarse, assign = kmeans(keys, nlist, seed=seed)
    coarse = _round_f32(coarse)
    # Residuals relative to the f32 coarse centroids actually stored.
    dists = (
        np.sum(keys ** 2, axis=1)[:, None]
        - 2.0 * keys @ coarse.T
        + np.sum(coarse ** 2, axis=1)[None, :]
    )
    assign = np.argmin(dists, axis=1)
    residuals = keys - coarse[assign]

    codebooks = None
    codes = None
    if config.m is not None:
        m = config.m
        sub = dim // m
        codebooks = np.empty((m, PQ_CENTROIDS, sub))
        codes = np.empty((count, m), dtype=np.uint8)
        for j in range(m):
            part = residuals[:, j * sub : (j + 1) * sub]
            cents, _ = kmeans(part, PQ_CENTROIDS, seed=seed + 1 + j)
            cents = _round_f32(cents)
            codebooks[j] = cents
            d = (
                np.sum(part ** 2, axis=1)[:, None]
                - 2.0 * part @ cents.T
                + np.sum(cents ** 2, axis=1)[None, :]
            )
            codes[:, j] = np.argmin(d, axis=1).astype(np.uint8)

    keep_raw = config.m is None or config.retain_raw
    residuals_f32 = _round_f32(residuals) if keep_raw else None

    list_ids, list_codes, list_residuals = [], [], []
    for c in range(nlist):
        ids_c = np.flatnonzero(assign == c).astype(np.int64)
        list_ids.append(ids_c)
        list_codes.append(codes[ids_c] if codes is not None else np.empty((0, 0), np.uint8))
        if keep_raw:
            list_residuals.append(residuals_f32[ids_c])
        else:
            list_residuals.append(np.empty((0, dim)))

    return IvfPqIndex(
        dim_in=dim_in,
        dim=dim,
        pca=pca_model,
        coarse=coarse,
        codebooks=codebooks,
        list_ids=list_ids,
        list_codes=list_codes,
        list_residuals=list_residuals,
        values=ds.values.copy(),
    )


def adc_table(index: IvfPqIndex, residual_query: np.ndarray) -> np.ndarray:
    """Per-subvector lookup table of squared distances to every PQ centroid.

    residual_query is the query expressed relative to a coarse centroid (and
    after any PCA projection), shape (dim,). Returns (m, 256).
    """
    if index.codebooks is None:
        raise ValueError("adc_table requires a product-quantized index")
    q = np.asarray(residual_query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"residual query must have shape ({index.dim},)")
    m, _, sub = index.codebooks.shape
    parts = q.reshape(m, sub)
    diff = index.codebooks - parts[:, None, :]
    return np.sum(diff ** 2, axis=2)


def search(index: IvfPqIndex, query: np.ndarray, params: SearchParams) -> NeighborSet:
    if params.k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim_in,):
        raise ValueError(f"query must have shape ({index.dim_in},)")
    if params.rerank and not index.has_raw:
        raise ValueError("rerank requires retained raw residuals")

    if index.pca is not None:
        q = pca_apply(index.pca, q)

    cell_d = np.sum((index.coarse - q[None, :]) ** 2, axis=1)
    nprobe = params.nprobe if params.nprobe is not None else max(1, index.nlist // 8)
    nprobe = min(max(1, nprobe), index.nlist)
    order = np.lexsort((np.arange(index.nlist), cell_d))
    probed = order[:nprobe]

    cand_ids = []
    cand_d = []
    for c in probed:
        ids_c = index.list_ids[c]
        if len(ids_c) == 0:
            continue
        rq = q - index.coarse[c]
        if index.codebooks is None:
            diff = index.list_residuals[c] - rq[None, :]
            d = np.sum(diff ** 2, axis=1)
        else:
            table = adc_table(index, rq)
            codes = index.list_codes[c]
            d = np.sum(table[np.arange(index.m)[None, :], codes], axis=1)
            if params.rerank:
                diff = index.list_residuals[c] - rq[None, :]
                d = np.sum(diff ** 2, axis=1)
        cand_ids.append(ids_c)
        cand_d.append(d)

    if not cand_ids:
        return NeighborSet(
            ids=np.empty(0, np.int64),
            values=np.empty(0, np.int64),
            distances=np.empty(0),
        )

    ids = np.concatenate(cand_ids)
    dists = np.maximum(np.concatenate(cand_d), 0.0)
    top = np.lexsort((ids, dists))[: params.k]
    ids = ids[top]
    return NeighborSet(ids=ids, values=index.values[ids], distances=dists[top])


def as_searcher(index: IvfPqIndex, params: SearchParams = SearchParams()):
    """Adapt an index to the (query, k) -> NeighborSet searcher protocol."""

    def run(query: np.ndarray, k: int) -> NeighborSet:
        p = SearchParams(k=k, nprobe=params.nprobe, rerank=params.rerank)
        return search(index, query, p)

    return run


# ---------------------------------------------------------------------------
# KVDS-IDX serialization. Little-endian; all vector payloads are float32.
#
#   magic "KVDI", version u32, flags u32, dim_in u32, dim u32, nlist u32,
#   m u32 (0 = flat), count u64
#   [flags & PCA]  mean f32[dim_in], components f32[dim * dim_in],
#                  explained f32[dim]
#   coarse f32[nlist * dim]
#   [flags & PQ]   codebooks f32[m * 256 * (dim. / m)]
#   per cell: len u64, ids i64[len],
#             [flags & PQ] codes u8[len * m],
#             [flags & RAW] residuals f32[len * dim]
#   values u32[count]
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIIQ")


def _write_f32(fh: BinaryIO, a: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def write_index(index: IvfPqIndex, path) -> None:
    flags = 0
    if index.pca is not None:
        flags |= FLAG_PCA
    if index.codebooks is not None:
        flags |= FLAG_PQ
    has_raw = any(r.size for r in index.list_residuals) or index.codebooks is None
    if has_raw:
        flags |= FLAG_RAW
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC_IDX,
                IDX_VERSION,
                flags,
                index.dim_in,
                index.dim,
                index.nlist,
                index.m,
                len(index),
            )
        )
        if index.pca is not None:
            _write_f32(fh, index.pca.mean)
            _write_f32(fh, index.pca.components)
            _write_f32(fh, index.pca.explained_variance)
        _write_f32(fh, index.coarse)
        if index.codebooks is not None:
            _write_f32(fh, index.codebooks)
        for c in range(index.nlist):
            ids_c = index.list_ids[c]
            fh.write(struct.pack("<Q", len(ids_c)))
            fh.write(np.ascontiguousarray(ids_c, dtype="<i8").tobytes())
            if index.codebooks is not None:
                fh.write(np.ascontiguousarray(index.list_codes[c], dtype=np.uint8).tobytes())
            if has_raw:
                _write_f32(fh, index.list_residuals[c])
        fh.write(np.ascontiguousarray(index.values, dtype="<u4").tobytes())


class _Cursor:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, nbytes: int) -> bytes:
        if self.pos + nbytes > len(self.blob):
            raise FormatError("index file truncated")
        out = self.blob[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return out

    def f32(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64)
        return a.reshape(shape)

    def done(self) -> bool:
        return self.pos == len(self.blob)


def read_index(path) -> IvfPqIndex:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError("index file shorter than header")
    magic, version, flags, dim_in, dim, nlist, m, count = _HEADER.unpack_from(blob)
    if magic != MAGIC_IDX:
        raise FormatError(f"bad magic {magic!r}")
    if version != IDX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    if dim_in < 1 or dim < 1 or nlist < 1:
        raise FormatError("invalid dimensions in header")
    has_pca = bool(flags & FLAG_PCA)
    has_pq = bool(flags & FLAG_PQ)
    has_raw = bool(flags & FLAG_RAW)
    if has_pq != (m > 0):
        raise FormatError("PQ flag disagrees with m")
    if not has_pq and not has_raw:
        raise FormatError("flat index must carry raw residuals")
    if has_pq and dim % m != 0:
        raise FormatError(f"m={m} does not divide dim={dim}")
    if not has_pca and dim != dim_in:
        raise FormatError("dim != dim_in without a PCA block")

    cur = _Cursor(blob)
    cur.take(_HEADER.size)
    pca_model = None
    if has_pca:
        mean = cur.f32((dim_in,))
        comps = cur.f32((dim, dim_in))
        expl = cur.f32((dim,))
        pca_model = PcaModel(mean=mean, components=comps, explained_variance=expl)
    coarse = cur.f32((nlist, dim))
    codebooks = cur.f32((m, PQ_CENTROIDS, dim // m)) if has_pq else None

    list_ids, list_codes, list_residuals = [], [], []
    total = 0
    for _ in range(nlist):
        (ln,) = struct.unpack("<Q", cur.take(8))
        ids_c = np.frombuffer(cur.take(8 * ln), dtype="<i8").astype(np.int64)
        list_ids.append(ids_c)
        if has_pq:
            codes_c = np.frombuffer(cur.take(ln * m), dtype=np.uint8).reshape(ln, m).copy()
        else:
            codes_c = np.empty((0, 0), np.uint8)
        list_codes.append(codes_c)
        if has_raw:
            list_residuals.append(cur.f32((ln, dim)))
        else:
            list_residuals.append(np.empty((0, dim)))
        total += ln
    if total != count:
        raise FormatError(f"cells hold {total} entries, header says {count}")
    values = np.frombuffer(cur.take(4 * count), dtype="<u4").astype(np.int64)
    if not cur.done():
        raise FormatError("trailing bytes after index payload")
    seen = np.sort(np.concatenate(list_ids)) if count else np.empty(0, np.int64)
    if count and not np.array_equal(seen, np.arange(count)):
        raise FormatError("cell id lists do not cover 0..count-1 exactly once")
    return IvfPqIndex(
        dim_in=dim_in,
        dim=dim,
        pca=pca_model,
        coarse=coarse,
        codebooks=codebooks,
        list_ids=list_ids,
        list_codes=list_codes,
        list_residuals=list_residuals,
        values=values,
    )
