"""Quality measurement for datastores and retrieval-augmented models.

Three retrieval-side numbers: key-value consistency (do a key's neighbors
carry its value), query-key consistency (are queries aligned with the keys
they should hit), and retrieval accuracy (do neighbors of external queries
carry the gold token). Plus a 2-D PCA export for inspection and a
contrastive scoring harness for sequence-level comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .datastore import RawDatastore, Searcher
from .linalg import cosine, pca_apply, pca_fit


def kv_consistency(
    ds: RawDatastore,
    searcher: Searcher,
    k: int,
    exclude_self: bool = True,
    sample: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Mean fraction of each entry's k neighbors sharing that entry's value.

    Each key is issued as a query against the searcher. The entry itself is
    excluded from its neighbor set by id (a self-match says nothing about
    datastore quality); pass exclude_self=False to keep it. ``sample`` caps
    the number of query entries, drawn without replacement with ``seed``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= len(ds):
        raise ValueError(f"k={k} must be smaller than the datastore ({len(ds)} entries)")
    ids = np.arange(len(ds))
    if sample is not None and sample < len(ids):
        rng = np.random.default_rng(seed)
        ids = np.sort(rng.choice(len(ids), size=sample, replace=False))
    fractions = np.empty(len(ids))
    for row, i in enumerate(ids):
        if exclude_self:
            ns = searcher(ds.keys[i], k + 1)
            keep = ns.ids != i
            values = ns.values[keep][:k]
        else:
            values = searcher(ds.keys[i], k).values
        if len(values) == 0:
            fractions[row] = 0.0
        else:
            fractions[row] = np.mean(values == ds.values[i])
    return float(np.mean(fractions))


def qk_consistency(queries: Sequence[np.ndarray], keys: Sequence[np.ndarray]) -> float:
    """Mean cosine similarity over aligned (query, key) pairs."""
    if len(queries) != len(keys):
        raise ValueError(f"{len(queries)} queries vs {len(keys)} keys")
    if len(queries) == 0:
        raise ValueError("need at least one pair")
    return float(np.mean([cosine(q, k) for q, k in zip(queries, keys)]))


def retrieval_accuracy(
    queries: np.ndarray,
    gold_values: Sequence[int],
    searcher: Searcher,
    k: int,
) -> float:
    """Mean fraction of retrieved values matching the gold token per query.

    Queries are external (model states, not datastore keys), so there is no
    self to exclude.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if len(queries) != len(gold_values):
        raise ValueError(f"{len(queries)} queries vs {len(gold_values)} gold values")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(queries) == 0:
        raise ValueError("need at least one query")
    total = 0.0
    for q, gold in zip(queries, gold_values):
        values = searcher(q, k).values
        total += float(np.mean(values == gold)) if len(values) else 0.0
    return total / len(queries)


def project_2d(vectors: np.ndarray, labels: Sequence[str]):
    """PCA-project vectors to 2-D; returns a list of (x, y, label) rows.

    1-D input gets a zero second axis so the output is always plottable.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError("vectors must be 2-D (count x dim)")
    if len(vectors) < 2:
        raise ValueError("need at least 2 vectors")
    if len(labels) != len(vectors):
        raise ValueError("one label per vector required")
    out_dim = min(2, vectors.shape[1])
    model = pca_fit(vectors, out_dim)
    proj = pca_apply(model, vectors)
    if out_dim == 1:
        proj = np.hstack([proj, np.zeros((len(proj), 1))])
    return [(float(x), float(y), str(lab)) for (x, y), lab in zip(proj, labels)]


@dataclass(frozen=True)
class ContrastiveItem:
    source: Sequence[int]
    reference: Sequence[int]
    variants: tuple

    def __post_init__(self):
        if len(self.variants) < 1:
            raise ValueError("each item needs at least one contrastive variant")


SequenceScorer = Callable[[Sequence[int], Sequence[int]], float]


def contrastive_eval(scorer: SequenceScorer, items: Sequence[ContrastiveItem]) -> float:
    """Fraction of items whose reference outscores every variant.

    Strict comparison: a tie with any variant fails the item.
    """
    if len(items) == 0:
        raise ValueError("need at least one item")
    passed = 0
    for item in items:
        ref_score = scorer(item.source, item.reference)
        if all(ref_score > scorer(item.source, v) for v in item.variants):
            passed += 1
    return passed / len(items)


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def metrics_tsv(values: dict) -> str:
    """One `name<TAB>value` line per metric, in insertion order."""
    return "".join(f"{name}\t{_fmt(val)}\n" for name, val in values.items())


def projection_tsv(rows) -> str:
    return "".join(f"{_fmt(x)}\t{_fmt(y)}\t{lab}\n" for x, y, lab in rows)
