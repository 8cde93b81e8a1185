"""Decoding-side math for retrieval-augmented generation.

Three decode modes share one code path:

- baseline: softmax over tied output embeddings, no retrieval.
- knn_interpolate: mix the model distribution with a distance-weighted
  distribution over retrieved values.
- pred_fusion: attend over retrieved value embeddings, gate the result into
  the decoder state, then softmax. Ignores the temperature and mixing
  weight; those only exist on the interpolation path.

Models are duck-typed: anything with ``forward(X, Y_in) -> (H, Q, logits)``
plus ``W_e``, ``Q_proj`` and ``fusion`` attributes works (see training
module for the reference implementation). Retrieval always queries with the
projected representation ``Q_proj @ q_t``; the attention over value
embeddings uses the unprojected ``q_t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datastore import NeighborSet, Searcher
from .linalg import softmax

MODE_BASELINE = "baseline"
MODE_INTERPOLATE = "knn_interpolate"
MODE_FUSION = "pred_fusion"
MODES = (MODE_BASELINE, MODE_INTERPOLATE, MODE_FUSION)


@dataclass
class FusionParams:
    """Gate parameters: g = sigmoid(W1 h + W2 m + b), z = g*m + (1-g)*h."""

    W1: np.ndarray
    W2: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        d = self.b.shape[0]
        if self.W1.shape != (d, d) or self.W2.shape != (d, d):
            raise ValueError("W1, W2 must be square and match the bias dim")
        for a in (self.W1, self.W2, self.b):
            if not np.all(np.isfinite(a)):
                raise ValueError("fusion parameters must be finite")

    @staticmethod
    def zeros(d: int) -> "FusionParams":
        return FusionParams(W1=np.zeros((d, d)), W2=np.zeros((d, d)), b=np.zeros(d))


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = MODE_BASELINE
    k: int = 8
    T: float = 1.0
    lam: float = 0.5
    metric: str = "l2"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.T <= 0:
            raise ValueError("temperature T must be positive")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lambda must lie in [0, 1]")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def knn_distribution(
    query: np.ndarray, neighbors: NeighborSet, T: float, vocab_size: int
) -> np.ndarray:
    """Distribution over the vocab: p(y) proportional to sum exp(-d_i / T)
    over neighbors carrying value y. Unretrieved tokens get probability 0.

    The distances stored in the neighbor set are used as-is; ``query`` is
    the vector they were computed from and is not re-examined here.
    """
    if T <= 0:
        raise ValueError("temperature T must be positive")
    if len(neighbors) == 0:
        raise ValueError("empty neighbor set; caller should fall back to pure MT")
    values = np.asarray(neighbors.values, dtype=np.int64)
    if values.min() < 0 or values.max() >= vocab_size:
        raise ValueError("neighbor value outside vocabulary")
    weights = softmax(-np.asarray(neighbors.distances, dtype=np.float64) / T)
    p = np.zeros(vocab_size)
    np.add.at(p, values, weights)
    return p


def interpolate(p_mt: np.ndarray, p_knn: np.ndarray, lam: float) -> np.ndarray:
    """lam * p_mt + (1 - lam) * p_knn. The weight sits on the MT term."""
    if not (0.0 <= lam <= 1.0):
        raise ValueError("lambda must lie in [0, 1]")
    if p_mt.shape != p_knn.shape:
        raise ValueError("distributions must have equal shape")
    return lam * p_mt + (1.0 - lam) * p_knn


def attend_values(q: np.ndarray, value_embeddings: np.ndarray):
    """Attention over retrieved-value embeddings, plain dot-product scores.

    Returns (m, weights) with m = sum_j weights_j * e_j and
    weights = softmax_j(q . e_j). No sqrt(d) scaling.
    """
    E = np.atleast_2d(np.asarray(value_embeddings, dtype=np.float64))
    if E.shape[0] < 1:
        raise ValueError("need at least one value embedding")
    if E.shape[1] != q.shape[0]:
        raise ValueError("embedding dim does not match query dim")
    weights = softmax(E @ q)
    return E.T @ weights, weights


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gate_fuse(h: np.ndarray, m: np.ndarray, params: FusionParams):
    """Gated fusion: g = sigmoid(W1 h + W2 m + b); z = g*m + (1-g)*h."""
    if h.shape != m.shape or h.shape[0] != params.b.shape[0]:
        raise ValueError("h, m and fusion params must share one dim")
    g = _sigmoid(params.W1 @ h + params.W2 @ m + params.b)
    return g * m + (1.0 - g) * h, g


def output_distribution(z: np.ndarray, W_e: np.ndarray) -> np.ndarray:
    """softmax(W_e @ z): tied-embedding output layer."""
    if W_e.shape[1] != z.shape[0]:
        raise ValueError("embedding matrix does not match state dim")
    return softmax(W_e @ z)


def _step_distribution(
    model, searcher: Searcher, h: np.ndarray, q: np.ndarray, config: DecodeConfig
) -> np.ndarray:
    """Token distribution for one position under the configured mode."""
    vocab = model.W_e.shape[0]
    if config.mode == MODE_BASELINE:
        return output_distribution(h, model.W_e)
    retrieval_q = model.Q_proj @ q
    neighbors = searcher(retrieval_q, config.k)
    if config.mode == MODE_INTERPOLATE:
        p_mt = output_distribution(h, model.W_e)
        if len(neighbors) == 0:
            return p_mt
        p_knn = knn_distribution(retrieval_q, neighbors, config.T, vocab)
        return interpolate(p_mt, p_knn, config.lam)
    # pred_fusion
    if len(neighbors) == 0:
        return output_distribution(h, model.W_e)
    m, _ = attend_values(q, model.W_e[neighbors.values])
    z, _ = gate_fuse(h, m, model.fusion)
    return output_distribution(z, model.W_e)


def score_sequence(
    model,
    searcher: Searcher,
    X: Sequence[int],
    Y: Sequence[int],
    config: DecodeConfig,
    bos_id: int = 0,
) -> float:
    """Teacher-forced total log-probability of Y given X."""
    if len(Y) == 0:
        raise ValueError("cannot score an empty target")
    y_in = [bos_id] + list(Y[:-1])
    H, Q, _ = model.forward(X, y_in)
    total = 0.0
    for t, gold in enumerate(Y):
        if not (0 <= gold < model.W_e.shape[0]):
            raise ValueError(f"target token {gold} outside vocabulary")
        p = _step_distribution(model, searcher, H[t], Q[t], config)
        total += float(np.log(np.maximum(p[gold], 1e-300)))
    return total


def greedy_decode(
    model,
    searcher: Searcher,
    X: Sequence[int],
    config: DecodeConfig,
    max_len: int = 32,
    bos_id: int = 0,
    eos_id: int = 1,
) -> list:
    """Deterministic argmax decoding until EOS or max_len tokens."""
    out: list = []
    for _ in range(max_len):
        H, Q, _ = model.forward(X, [bos_id] + out)
        p = _step_distribution(model, searcher, H[-1], Q[-1], config)
        token = int(np.argmax(p))
        out.append(token)
        if token == eos_id:
            break
    return out
