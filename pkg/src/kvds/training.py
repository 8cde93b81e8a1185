"""Toy encoder-decoder model, losses, manual gradients, and the training loop.

Single-layer architecture, one cross-attention hop, no decoder
self-attention (target positions are conditionally independent given the
shifted input, which keeps teacher forcing fully parallel):

    enc_j  = E_src[x_j] + pos_j
    u_t    = W_e[y_{t-1}] + pos_t
    a_tj   = softmax_j(u_t . enc_j / sqrt(d))
    c_t    = sum_j a_tj enc_j
    q_t    = u_t + c_t                      (retrieval tap, pre-FFN)
    h_t    = W_o relu(W_f q_t + b_f) + q_t  (decoder output state)

Baseline output is softmax(W_e h_t). The fusion decode path attends over
retrieved value embeddings with q_t, gates the result into h_t, and feeds
the fused state to the same tied output layer. Retrieval queries are
Q_proj q_t; the alignment losses (InfoNCE or MSE) pull those toward the
keys of gold tokens while the datastore stays frozen.

All gradients are hand-derived and checked against central finite
differences; training is float64 and bit-deterministic given a seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .datastore import FormatError, RawDatastore, exact_search_batch
from .fusion import FusionParams, _sigmoid, attend_values, gate_fuse
from .linalg import cosine

BOS_ID = 0
EOS_ID = 1
N_SYMBOLS = 40
VOCAB_SIZE = N_SYMBOLS + 2  # symbols 2..41 plus BOS/EOS

MAGIC_CKPT = b"KVCP"
CKPT_VERSION = 1

MODE_PRED = "pred_fusion"
MODE_BASE = "baseline"

_PARAM_ORDER = ("E_src", "W_e", "W_f", "b_f", "W_o", "W1", "W2", "b", "Q_proj")


def positional_encoding(n: int, d: int, base: float = 100.0) -> np.ndarray:
    """Fixed sinusoidal table, (n, d). Base 100 suits short sequences."""
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / base ** (2 * i / d)
    out = np.empty((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


@dataclass
class ToyModel:
    E_src: np.ndarray  # (V, d) source embeddings
    W_e: np.ndarray  # (V, d) tied target embeddings (input, values, output)
    W_f: np.ndarray  # (d_f, d)
    b_f: np.ndarray  # (d_f,)
    W_o: np.ndarray  # (d, d_f)
    fusion: FusionParams
    Q_proj: np.ndarray  # (d_k, d) query projection into key space
    pos_base: float = 100.0

    @property
    def d(self) -> int:
        return self.E_src.shape[1]

    @property
    def d_f(self) -> int:
        return self.W_f.shape[0]

    @property
    def d_k(self) -> int:
        return self.Q_proj.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.W_e.shape[0]

    def params(self) -> dict:
        return {
            "E_src": self.E_src,
            "W_e": self.W_e,
            "W_f": self.W_f,
            "b_f": self.b_f,
            "W_o": self.W_o,
            "W1": self.fusion.W1,
            "W2": self.fusion.W2,
            "b": self.fusion.b,
            "Q_proj": self.Q_proj,
        }

    def pos(self, n: int) -> np.ndarray:
        return positional_encoding(n, self.d, self.pos_base)

    def forward(self, X: Sequence[int], y_in: Sequence[int]):
        """Single-sequence forward. Returns (H, Q, baseline logits)."""
        batch = _BatchTensors.from_pairs([(list(X), list(y_in))], shift_gold=False)
        fwd = _forward_batch(self, batch)
        T = len(y_in)
        return fwd.h[0, :T], fwd.q[0, :T], fwd.h[0, :T] @ self.W_e.T


def init_model(
    seed: int,
    d: int = 32,
    d_f: int = 64,
    vocab_size: int = VOCAB_SIZE,
    d_k: Optional[int] = None,
    pos_base: float = 100.0,
) -> ToyModel:
    """Seeded init. Q_proj starts at identity when d_k == d."""
    rng = np.random.default_rng(seed)
    d_k = d if d_k is None else d_k
    scale = 0.5
    model = ToyModel(
        E_src=rng.normal(0.0, scale, size=(vocab_size, d)),
        W_e=rng.normal(0.0, scale, size=(vocab_size, d)),
        W_f=rng.normal(0.0, np.sqrt(2.0 / d), size=(d_f, d)),
        b_f=np.zeros(d_f),
        W_o=rng.normal(0.0, np.sqrt(1.0 / d_f), size=(d, d_f)),
        fusion=FusionParams.zeros(d),
        Q_proj=np.eye(d_k, d) if d_k == d else rng.normal(0.0, 1.0 / np.sqrt(d), size=(d_k, d)),
        pos_base=pos_base,
    )
    return model


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    tau: float = 0.1
    k: int = 8
    align: str = "nca"  # nca | mse | none
    lr: float = 1e-3
    batch_tokens: int = 256
    epochs: int = 5
    seed: int = 0
    metric: str = "l2"
    mode: str = MODE_PRED
    normalize_nca: bool = False  # ablation: cosine-style scores in the NCA loss

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.align not in ("nca", "mse", "none"):
            raise ValueError("align must be one of nca, mse, none")
        if self.mode not in (MODE_PRED, MODE_BASE):
            raise ValueError(f"mode must be {MODE_PRED} or {MODE_BASE}")


# ---------------------------------------------------------------------------
# Losses. Every function returns (loss, gradient) pairs; gradients are for
# the summed/averaged scalar exactly as documented.
# ---------------------------------------------------------------------------


def mt_loss(logits: np.ndarray, gold: np.ndarray):
    """Token-summed NLL and its gradient wrt logits (N, V)."""
    logits = np.asarray(logits, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.int64)
    if logits.ndim != 2 or len(gold) != len(logits):
        raise ValueError("logits (N, V) and gold (N,) required")
    if len(gold) and (gold.min() < 0 or gold.max() >= logits.shape[1]):
        raise ValueError("gold token outside vocabulary")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    picked = shifted[np.arange(len(gold)), gold]
    loss = float(np.sum(lse - picked))
    probs = np.exp(shifted - lse[:, None])
    grad = probs
    grad[np.arange(len(gold)), gold] -= 1.0
    return loss, grad


def _normalize_rows(a: np.ndarray):
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    return a / norms, norms


def nca_loss(
    queries: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    tau: float,
    normalize: bool = False,
):
    """Token-summed InfoNCE against a shared pool of negatives.

    Per token: -log( exp(q.k+ / tau) / (exp(q.k+ / tau) + sum over pool) ).
    The positive always sits in the denominator; the pool is used as given,
    duplicates included. Keys are frozen: gradients flow to queries only.
    With normalize=True scores use unit-normalized vectors (ablation).
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    Q = np.asarray(queries, dtype=np.float64)
    P = np.asarray(positives, dtype=np.float64)
    NEG = np.asarray(negatives, dtype=np.float64).reshape(-1, Q.shape[-1])
    if Q.shape != P.shape:
        raise ValueError("queries and positives must share a shape")
    if len(Q) == 0:
        return 0.0, np.zeros_like(Q)

    if normalize:
        Qn, qnorm = _normalize_rows(Q)
        Pn, _ = _normalize_rows(P)
        NEGn, _ = _normalize_rows(NEG) if len(NEG) else (NEG, None)
    else:
        Qn, Pn, NEGn = Q, P, NEG

    s_pos = np.sum(Qn * Pn, axis=1) / tau  # (N,)
    if len(NEGn):
        s_neg = Qn @ NEGn.T / tau  # (N, M)
        allscores = np.concatenate([s_pos[:, None], s_neg], axis=1)
    else:
        allscores = s_pos[:, None]
    mx = allscores.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.sum(np.exp(allscores - mx), axis=1))
    loss = float(np.sum(lse - s_pos))

    # d loss / d scores: softmax over [pos, negs] minus one-hot on pos
    probs = np.exp(allscores - lse[:, None])
    dn = np.zeros_like(Qn)
    dn += (probs[:, 0] - 1.0)[:, None] * Pn
    if len(NEGn):
        dn += probs[:, 1:] @ NEGn
    dn /= tau

    if normalize:
        # back through q / ||q||: (I - qn qn^T) / ||q||
        grad = (dn - Qn * np.sum(dn * Qn, axis=1, keepdims=True)) / qnorm
    else:
        grad = dn
    return loss, grad


def mse_loss(queries: np.ndarray, positives: np.ndarray):
    """Mean over tokens of squared distance to the positive key."""
    Q = np.asarray(queries, dtype=np.float64)
    P = np.asarray(positives, dtype=np.float64)
    if Q.shape != P.shape:
        raise ValueError("queries and positives must share a shape")
    if len(Q) == 0:
        return 0.0, np.zeros_like(Q)
    diff = Q - P
    loss = float(np.sum(diff ** 2) / len(Q))
    return loss, 2.0 * diff / len(Q)


def overall_loss(mt: float, align: float, alpha: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return mt + alpha * align


# ---------------------------------------------------------------------------
# Batched forward/backward with caches.
# ---------------------------------------------------------------------------


@dataclass
class _BatchTensors:
    X: np.ndarray  # (B, S) padded
    x_mask: np.ndarray  # (B, S) bool
    Yin: np.ndarray  # (B, T) padded decoder inputs
    gold: np.ndarray  # (B, T) padded gold tokens
    y_mask: np.ndarray  # (B, T) bool
    sent_idx: np.ndarray  # (B,) source sentence index (position in corpus)

    @staticmethod
    def from_pairs(pairs, sent_idx=None, shift_gold=True):
        """pairs: (source, target) token lists. When shift_gold is False the
        second element is taken as raw decoder input with no gold shift."""
        B = len(pairs)
        if shift_gold:
            srcs = [list(s) for s, _ in pairs]
            golds = [list(t) for _, t in pairs]
            yins = [[BOS_ID] + g[:-1] for g in golds]
        else:
            srcs = [list(s) for s, _ in pairs]
            yins = [list(t) for _, t in pairs]
            golds = [[0] * len(y) for y in yins]
        S = max(len(s) for s in srcs)
        T = max(len(y) for y in yins)
        X = np.zeros((B, S), dtype=np.int64)
        x_mask = np.zeros((B, S), dtype=bool)
        Yin = np.zeros((B, T), dtype=np.int64)
        gold = np.zeros((B, T), dtype=np.int64)
        y_mask = np.zeros((B, T), dtype=bool)
        for i, (s, y, g) in enumerate(zip(srcs, yins, golds)):
            X[i, : len(s)] = s
            x_mask[i, : len(s)] = True
            Yin[i, : len(y)] = y
            gold[i, : len(g)] = g
            y_mask[i, : len(y)] = True
        idx = np.zeros(B, dtype=np.int64) if sent_idx is None else np.asarray(sent_idx)
        return _BatchTensors(X, x_mask, Yin, gold, y_mask, idx)

    @property
    def token_count(self) -> int:
        return int(self.y_mask.sum())


@dataclass
class _Forward:
    enc: np.ndarray
    u: np.ndarray
    a: np.ndarray
    c: np.ndarray
    q: np.ndarray
    fpre: np.ndarray
    r: np.ndarray
    h: np.ndarray


def _forward_batch(model: ToyModel, batch: _BatchTensors) -> _Forward:
    V = model.vocab_size
    if batch.X.size and (batch.X.min() < 0 or batch.X[batch.x_mask].max() >= V):
        raise ValueError("source token outside vocabulary")
    if batch.Yin.size and (batch.Yin.min() < 0 or batch.Yin[batch.y_mask].max() >= V):
        raise ValueError("target token outside vocabulary")
    B, S = batch.X.shape
    T = batch.Yin.shape[1]
    if S == 0 or T == 0:
        raise ValueError("empty source or target sequence")
    d = model.d
    pos_s = model.pos(S)
    pos_t = model.pos(T)
    enc = model.E_src[batch.X] + pos_s[None, :, :]
    u = model.W_e[batch.Yin] + pos_t[None, :, :]
    scores = np.einsum("btd,bsd->bts", u, enc) / np.sqrt(d)
    scores = np.where(batch.x_mask[:, None, :], scores, -1e30)
    scores -= scores.max(axis=2, keepdims=True)
    ex = np.exp(scores)
    a = ex / ex.sum(axis=2, keepdims=True)
    c = np.einsum("bts,bsd->btd", a, enc)
    q = u + c
    fpre = np.einsum("btd,fd->btf", q, model.W_f) + model.b_f
    r = np.maximum(fpre, 0.0)
    h = np.einsum("btf,df->btd", r, model.W_o) + q
    return _Forward(enc=enc, u=u, a=a, c=c, q=q, fpre=fpre, r=r, h=h)


def _zero_grads(model: ToyModel) -> dict:
    return {name: np.zeros_like(p) for name, p in model.params().items()}


def _fusion_logits(model: ToyModel, q_flat: np.ndarray, h_flat: np.ndarray, vals: np.ndarray):
    """Fused output logits for flat tokens given retrieved values (N, k).

    Returns (logits, cache) where cache carries the intermediates the
    backward pass needs.
    """
    e = model.W_e[vals]  # (N, k, d)
    att = np.einsum("nkd,nd->nk", e, q_flat)
    att -= att.max(axis=1, keepdims=True)
    w = np.exp(att)
    w /= w.sum(axis=1, keepdims=True)
    m_vec = np.einsum("nk,nkd->nd", w, e)
    gate_pre = h_flat @ model.fusion.W1.T + m_vec @ model.fusion.W2.T + model.fusion.b
    g = _sigmoid(gate_pre)
    z = g * m_vec + (1.0 - g) * h_flat
    return z @ model.W_e.T, (e, w, m_vec, g, z)


PositiveFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def oracle_positives(codebook: np.ndarray) -> PositiveFn:
    """Positive key = the noiseless codebook vector of the gold token."""

    def fn(sent_idx, positions, gold):
        return codebook[gold]

    return fn


def corpus_positives(ds: RawDatastore, corpus) -> PositiveFn:
    """Positive key = the datastore entry built from the same (sentence,
    position) pair; requires ds to have been built from `corpus` in order."""
    offsets = np.zeros(len(corpus) + 1, dtype=np.int64)
    for i, (_, tgt) in enumerate(corpus):
        offsets[i + 1] = offsets[i] + len(tgt)
    if offsets[-1] != len(ds):
        raise ValueError("datastore does not line up with the corpus")

    def fn(sent_idx, positions, gold):
        return ds.keys[offsets[sent_idx] + positions]

    return fn


@dataclass
class StepReport:
    L_MT: float  # per-token mean
    L_align: float  # per-token mean
    qk_cos: float
    retr_acc: float
    tokens: int


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict, grads: dict, lr: float,
               beta1=0.9, beta2=0.999, eps=1e-8):
        self.step += 1
        t = self.step
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = beta1 * self.m[name] + (1 - beta1) * g
            self.v[name] = beta2 * self.v[name] + (1 - beta2) * g * g
            mhat = self.m[name] / (1 - beta1 ** t)
            vhat = self.v[name] / (1 - beta2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + eps)


def _loss_and_grads(
    model: ToyModel,
    batch: _BatchTensors,
    ds: Optional[RawDatastore],
    config: TrainConfig,
    positives: Optional[PositiveFn],
):
    """Combined loss, gradients for every parameter group, and report stats."""
    fwd = _forward_batch(model, batch)
    B, T = batch.Yin.shape
    d = model.d
    ymask = batch.y_mask
    N = batch.token_count
    gold_flat = batch.gold[ymask]
    q_flat = fwd.q[ymask]
    h_flat = fwd.h[ymask]
    grads = _zero_grads(model)

    qk_cos = 0.0
    retr_acc = 0.0
    L_align = 0.0
    dq_flat_extra = np.zeros((N, d))  # fusion-attention and alignment paths

    if config.mode == MODE_PRED:
        if ds is None or len(ds) == 0:
            raise ValueError("pred_fusion training requires a datastore")
        qp = q_flat @ model.Q_proj.T  # (N, d_k)
        ids, vals, _ = exact_search_batch(ds, qp, config.k, metric=config.metric)
        retr_acc = float(np.mean(vals == gold_flat[:, None]))

        logits, (e, w, m_vec, g, z) = _fusion_logits(model, q_flat, h_flat, vals)
        L_mt_sum, dlogits = mt_loss(logits, gold_flat)

        # alignment loss on projected queries
        if config.align != "none":
            if positives is None:
                raise ValueError("alignment training requires a positive-key binding")
            pos_keys = positives(_sent_flat(batch), _pos_flat(batch), gold_flat)
            if config.align == "nca":
                pool = ds.keys[ids.reshape(-1)]
                L_align_sum, dqp = nca_loss(qp, pos_keys, pool, config.tau,
                                            normalize=config.normalize_nca)
            else:
                L_align_sum, dqp = mse_loss(qp, pos_keys)
            qk_cos = float(np.mean([cosine(a_, b_) for a_, b_ in zip(qp, pos_keys)]))
            L_align = L_align_sum
            dq_flat_extra += config.alpha * (dqp @ model.Q_proj)
            grads["Q_proj"] += config.alpha * (dqp.T @ q_flat)

        # backward: output layer
        grads["W_e"] += dlogits.T @ z
        dz = dlogits @ model.W_e
        # gate
        dg = dz * (m_vec - h_flat)
        dm = dz * g
        dh_flat = dz * (1.0 - g)
        dpre = dg * g * (1.0 - g)
        grads["W1"] += dpre.T @ h_flat
        grads["W2"] += dpre.T @ m_vec
        grads["b"] += dpre.sum(axis=0)
        dh_flat += dpre @ model.fusion.W1
        dm += dpre @ model.fusion.W2
        # attention over value embeddings
        dw = np.einsum("nkd,nd->nk", e, dm)
        ds_att = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
        de = w[:, :, None] * dm[:, None, :] + ds_att[:, :, None] * q_flat[:, None, :]
        np.add.at(grads["W_e"], vals.reshape(-1), de.reshape(-1, d))
        dq_flat_extra += np.einsum("nk,nkd->nd", ds_att, e)
    else:
        logits = np.einsum("btd,vd->btv", fwd.h, model.W_e)
        L_mt_sum, dlogits_flat = mt_loss(logits[ymask], gold_flat)
        dlogits = dlogits_flat
        grads["W_e"] += dlogits.T @ h_flat
        dh_flat = dlogits @ model.W_e

    # scatter flat gradients back onto the (B, T) grid
    dh = np.zeros_like(fwd.h)
    dh[ymask] = dh_flat
    # FFN + residual
    dr = np.einsum("btd,df->btf", dh, model.W_o)
    grads["W_o"] += np.einsum("btd,btf->df", dh, fwd.r)
    dfpre = dr * (fwd.fpre > 0)
    grads["W_f"] += np.einsum("btf,btd->fd", dfpre, fwd.q)
    grads["b_f"] += dfpre.sum(axis=(0, 1))
    dq = np.einsum("btf,fd->btd", dfpre, model.W_f) + dh
    dq[ymask] += dq_flat_extra
    # cross attention
    da = np.einsum("btd,bsd->bts", dq, fwd.enc)
    ds_cross = fwd.a * (da - np.sum(fwd.a * da, axis=2, keepdims=True))
    du = dq + np.einsum("bts,bsd->btd", ds_cross, fwd.enc) / np.sqrt(d)
    denc = (
        np.einsum("bts,btd->bsd", ds_cross, fwd.u) / np.sqrt(d)
        + np.einsum("bts,btd->bsd", fwd.a, dq)
    )
    # embeddings + positions (positions fixed, no grad)
    np.add.at(grads["W_e"], batch.Yin[ymask], du[ymask])
    np.add.at(grads["E_src"], batch.X[batch.x_mask], denc[batch.x_mask])

    total = overall_loss(L_mt_sum, L_align, config.alpha if config.align != "none" else 0.0)
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite loss: mt={L_mt_sum} align={L_align}")
    report = StepReport(
        L_MT=L_mt_sum / max(N, 1),
        L_align=L_align / max(N, 1),
        qk_cos=qk_cos,
        retr_acc=retr_acc,
        tokens=N,
    )
    return total, grads, report


def _sent_flat(batch: _BatchTensors) -> np.ndarray:
    return np.repeat(batch.sent_idx, batch.y_mask.sum(axis=1))


def _pos_flat(batch: _BatchTensors) -> np.ndarray:
    T = batch.y_mask.shape[1]
    grid = np.tile(np.arange(T), (len(batch.y_mask), 1))
    return grid[batch.y_mask]


def train_step(
    model: ToyModel,
    batch_pairs,
    ds: Optional[RawDatastore],
    config: TrainConfig,
    opt: AdamState,
    positives: Optional[PositiveFn] = None,
    sent_idx=None,
) -> StepReport:
    """One optimizer update on a list of (source, target) pairs."""
    if len(batch_pairs) == 0:
        raise ValueError("empty batch")
    batch = _BatchTensors.from_pairs(batch_pairs, sent_idx=sent_idx)
    total, grads, report = _loss_and_grads(model, batch, ds, config, positives)
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    opt.update(model.params(), grads, config.lr)
    return report


def pack_batches(lengths: Sequence[int], order: np.ndarray, batch_tokens: int):
    """Greedy packing of sentence indices into batches by token budget."""
    batches = []
    cur: list = []
    cur_tokens = 0
    for idx in order:
        n = lengths[idx]
        if cur and cur_tokens + n > batch_tokens:
            batches.append(cur)
            cur = []
            cur_tokens = 0
        cur.append(int(idx))
        cur_tokens += n
    if cur:
        batches.append(cur)
    return batches


def train(
    model: ToyModel,
    pairs,
    ds: Optional[RawDatastore],
    config: TrainConfig,
    positives: Optional[PositiveFn] = None,
    step_hook: Optional[Callable[[int, StepReport], None]] = None,
    epoch_hook: Optional[Callable[[int, list], None]] = None,
):
    """Epoch loop with seeded shuffling. Returns the list of step reports."""
    rng = np.random.default_rng(config.seed)
    lengths = [len(t) for _, t in pairs]
    reports = []
    opt = AdamState()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        epoch_reports = []
        for batch_idx in pack_batches(lengths, order, config.batch_tokens):
            batch_pairs = [pairs[i] for i in batch_idx]
            report = train_step(
                model, batch_pairs, ds, config, opt, positives, sent_idx=batch_idx
            )
            epoch_reports.append(report)
            if step_hook is not None:
                step_hook(step, report)
            step += 1
        reports.extend(epoch_reports)
        if epoch_hook is not None:
            epoch_hook(epoch, epoch_reports)
    return reports


def token_accuracy(
    model: ToyModel,
    pairs,
    ds: Optional[RawDatastore] = None,
    mode: str = MODE_BASE,
    k: int = 8,
    metric: str = "l2",
    batch_tokens: int = 512,
) -> float:
    """Teacher-forced argmax accuracy over all gold tokens."""
    lengths = [len(t) for _, t in pairs]
    order = np.arange(len(pairs))
    correct = 0
    total = 0
    for batch_idx in pack_batches(lengths, order, batch_tokens):
        batch = _BatchTensors.from_pairs([pairs[i] for i in batch_idx])
        fwd = _forward_batch(model, batch)
        ymask = batch.y_mask
        gold_flat = batch.gold[ymask]
        h_flat = fwd.h[ymask]
        if mode == MODE_PRED:
            if ds is None or len(ds) == 0:
                raise ValueError("pred_fusion accuracy requires a datastore")
            q_flat = fwd.q[ymask]
            qp = q_flat @ model.Q_proj.T
            _, vals, _ = exact_search_batch(ds, qp, k, metric=metric)
            logits, _ = _fusion_logits(model, q_flat, h_flat, vals)
        else:
            logits = h_flat @ model.W_e.T
        preds = np.argmax(logits, axis=1)
        correct += int(np.sum(preds == gold_flat))
        total += len(gold_flat)
    return correct / max(total, 1)


# ---------------------------------------------------------------------------
# Synthetic task: reverse the source and apply a fixed symbol permutation.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTask:
    sigma: np.ndarray  # (V,) permutation over symbol ids, identity on BOS/EOS
    train: tuple
    valid: tuple
    test: tuple

    @property
    def vocab_size(self) -> int:
        return VOCAB_SIZE


def make_task(
    seed: int,
    n_train: int = 2000,
    n_valid: int = 200,
    n_test: int = 200,
    min_len: int = 4,
    max_len: int = 10,
) -> SyntheticTask:
    """Deterministic corpora. target[i] = sigma(source[L-1-i]), EOS-terminated."""
    rng = np.random.default_rng(seed)
    sigma = np.arange(VOCAB_SIZE)
    sigma[2:] = rng.permutation(np.arange(2, VOCAB_SIZE))
    need = n_train + n_valid + n_test
    seen = set()
    sources = []
    while len(sources) < need:
        L = int(rng.integers(min_len, max_len + 1))
        s = tuple(int(t) for t in rng.integers(2, VOCAB_SIZE, size=L))
        if s in seen:
            continue
        seen.add(s)
        sources.append(s)

    def to_pair(symbols):
        src = list(symbols) + [EOS_ID]
        tgt = [int(sigma[t]) for t in reversed(symbols)] + [EOS_ID]
        return (src, tgt)

    pairs = [to_pair(s) for s in sources]
    return SyntheticTask(
        sigma=sigma,
        train=tuple(pairs[:n_train]),
        valid=tuple(pairs[n_train : n_train + n_valid]),
        test=tuple(pairs[n_train + n_valid :]),
    )


# ---------------------------------------------------------------------------
# Finite-difference gradient checking.
# ---------------------------------------------------------------------------


def grad_check(
    loss_fn: Callable[[], tuple],
    params: dict,
    step: float = 1e-4,
    sample: int = 0,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn() must return (loss, grads-dict) evaluated at the current
    parameter values; params maps names to the arrays loss_fn reads.
    sample > 0 checks a seeded subset of coordinates per group.
    """
    _, grads = loss_fn()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        gflat = grads[name].reshape(-1)
        idx = np.arange(flat.size)
        if sample and flat.size > sample:
            idx = rng.choice(flat.size, size=sample, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up, _ = loss_fn()
            flat[i] = orig - step
            down, _ = loss_fn()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("non-finite loss during finite differences")
            numeric = (up - down) / (2 * step)
            analytic = gflat[i]
            rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, rel)
    return worst


def model_loss_fn(
    model: ToyModel,
    batch_pairs,
    ds: Optional[RawDatastore],
    config: TrainConfig,
    positives: Optional[PositiveFn] = None,
    sent_idx=None,
):
    """Closure over the full combined loss for grad_check."""
    batch = _BatchTensors.from_pairs(batch_pairs, sent_idx=sent_idx)

    def fn():
        total, grads, _ = _loss_and_grads(model, batch, ds, config, positives)
        return total, grads

    return fn


def gradient_suite(seed: int = 0) -> dict:
    """Finite-difference audit of every differentiable piece.

    Returns {check name: max relative error}. Individual losses should sit
    below 1e-4 and the combined end-to-end checks below 1e-3.
    """
    from .datastore import generate_oracle_datastore, oracle_codebook

    rng = np.random.default_rng(seed)
    out = {}

    logits = rng.standard_normal((5, 9))
    gold = rng.integers(0, 9, size=5)
    out["mt_loss"] = grad_check(
        lambda: (lambda l, g: (l, {"logits": g}))(*mt_loss(logits, gold)),
        {"logits": logits},
    )

    q = rng.standard_normal((4, 6))
    kpos = rng.standard_normal((4, 6))
    out["mse_loss"] = grad_check(
        lambda: (lambda l, g: (l, {"q": g}))(*mse_loss(q, kpos)),
        {"q": q},
    )

    qn = rng.standard_normal((3, 8))
    pn = rng.standard_normal((3, 8))
    neg = rng.standard_normal((10, 8))
    out["nca_loss"] = grad_check(
        lambda: (lambda l, g: (l, {"q": g}))(*nca_loss(qn, pn, neg, 0.3)),
        {"q": qn},
    )

    # NCA through the query projection: gradients wrt Q_proj itself
    W = rng.standard_normal((5, 8)) * 0.5
    qs = rng.standard_normal((3, 8))
    p5 = rng.standard_normal((3, 5))
    n5 = rng.standard_normal((9, 5))

    def nca_proj():
        loss, dqp = nca_loss(qs @ W.T, p5, n5, 0.4)
        return loss, {"Q_proj": dqp.T @ qs}

    out["nca_loss_q_proj"] = grad_check(nca_proj, {"Q_proj": W})

    # attention over value embeddings: scalar probe loss c . m
    qa = rng.standard_normal(6)
    E = rng.standard_normal((4, 6))
    ca = rng.standard_normal(6)

    def attend_probe():
        m, w = attend_values(qa, E)
        dw = E @ ca
        dsoft = w * (dw - np.dot(w, dw))
        dq = E.T @ dsoft
        dE = np.outer(w, ca) + np.outer(dsoft, qa)
        return float(ca @ m), {"q": dq, "E": dE}

    out["attend_values"] = grad_check(attend_probe, {"q": qa, "E": E})

    # gated fusion: scalar probe loss c . z
    h = rng.standard_normal(7)
    mv = rng.standard_normal(7)
    fp = FusionParams(
        W1=rng.standard_normal((7, 7)) * 0.3,
        W2=rng.standard_normal((7, 7)) * 0.3,
        b=rng.standard_normal(7) * 0.3,
    )
    cg = rng.standard_normal(7)

    def gate_probe():
        z, g = gate_fuse(h, mv, fp)
        dz = cg
        dg = dz * (mv - h)
        dpre = dg * g * (1.0 - g)
        return float(cg @ z), {
            "h": dz * (1.0 - g) + fp.W1.T @ dpre,
            "m": dz * g + fp.W2.T @ dpre,
            "W1": np.outer(dpre, h),
            "W2": np.outer(dpre, mv),
            "b": dpre,
        }

    out["gate_fuse"] = grad_check(
        gate_probe, {"h": h, "m": mv, "W1": fp.W1, "W2": fp.W2, "b": fp.b}
    )

    # end-to-end: combined train-step loss on a tiny batch
    corpus = [[2, 5, 1], [7, 3, 9, 1], [4, 2, 1]]
    pairs = [([5, 2, 1], [2, 5, 1]), ([3, 7, 1], [7, 3, 9, 1])]
    model = init_model(seed, d=8, d_f=10, vocab_size=12)
    ds = generate_oracle_datastore(corpus, d=8, epsilon=0.4, seed=seed + 1)
    code = oracle_codebook(12, 8, seed=seed + 1)
    config = TrainConfig(mode=MODE_PRED, align="nca", alpha=0.7, tau=0.3, k=3)
    fn = model_loss_fn(model, pairs, ds, config, oracle_positives(code),
                       sent_idx=[0, 1])
    out["combined_pred_nca"] = grad_check(fn, model.params(), step=1e-5,
                                          sample=20, seed=seed + 2)

    base_model = init_model(seed + 3, d=8, d_f=10, vocab_size=12)
    base_config = TrainConfig(mode=MODE_BASE, align="none")
    fn_base = model_loss_fn(base_model, pairs, None, base_config)
    out["combined_baseline"] = grad_check(fn_base, base_model.params(),
                                          step=1e-5, sample=20, seed=seed + 2)
    return out


# ---------------------------------------------------------------------------
# Checkpoints: f32 binary dump of all parameter groups.
# ---------------------------------------------------------------------------

_CKPT_HEADER = struct.Struct("<4sIIIIIf")


def save_checkpoint(model: ToyModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(
                MAGIC_CKPT,
                CKPT_VERSION,
                model.vocab_size,
                model.d,
                model.d_f,
                model.d_k,
                model.pos_base,
            )
        )
        for name in _PARAM_ORDER:
            fh.write(np.ascontiguousarray(model.params()[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> ToyModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CKPT_HEADER.size:
        raise FormatError("checkpoint shorter than header")
    magic, version, V, d, d_f, d_k, pos_base = _CKPT_HEADER.unpack_from(blob)
    if magic != MAGIC_CKPT:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    shapes = {
        "E_src": (V, d),
        "W_e": (V, d),
        "W_f": (d_f, d),
        "b_f": (d_f,),
        "W_o": (d, d_f),
        "W1": (d, d),
        "W2": (d, d),
        "b": (d,),
        "Q_proj": (d_k, d),
    }
    offset = _CKPT_HEADER.size
    arrays = {}
    for name in _PARAM_ORDER:
        shape = shapes[name]
        n = int(np.prod(shape))
        end = offset + 4 * n
        if end > len(blob):
            raise FormatError("checkpoint truncated")
        arrays[name] = (
            np.frombuffer(blob[offset:end], dtype="<f4").astype(np.float64).reshape(shape)
        )
        offset = end
    if offset != len(blob):
        raise FormatError("trailing bytes after checkpoint payload")
    return ToyModel(
        E_src=arrays["E_src"],
        W_e=arrays["W_e"],
        W_f=arrays["W_f"],
        b_f=arrays["b_f"],
        W_o=arrays["W_o"],
        fusion=FusionParams(W1=arrays["W1"], W2=arrays["W2"], b=arrays["b"]),
        Q_proj=arrays["Q_proj"],
        pos_base=float(pos_base),
    )


def report_line(step: int, report: StepReport) -> str:
    """Deterministic JSONL record for one training step."""
    return json.dumps(
        {
            "step": step,
            "L_MT": round(report.L_MT, 10),
            "L_align": round(report.L_align, 10),
            "qk_cos": round(report.qk_cos, 10),
            "retr_acc": round(report.retr_acc, 10),
        },
        separators=(",", ":"),
    )
