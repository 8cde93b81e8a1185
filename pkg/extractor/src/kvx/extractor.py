"""Hidden-state extraction from pretrained-style models into raw datastores.

Three tap rules cover the usual model families. For a target sentence
y_0..y_{L-1}:

  MLM: the full sentence goes in at once; the state over position t is
       paired with y_t.
  DAE: the full sentence is visible on the encoder side while the decoder
       runs teacher-forced; the decoder state before emitting y_t (prefix
       y_{<t} consumed) is paired with y_t.
  CLM: causal only; the state after consuming y_{<t} is paired with y_t.

Every strategy therefore emits exactly one key per token. Output is the
little-endian KVDS-RAW layout: magic "KVDR", version u32 = 1, dim u32,
count u64, strategy tag u8 (0=MLM, 1=DAE, 2=CLM, 3=other), 7 reserved
bytes, then count records of [dim x f32 key, u32 value]. A sidecar JSON
maps the model tokenizer's ids onto dense engine ids 0..V-1.

The bundled stub model makes all of this testable offline; loading a real
checkpoint is optional and only attempted for non-stub model names.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"KVDR"
VERSION = 1
_HEADER = struct.Struct("<4sIIQB7x")

KINDS = ("MLM", "DAE", "CLM")
STRATEGY_TAGS = {"MLM": 0, "DAE": 1, "CLM": 2}

# Named layer selectors. "top" is the natural tap for MLM states; encoder-
# decoder and causal LMs tap the final decoder layer's FFN input instead.
_DEFAULT_SELECTOR = {"MLM": "top", "DAE": "ffn-input", "CLM": "ffn-input"}
_NAMED_SELECTORS = ("top", "ffn-input")


# ---------------------------------------------------------------------------
# Stub model. Vocabulary ids are deliberately sparse so the dense engine
# mapping is not an identity.
# ---------------------------------------------------------------------------

_STUB_VOCAB = {"<unk>": 7}
_STUB_VOCAB.update({f"w{i:02d}": 11 + 3 * i for i in range(40)})
_UNK = _STUB_VOCAB["<unk>"]


@dataclass
class StubModel:
    """Deterministic stand-in for a checkpoint.

    With mix = 0 the state over position t is exactly one-hot(t), which
    pins the pairing arithmetic. With mix > 0 each state also sums content
    embeddings of the positions the strategy may look at, so causality and
    strategy differences become observable. DAE counts prefix tokens a
    second time: the decoder sees them again on top of the encoder pass.
    """

    dim: int = 64
    mix: float = 0.0
    seed: int = 0
    _table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        max_id = max(_STUB_VOCAB.values())
        self._table = rng.standard_normal((max_id + 1, self.dim))

    def tokenize(self, line: str) -> list:
        return [_STUB_VOCAB.get(w, _UNK) for w in line.split()]

    def vocab(self) -> dict:
        return dict(_STUB_VOCAB)

    def states(self, kind: str, ids) -> np.ndarray:
        L = len(ids)
        if L > self.dim:
            raise ValueError(
                f"sentence of {L} tokens exceeds stub capacity {self.dim}"
            )
        out = np.zeros((L, self.dim))
        for t in range(L):
            out[t, t] = 1.0
            if self.mix:
                for j in self._visible(kind, t, L):
                    out[t] += self.mix * self._table[ids[j]] / (j + 2)
        return out

    def _visible(self, kind: str, t: int, L: int):
        if kind == "MLM":
            return range(L)
        if kind == "CLM":
            return range(t)
        # DAE: encoder pass over everything plus the decoder prefix again
        return list(range(L)) + list(range(t))


def _load_model(model_name: str):
    if model_name == "stub" or model_name.startswith("stub:"):
        kwargs = {}
        if ":" in model_name:
            for part in model_name.split(":", 1)[1].split(","):
                k, _, v = part.partition("=")
                if k not in ("dim", "mix", "seed"):
                    raise ValueError(f"unknown stub parameter: {k}")
                kwargs[k] = int(v) if k in ("dim", "seed") else float(v)
        return StubModel(**kwargs)
    try:
        from .real import load_checkpoint_model  # optional heavyweight backend
    except ImportError:
        raise ValueError(f"unsupported model: {model_name}")
    return load_checkpoint_model(model_name)


def _resolve_selector(kind: str, layer_selector):
    if layer_selector is None:
        return _DEFAULT_SELECTOR[kind]
    if isinstance(layer_selector, int):
        if layer_selector < 0:
            raise ValueError("layer selector must be >= 0")
        return layer_selector
    if layer_selector in _NAMED_SELECTORS:
        return layer_selector
    raise ValueError(f"unknown layer selector: {layer_selector!r}")


# ---------------------------------------------------------------------------
# Serialization. Written here from the documented layout; the reader below
# exists so this package can audit its own output without the engine.
# ---------------------------------------------------------------------------


def write_kvds_raw(path, keys: np.ndarray, values: np.ndarray, tag: int) -> None:
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values)
    if keys.ndim != 2 or len(keys) != len(values):
        raise ValueError("keys must be (count, dim) with one value per key")
    record = np.dtype([("key", "<f4", (keys.shape[1],)), ("value", "<u4")])
    body = np.empty(len(keys), dtype=record)
    body["key"] = keys.astype(np.float32)
    body["value"] = values.astype(np.uint32)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, keys.shape[1], len(keys), tag))
        f.write(body.tobytes())


def read_kvds_raw(path):
    """Parse a KVDS-RAW file; returns (keys, values, tag)."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise ValueError("file too short for KVDS-RAW header")
    magic, version, dim, count, tag = _HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise ValueError("not a KVDS-RAW file")
    record = np.dtype([("key", "<f4", (dim,)), ("value", "<u4")])
    body = data[_HEADER.size:]
    if len(body) != count * record.itemsize:
        raise ValueError("KVDS-RAW body size mismatch")
    rows = np.frombuffer(body, dtype=record)
    return (
        rows["key"].astype(np.float64).reshape(count, dim),
        rows["value"].astype(np.int64),
        tag,
    )


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def vocab_map(model) -> dict:
    """Model token id -> dense engine id, assigned in ascending id order."""
    ids = sorted(model.vocab().values())
    if len(set(ids)) != len(ids):
        raise ValueError("model vocabulary has duplicate ids")
    return {mid: eid for eid, mid in enumerate(ids)}


def export_vocab_map(model_name: str, out_path) -> dict:
    model = _load_model(model_name)
    mapping = vocab_map(model)
    with open(out_path, "w", newline="\n") as f:
        json.dump({str(mid): eid for mid, eid in mapping.items()}, f,
                  indent=0, separators=(",", ":"))
        f.write("\n")
    return mapping


def extract(model_kind: str, model_name: str, corpus_path, layer_selector,
            out_path) -> int:
    """Run the tap rule over a one-sentence-per-line corpus.

    Writes out_path (KVDS-RAW, strategy tag set) and a <out_path>.vocab.json
    sidecar. Returns the number of entries written. Blank lines contribute
    nothing; a corpus with no tokens still produces a valid count-0 file.
    """
    if model_kind not in KINDS:
        raise ValueError(f"unsupported model kind: {model_kind}")
    model = _load_model(model_name)
    _resolve_selector(model_kind, layer_selector)
    mapping = vocab_map(model)

    with open(corpus_path, "r") as f:
        lines = f.read().splitlines()

    key_blocks = []
    values = []
    for line in lines:
        ids = model.tokenize(line)
        if not ids:
            continue
        key_blocks.append(model.states(model_kind, ids))
        values.extend(mapping[i] for i in ids)

    if key_blocks:
        keys = np.concatenate(key_blocks, axis=0)
    else:
        keys = np.zeros((0, model.dim))
    write_kvds_raw(out_path, keys, np.asarray(values, dtype=np.int64),
                   STRATEGY_TAGS[model_kind])
    export_vocab_map(model_name, str(out_path) + ".vocab.json")
    return len(values)
