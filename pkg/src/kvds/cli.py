"""Command-line surface: index building, consistency reports, training runs,
decoding, sweeps, and the gradient audit. Every subcommand is deterministic
given its flags; report files are TSV or line-JSON and contain no timestamps,
so identical invocations produce byte-identical output.

Datastore inputs are sniffed by magic: a KVDS-RAW file, a KVDS-IDX file, or
an oracle spec, which is a JSON object

    {"corpus": [[ids...], ...] | "pairs.tsv", "d": 32, "epsilon": 0.05, "seed": 0}

where a string corpus is a path (relative to the JSON file) to a TSV of
`src<TAB>tgt` space-separated token id pairs whose target side is used.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .ann import (
    MAGIC_IDX,
    IndexConfig,
    IvfPqIndex,
    SearchParams,
    as_searcher,
    read_index,
    train_index,
    write_index,
)
from .datastore import (
    MAGIC_RAW,
    FormatError,
    RawDatastore,
    generate_oracle_datastore,
    oracle_codebook,
    read_raw,
)
from .fusion import (
    MODE_BASELINE,
    MODE_FUSION,
    MODE_INTERPOLATE,
    DecodeConfig,
    greedy_decode,
    score_sequence,
)
from .metrics import (
    ContrastiveItem,
    contrastive_eval,
    kv_consistency,
    metrics_tsv,
    project_2d,
    projection_tsv,
    qk_consistency,
    retrieval_accuracy,
)
from .training import (
    VOCAB_SIZE,
    TrainConfig,
    corpus_positives,
    gradient_suite,
    init_model,
    load_checkpoint,
    make_task,
    oracle_positives,
    report_line,
    save_checkpoint,
    token_accuracy,
    train,
)

_DECODE_MODES = {"baseline": MODE_BASELINE, "knn": MODE_INTERPOLATE, "pred": MODE_FUSION}


def _fmt(v) -> str:
    return f"{v:.10g}"


def _write_text(path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _parse_ids(text: str):
    try:
        ids = [int(t) for t in text.split()]
    except ValueError:
        raise ValueError(f"non-integer token id in {text!r}")
    if not ids:
        raise ValueError("empty token sequence")
    return ids


def _read_pairs(path):
    """TSV of `source<TAB>target`, both space-separated token ids."""
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 tab-separated columns")
            pairs.append((_parse_ids(cols[0]), _parse_ids(cols[1])))
    if not pairs:
        raise ValueError(f"{path}: no sentence pairs")
    return pairs


def _sniff(path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC_RAW:
        return "raw"
    if head == MAGIC_IDX:
        return "index"
    return "json"


def _load_oracle_spec(path) -> dict:
    with open(path) as fh:
        spec = json.load(fh)
    if not isinstance(spec, dict):
        raise ValueError(f"{path}: oracle spec must be a JSON object")
    for key in ("corpus", "d", "epsilon", "seed"):
        if key not in spec:
            raise ValueError(f"{path}: oracle spec missing {key!r}")
    corpus = spec["corpus"]
    if isinstance(corpus, str):
        corpus_path = os.path.join(os.path.dirname(os.path.abspath(path)), corpus)
        corpus = [tgt for _, tgt in _read_pairs(corpus_path)]
    spec = dict(spec, corpus=corpus)
    return spec


def _load_datastore(path):
    """Returns (RawDatastore, oracle spec or None) for raw or JSON inputs."""
    kind = _sniff(path)
    if kind == "raw":
        return read_raw(path), None
    if kind == "index":
        raise ValueError(f"{path}: expected a raw datastore or oracle spec, got an index")
    spec = _load_oracle_spec(path)
    ds = generate_oracle_datastore(
        spec["corpus"], int(spec["d"]), float(spec["epsilon"]), int(spec["seed"])
    )
    return ds, spec


def _index_as_raw(index: IvfPqIndex) -> RawDatastore:
    """Reconstruct stored keys (in index space) from a raw-retaining index."""
    if not index.has_raw:
        raise ValueError("index does not retain raw vectors; rebuild with --flat "
                         "or retained residuals")
    keys = np.empty((len(index), index.dim))
    for cell in range(index.nlist):
        ids = index.list_ids[cell]
        if len(ids):
            keys[ids] = index.list_residuals[cell] + index.coarse[cell]
    return RawDatastore(keys=keys, values=index.values)


def _load_search_backend(path, nprobe, rerank, metric):
    """(searcher, RawDatastore view or None) for raw/oracle/index inputs."""
    kind = _sniff(path)
    if kind == "index":
        index = read_index(path)
        params = SearchParams(nprobe=nprobe, rerank=rerank)
        ds = _index_as_raw(index) if index.has_raw else None
        return as_searcher(index, params), ds
    ds, _ = _load_datastore(path)
    return ds.searcher(metric), ds


def _epoch_means(reports) -> dict:
    tokens = np.array([r.tokens for r in reports], dtype=np.float64)
    return {
        "L_MT": float(np.average([r.L_MT for r in reports], weights=tokens)),
        "L_align": float(np.average([r.L_align for r in reports], weights=tokens)),
        "qk_cos": float(np.average([r.qk_cos for r in reports], weights=tokens)),
        "retr_acc": float(np.average([r.retr_acc for r in reports], weights=tokens)),
    }


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


def cmd_build_datastore(args) -> int:
    ds, _ = _load_datastore(args.input)
    config = IndexConfig(
        use_pca=args.pca_dim is not None,
        pca_dim=args.pca_dim,
        nlist=args.nlist,
        m=None if args.flat else args.pq_m,
        retain_raw=args.retain_raw,
    )
    index = train_index(ds, config, seed=args.seed)
    write_index(index, args.out)
    print(f"indexed {len(index)} vectors: nlist={index.nlist} m={index.m} "
          f"dim={index.dim}")
    return 0


def cmd_eval_consistency(args) -> int:
    if args.index is not None:
        index = read_index(args.index)
        ds = _index_as_raw(index)
        searcher = as_searcher(index, SearchParams(nprobe=args.nprobe))
    else:
        ds, _ = _load_datastore(args.raw)
        searcher = ds.searcher(args.metric)
    report = {
        "kv_consistency": kv_consistency(
            ds, searcher, args.k,
            exclude_self=not args.include_self,
            sample=args.sample, seed=args.seed,
        )
    }
    if args.queries is not None:
        q = read_raw(args.queries)
        if q.dim != ds.dim:
            raise ValueError("query dim does not match datastore dim")
        if len(q) != len(ds):
            raise ValueError("Q-K consistency needs one query per datastore entry")
        report["qk_consistency"] = qk_consistency(q.keys, ds.keys)
        report["retrieval_accuracy"] = retrieval_accuracy(
            q.keys, q.values, searcher, args.k
        )
    report["k"] = args.k
    report["count"] = len(ds)
    _write_text(args.report, metrics_tsv(report))
    return 0


def cmd_search(args) -> int:
    searcher, _ = _load_search_backend(args.index, args.nprobe, args.rerank,
                                       args.metric)
    queries = read_raw(args.queries)
    lines = ["query\trank\tentry\tvalue\tdistance\n"]
    for qi in range(len(queries)):
        ns = searcher(queries.keys[qi], args.k)
        for rank in range(len(ns)):
            lines.append(
                f"{qi}\t{rank}\t{ns.ids[rank]}\t{ns.values[rank]}\t"
                f"{_fmt(ns.distances[rank])}\n"
            )
    _write_text(args.report, "".join(lines))
    return 0


def _pairs_tsv(pairs) -> str:
    return "".join(
        " ".join(map(str, src)) + "\t" + " ".join(map(str, tgt)) + "\n"
        for src, tgt in pairs
    )


def cmd_make_task(args) -> int:
    task = make_task(args.seed, n_train=args.n_train, n_valid=args.n_valid,
                     n_test=args.n_test, min_len=args.min_len, max_len=args.max_len)
    os.makedirs(args.out_dir, exist_ok=True)
    for split in ("train", "valid", "test"):
        _write_text(os.path.join(args.out_dir, f"{split}.tsv"),
                    _pairs_tsv(getattr(task, split)))
    meta = {
        "seed": args.seed,
        "sigma": [int(v) for v in task.sigma],
        "vocab_size": VOCAB_SIZE,
        "n_train": args.n_train,
        "n_valid": args.n_valid,
        "n_test": args.n_test,
    }
    _write_text(os.path.join(args.out_dir, "task.json"),
                json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n")
    return 0


def _read_task_dir(task_dir):
    splits = {}
    for split in ("train", "valid", "test"):
        path = os.path.join(task_dir, f"{split}.tsv")
        if not os.path.exists(path):
            raise ValueError(f"task dir is missing {split}.tsv")
        splits[split] = _read_pairs(path)
    return splits


def _resolve_training_inputs(args, train_pairs):
    """(datastore, positives) for the requested mode/alignment."""
    if args.mode == "baseline":
        if args.align != "none":
            raise ValueError("alignment training requires --mode pred")
        return None, None
    if args.datastore is None:
        raise ValueError("--mode pred requires --datastore")
    ds, spec = _load_datastore(args.datastore)
    if args.align == "none":
        return ds, None
    if spec is not None:
        code = oracle_codebook(VOCAB_SIZE, int(spec["d"]), int(spec["seed"]))
        return ds, oracle_positives(code)
    return ds, corpus_positives(ds, train_pairs)


def _run_training(args, alpha: float):
    splits = _read_task_dir(args.task_dir)
    ds, positives = _resolve_training_inputs(args, splits["train"])
    config = TrainConfig(
        alpha=alpha, tau=args.tau, k=args.k, align=args.align, lr=args.lr,
        batch_tokens=args.batch_tokens, epochs=args.epochs, seed=args.seed,
        metric=args.metric, mode=_DECODE_MODES["pred"] if args.mode == "pred"
        else _DECODE_MODES["baseline"], normalize_nca=args.normalize_nca,
    )
    model = init_model(args.seed, d=args.d, d_f=args.d_f, d_k=args.d_k)
    epoch_rows = []

    def on_epoch(epoch, reports):
        row = {"epoch": epoch}
        row.update(_epoch_means(reports))
        row["valid_acc"] = token_accuracy(
            model, splits["valid"], ds=ds, mode=config.mode, k=config.k,
            metric=config.metric,
        )
        epoch_rows.append(row)

    step_lines = []
    hook = None
    if args.step_report is not None:
        hook = lambda step, rep: step_lines.append(report_line(step, rep) + "\n")
    train(model, splits["train"], ds, config, positives,
          step_hook=hook, epoch_hook=on_epoch)
    return model, ds, config, splits, epoch_rows, step_lines


def _epoch_jsonl(rows) -> str:
    out = []
    for row in rows:
        rounded = {k: (v if isinstance(v, int) else round(v, 10))
                   for k, v in row.items()}
        out.append(json.dumps(rounded, separators=(",", ":")) + "\n")
    return "".join(out)


def cmd_train(args) -> int:
    model, _, _, _, epoch_rows, step_lines = _run_training(args, args.alpha)
    save_checkpoint(model, args.out)
    if args.report is not None:
        _write_text(args.report, _epoch_jsonl(epoch_rows))
    if args.step_report is not None:
        _write_text(args.step_report, "".join(step_lines))
    last = epoch_rows[-1]
    print(f"final epoch: L_MT={_fmt(last['L_MT'])} valid_acc={_fmt(last['valid_acc'])}")
    return 0


def _decode_config(args) -> DecodeConfig:
    return DecodeConfig(mode=_DECODE_MODES[args.mode], k=args.k, T=args.T,
                        lam=args.lam, metric=args.metric)


def _decode_searcher(args):
    if args.mode == "baseline":
        return None
    if args.datastore is None:
        raise ValueError(f"--mode {args.mode} requires --datastore")
    searcher, _ = _load_search_backend(args.datastore, args.nprobe, args.rerank,
                                       args.metric)
    return searcher


def cmd_decode(args) -> int:
    model = load_checkpoint(args.checkpoint)
    config = _decode_config(args)
    searcher = _decode_searcher(args)
    pairs = _read_pairs(args.input)
    matched = 0
    total = 0
    exact = 0
    for src, ref in pairs:
        hyp = greedy_decode(model, searcher, src, config, max_len=args.max_len)
        matched += sum(1 for i, t in enumerate(ref) if i < len(hyp) and hyp[i] == t)
        total += len(ref)
        exact += int(hyp == list(ref))
    report = {
        "token_accuracy": matched / total,
        "exact_match": exact / len(pairs),
        "count": len(pairs),
    }
    _write_text(args.report, metrics_tsv(report))
    return 0


def cmd_contrastive_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    config = _decode_config(args)
    searcher = _decode_searcher(args)
    items = []
    with open(args.items) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            for key in ("source", "reference", "contrastive"):
                if key not in obj:
                    raise ValueError(f"{args.items}:{lineno}: missing {key!r}")
            items.append(ContrastiveItem(
                source=_parse_ids(obj["source"]),
                reference=_parse_ids(obj["reference"]),
                variants=tuple(_parse_ids(v) for v in obj["contrastive"]),
            ))

    def scorer(src, tgt):
        return score_sequence(model, searcher, src, tgt, config)

    report = {"contrastive_score": contrastive_eval(scorer, items),
              "count": len(items)}
    _write_text(args.report, metrics_tsv(report))
    return 0


def cmd_project(args) -> int:
    ds, _ = _load_datastore(args.vectors)
    rows = project_2d(ds.keys, [str(int(v)) for v in ds.values])
    _write_text(args.out, projection_tsv(rows))
    return 0


def _sweep_values(args, cast):
    try:
        return [cast(v) for v in args.values.split(",") if v]
    except ValueError:
        raise ValueError(f"bad sweep values {args.values!r}")


def cmd_sweep(args) -> int:
    if args.param == "epsilon":
        if args.corpus is None:
            raise ValueError("--param epsilon requires --corpus")
        corpus = [tgt for _, tgt in _read_pairs(args.corpus)]
        lines = ["epsilon\tkv_consistency\n"]
        for eps in _sweep_values(args, float):
            ds = generate_oracle_datastore(corpus, args.d, eps, args.seed)
            kv = kv_consistency(ds, ds.searcher(), args.k,
                                sample=args.sample, seed=args.seed)
            lines.append(f"{_fmt(eps)}\t{_fmt(kv)}\n")
    elif args.param == "k":
        if args.datastore is None:
            raise ValueError("--param k requires --datastore")
        ds, _ = _load_datastore(args.datastore)
        searcher = ds.searcher()
        lines = ["k\tkv_consistency\n"]
        for k in _sweep_values(args, int):
            kv = kv_consistency(ds, searcher, k, sample=args.sample,
                                seed=args.seed)
            lines.append(f"{k}\t{_fmt(kv)}\n")
    else:  # alpha
        if args.task_dir is None:
            raise ValueError("--param alpha requires --task-dir")
        lines = ["alpha\tqk_cos\tretr_acc\tvalid_acc\n"]
        for alpha in _sweep_values(args, float):
            _, _, _, _, epoch_rows, _ = _run_training(args, alpha)
            last = epoch_rows[-1]
            lines.append(f"{_fmt(alpha)}\t{_fmt(last['qk_cos'])}\t"
                         f"{_fmt(last['retr_acc'])}\t{_fmt(last['valid_acc'])}\n")
    _write_text(args.report, "".join(lines))
    return 0


def cmd_gradcheck(args) -> int:
    errors = gradient_suite(seed=args.seed)
    text = metrics_tsv(errors)
    sys.stdout.write(text)
    if args.report is not None:
        _write_text(args.report, text)
    bad = [name for name, err in errors.items()
           if err >= (1e-3 if name.startswith("combined") else 1e-4)]
    if bad:
        raise ValueError(f"gradient checks failed: {', '.join(bad)}")
    return 0


# ---------------------------------------------------------------------------
# Argument wiring.
# ---------------------------------------------------------------------------


def _add_decode_flags(p):
    p.add_argument("--mode", choices=sorted(_DECODE_MODES), default="baseline")
    p.add_argument("--datastore", help="raw store, oracle spec, or index")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--metric", choices=("l2", "ip"), default="l2")
    p.add_argument("--nprobe", type=int, default=None)
    p.add_argument("--rerank", action="store_true")


def _add_train_flags(p, with_alpha: bool):
    p.add_argument("--task-dir", required=True)
    p.add_argument("--datastore", help="raw store or oracle spec")
    p.add_argument("--mode", choices=("pred", "baseline"), default="pred")
    p.add_argument("--align", choices=("nca", "mse", "none"), default="nca")
    if with_alpha:
        p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-tokens", type=int, default=256)
    p.add_argument("--metric", choices=("l2", "ip"), default="l2")
    p.add_argument("--normalize-nca", action="store_true")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--d-f", type=int, default=64)
    p.add_argument("--d-k", type=int, default=None)
    p.add_argument("--step-report", default=None,
                   help="optional per-step JSONL path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvds",
        description="Token-level retrieval datastores, ANN search, consistency "
                    "metrics, and retrieval-fused toy training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-datastore", help="train a KVDS-IDX search index")
    p.add_argument("--input", required=True, help="KVDS-RAW file or oracle spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--pca-dim", type=int, default=None)
    p.add_argument("--nlist", type=int, default=None)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--pq-m", type=int)
    group.add_argument("--flat", action="store_true")
    p.add_argument("--retain-raw", action="store_true")
    p.set_defaults(func=cmd_build_datastore)

    p = sub.add_parser("eval-consistency",
                       help="key-value consistency (and Q-K given queries)")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--index")
    group.add_argument("--raw", help="KVDS-RAW file or oracle spec")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--metric", choices=("l2", "ip"), default="l2")
    p.add_argument("--queries", help="KVDS-RAW of aligned query vectors")
    p.add_argument("--include-self", action="store_true")
    p.add_argument("--sample", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nprobe", type=int, default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval_consistency)

    p = sub.add_parser("search", help="run queries against a store or index")
    p.add_argument("--index", required=True,
                   help="KVDS-IDX, KVDS-RAW, or oracle spec")
    p.add_argument("--queries", required=True, help="KVDS-RAW of query vectors")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--nprobe", type=int, default=None)
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--metric", choices=("l2", "ip"), default="l2")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("make-task", help="generate the synthetic translation task")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-valid", type=int, default=200)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=10)
    p.set_defaults(func=cmd_make_task)

    p = sub.add_parser("train", help="train the toy model")
    _add_train_flags(p, with_alpha=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", default=None, help="per-epoch JSONL path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="greedy decoding against references")
    p.add_argument("--checkpoint", required=True)
    _add_decode_flags(p)
    p.add_argument("--input", required=True, help="TSV of src/ref pairs")
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("sweep", help="grid over k, alpha, or epsilon")
    p.add_argument("--param", choices=("k", "alpha", "epsilon"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--report", required=True)
    p.add_argument("--corpus", help="pairs TSV for epsilon sweeps")
    p.add_argument("--datastore", help="store for k sweeps / training")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--sample", type=int, default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--task-dir")
    p.add_argument("--mode", choices=("pred", "baseline"), default="pred")
    p.add_argument("--align", choices=("nca", "mse", "none"), default="nca")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-tokens", type=int, default=256)
    p.add_argument("--metric", choices=("l2", "ip"), default="l2")
    p.add_argument("--normalize-nca", action="store_true")
    p.add_argument("--d-f", type=int, default=64)
    p.add_argument("--d-k", type=int, default=None)
    p.add_argument("--step-report", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("contrastive-eval",
                       help="reference vs contrastive variants by sequence score")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--items", required=True, help="line-JSON items file")
    _add_decode_flags(p)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_contrastive_eval)

    p = sub.add_parser("project", help="2-D PCA projection of stored keys")
    p.add_argument("--vectors", required=True, help="KVDS-RAW file or oracle spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
