from kvx.extractor import (
    KINDS,
    STRATEGY_TAGS,
    StubModel,
    export_vocab_map,
    extract,
    read_kvds_raw,
    vocab_map,
    write_kvds_raw,
)

__all__ = [
    "KINDS",
    "STRATEGY_TAGS",
    "StubModel",
    "export_vocab_map",
    "extract",
    "read_kvds_raw",
    "vocab_map",
    "write_kvds_raw",
]
