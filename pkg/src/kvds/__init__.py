"""Token-level key-value datastore retrieval engine.

Builds (key vector, value token) datastores, searches them exactly or via an
IVF-PQ index, measures key-value / query-key consistency, and trains a toy
attention translation model whose retrieval queries are contrastively aligned
to the datastore keys.
"""

__version__ = "0.1.0"

from kvds.ann import (
    IndexConfig,
    IvfPqIndex,
    SearchParams,
    as_searcher,
    read_index,
    search,
    train_index,
    write_index,
)
from kvds.datastore import (
    AlignmentStrategy,
    Entry,
    NeighborSet,
    RawDatastore,
    exact_search,
    exact_search_batch,
    generate_oracle_datastore,
    oracle_codebook,
    read_raw,
    write_raw,
)
from kvds.fusion import (
    DecodeConfig,
    FusionParams,
    attend_values,
    gate_fuse,
    greedy_decode,
    interpolate,
    knn_distribution,
    output_distribution,
    score_sequence,
)
from kvds.linalg import PcaModel, cosine, kmeans, pca_apply, pca_fit, softmax
from kvds.metrics import (
    ContrastiveItem,
    contrastive_eval,
    kv_consistency,
    metrics_tsv,
    project_2d,
    projection_tsv,
    qk_consistency,
    retrieval_accuracy,
)
from kvds.training import (
    SyntheticTask,
    ToyModel,
    TrainConfig,
    grad_check,
    gradient_suite,
    init_model,
    load_checkpoint,
    make_task,
    mse_loss,
    mt_loss,
    nca_loss,
    save_checkpoint,
    token_accuracy,
    train,
    train_step,
)

__all__ = [
    "AlignmentStrategy",
    "ContrastiveItem",
    "DecodeConfig",
    "Entry",
    "FusionParams",
    "IndexConfig",
    "IvfPqIndex",
    "NeighborSet",
    "PcaModel",
    "RawDatastore",
    "SearchParams",
    "SyntheticTask",
    "ToyModel",
    "TrainConfig",
    "as_searcher",
    "attend_values",
    "contrastive_eval",
    "cosine",
    "exact_search",
    "exact_search_batch",
    "gate_fuse",
    "generate_oracle_datastore",
    "grad_check",
    "gradient_suite",
    "greedy_decode",
    "init_model",
    "interpolate",
    "kmeans",
    "knn_distribution",
    "kv_consistency",
    "load_checkpoint",
    "make_task",
    "metrics_tsv",
    "mse_loss",
    "mt_loss",
    "nca_loss",
    "oracle_codebook",
    "output_distribution",
    "pca_apply",
    "pca_fit",
    "project_2d",
    "projection_tsv",
    "qk_consistency",
    "read_index",
    "read_raw",
    "retrieval_accuracy",
    "save_checkpoint",
    "score_sequence",
    "search",
    "softmax",
    "token_accuracy",
    "train",
    "train_index",
    "train_step",
    "write_index",
    "write_raw",
]
