"""Simulated tensor/sequence-parallel transformer layer for numerical checks."""

from .collectives import (
    CollectiveError,
    CommLog,
    RankShardedTensor,
    all_gather,
    all_reduce,
    reduce_scatter,
    ring_volume,
)
from .layer import (
    HarnessConfig,
    LayerParams,
    RecomputeMismatchError,
    init_params,
    parallel_block_backward,
    parallel_block_forward,
    reference_block_backward,
    reference_block_forward,
    selective_recompute_attention,
    seqpar_block_backward,
    seqpar_block_forward,
)

__all__ = [
    "CollectiveError",
    "CommLog",
    "HarnessConfig",
    "LayerParams",
    "RankShardedTensor",
    "RecomputeMismatchError",
    "all_gather",
    "all_reduce",
    "init_params",
    "parallel_block_backward",
    "parallel_block_forward",
    "reduce_scatter",
    "reference_block_backward",
    "reference_block_forward",
    "ring_volume",
    "selective_recompute_attention",
    "seqpar_block_backward",
    "seqpar_block_forward",
]
