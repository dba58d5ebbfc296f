"""Context parallelism for jagged-batch SiLU attention.

Core pieces: jagged containers and mini-chunk sharding, the reference and
blockwise attention operators with a learnable time-delta bias, simulated
collectives with exact traffic/residency accounting, the context-parallel
ring engine, and the experiment harness served over HTTP or the CLI.
"""

from .attention import (
    AttentionGradients,
    AttentionInputs,
    BiasConfig,
    BiasParams,
    blockwise_partial,
    bucketize,
    compute_bias,
    hstu_attention_backward,
    hstu_attention_reference,
    silu,
)
from .comm import (
    CollectiveError,
    CommStats,
    JaggedMessage,
    RankGroup,
    all_gather_jagged,
    all_to_all_jagged,
    ring_send_recv,
)
from .cp_engine import (
    FlopsReport,
    PlanEntry,
    QKVBatch,
    RankContext,
    ShardPlan,
    build_shard_plan,
    flops_per_rank,
    redistribute_allgather_split,
    redistribute_alltoall,
    restore_outputs,
    ring_hstu_attention,
    run_pipeline,
)
from .harness import (
    ExperimentConfig,
    ExperimentReport,
    SweepReport,
    VerifyReport,
    fixture_bundle,
    gen_synthetic_batch,
    run_experiment,
    sweep_max_tokens,
    verify_grid,
)
from .jagged import (
    JaggedIntSeries,
    JaggedTensor,
    MiniChunkLayout,
    chunk_assignment,
    inverse_reorder,
    jagged_from_record,
    jagged_to_record,
    lengths,
    make_minichunks,
    new_int_series,
    new_jagged,
    reorder_balanced,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionGradients",
    "AttentionInputs",
    "BiasConfig",
    "BiasParams",
    "CollectiveError",
    "CommStats",
    "ExperimentConfig",
    "ExperimentReport",
    "FlopsReport",
    "JaggedIntSeries",
    "JaggedMessage",
    "JaggedTensor",
    "MiniChunkLayout",
    "PlanEntry",
    "QKVBatch",
    "RankContext",
    "RankGroup",
    "ShardPlan",
    "SweepReport",
    "VerifyReport",
    "all_gather_jagged",
    "all_to_all_jagged",
    "blockwise_partial",
    "bucketize",
    "build_shard_plan",
    "chunk_assignment",
    "compute_bias",
    "fixture_bundle",
    "flops_per_rank",
    "gen_synthetic_batch",
    "hstu_attention_backward",
    "hstu_attention_reference",
    "inverse_reorder",
    "jagged_from_record",
    "jagged_to_record",
    "lengths",
    "make_minichunks",
    "new_int_series",
    "new_jagged",
    "redistribute_allgather_split",
    "redistribute_alltoall",
    "reorder_balanced",
    "restore_outputs",
    "ring_hstu_attention",
    "ring_send_recv",
    "run_experiment",
    "run_pipeline",
    "silu",
    "sweep_max_tokens",
    "verify_grid",
]
