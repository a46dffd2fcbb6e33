"""kvtier: importance-aware tiered KV-cache management simulator.

Submodules:
    trace        binary .kvtr attention traces (I/O, validation, synthesis)
    importance   token scoring and query-aware chunk score bounds
    chunk_tree   adaptive chunk partitioning and exact top-k selection
    tiered_store hot/warm memory tiers over a file-backed cold tier
    pipeline     transfer/compute overlap schedules and the compression split
    engine       end-to-end runs, metrics, and reports
    cli          command-line front end
"""

from kvtier.chunk_tree import (
    ChunkNode,
    ChunkPlanConfig,
    Partition,
    SelectionResult,
    build_partition,
    chunk_cost,
    merge_desert,
    plan_chunk_count,
    select_top_k,
)
from kvtier.engine import (
    ABLATE_COLUMNS,
    ABLATION_ROWS,
    STEP_COLUMNS,
    RunConfig,
    RunReport,
    StepRow,
    ablate,
    ablation_table,
    attention_output,
    cosine_similarity,
    default_tier,
    desert_rate_on_grid,
    oracle_output,
    run,
    run_and_report,
    write_ablation,
    write_report,
)
from kvtier.importance import (
    ChunkAbstract,
    ChunkBounds,
    bound_chunk,
    make_abstract,
    merge_abstracts,
    score_tokens,
    softmax,
)
from kvtier.pipeline import (
    MODES,
    SCHEDULE_COLUMNS,
    LayerLoad,
    LayerTiming,
    ModeSummary,
    PipelineParams,
    StepSchedule,
    ThetaSolution,
    build_schedule,
    calibrate_host,
    compare_modes,
    compress_payload,
    decompress_payload,
    schedule_rows,
    solve_theta,
    write_calibration,
)
from kvtier.tiered_store import (
    CapacityError,
    ColdStoreError,
    LedgerRow,
    ResidencyError,
    TierConfig,
    TieredStore,
    abstract_nbytes,
    kv_nbytes,
    place_initial,
)
from kvtier.trace import (
    AttentionTrace,
    DesertProfile,
    TraceFormatError,
    TraceHeader,
    generate_synthetic,
    read_trace,
    validate_trace,
    write_trace,
)

__version__ = "0.1.0"

__all__ = [
    "ABLATE_COLUMNS",
    "ABLATION_ROWS",
    "AttentionTrace",
    "CapacityError",
    "ChunkAbstract",
    "ChunkBounds",
    "ChunkNode",
    "ChunkPlanConfig",
    "ColdStoreError",
    "DesertProfile",
    "LayerLoad",
    "LayerTiming",
    "LedgerRow",
    "MODES",
    "ModeSummary",
    "Partition",
    "PipelineParams",
    "ResidencyError",
    "RunConfig",
    "RunReport",
    "SCHEDULE_COLUMNS",
    "STEP_COLUMNS",
    "SelectionResult",
    "StepRow",
    "StepSchedule",
    "ThetaSolution",
    "TierConfig",
    "TieredStore",
    "TraceFormatError",
    "TraceHeader",
    "ablate",
    "ablation_table",
    "abstract_nbytes",
    "attention_output",
    "bound_chunk",
    "build_partition",
    "build_schedule",
    "calibrate_host",
    "chunk_cost",
    "compare_modes",
    "compress_payload",
    "cosine_similarity",
    "decompress_payload",
    "default_tier",
    "desert_rate_on_grid",
    "generate_synthetic",
    "kv_nbytes",
    "make_abstract",
    "merge_abstracts",
    "merge_desert",
    "oracle_output",
    "place_initial",
    "plan_chunk_count",
    "read_trace",
    "run",
    "run_and_report",
    "schedule_rows",
    "score_tokens",
    "select_top_k",
    "softmax",
    "solve_theta",
    "validate_trace",
    "write_ablation",
    "write_calibration",
    "write_report",
    "write_trace",
    "__version__",
]
