"""Preference-budgeted merging of task vectors.

Combines per-task parameter deltas into a single model under explicit
per-task element budgets, builds those budgets from dataset similarity or
a geometric schedule, and ships a deterministic synthetic pipeline for
verifying steering behavior end to end.
"""

__version__ = "0.1.0"

from .container import (
    ParameterSet,
    TaskVector,
    TensorSpec,
    apply_task_vector,
    compute_task_vector,
    decode_container,
    encode_container,
)
from .errors import (
    CodecError,
    ConfigError,
    DegenerateInputError,
    MergeToolError,
    ShapeMismatchError,
    UsageError,
    ValidationError,
)
from .merging import (
    Assignment,
    LATER_TASK_WINS,
    MergeConfig,
    PreferenceVector,
    RESIDUAL_RANDOM,
    assignment_census,
    average_merge,
    magmax_merge,
    provenance_label,
    random_mix_merge,
    read_assignment,
    selection_stream,
    tunable_merge,
    write_assignment,
)
from .preference import (
    AlphaSchedule,
    SimilarityVector,
    load_preference,
    preference_from_alpha,
    preference_from_similarities,
    save_preference,
    validate_preference,
)
from .similarity import (
    EmbeddingSet,
    LabelHistogram,
    OTConfig,
    SinkhornResult,
    cosine_mean_distance,
    label_similarity,
    median_heuristic_bandwidth,
    mmd_rbf,
    ot_similarity,
    pairwise_sq_dists,
    similarity_vector,
    sinkhorn_ot,
)
from .harness import (
    EvalResult,
    PipelineConfig,
    PipelineReport,
    SyntheticTask,
    TargetEnvironment,
    evaluate,
    generate_task_suite,
    largest_remainder_counts,
    mix_target_environment,
    run_pipeline,
    sequential_finetune_analog,
)

__all__ = [
    "__version__",
    "ParameterSet",
    "TaskVector",
    "TensorSpec",
    "apply_task_vector",
    "compute_task_vector",
    "decode_container",
    "encode_container",
    "CodecError",
    "ConfigError",
    "DegenerateInputError",
    "MergeToolError",
    "ShapeMismatchError",
    "UsageError",
    "ValidationError",
    "Assignment",
    "LATER_TASK_WINS",
    "MergeConfig",
    "PreferenceVector",
    "RESIDUAL_RANDOM",
    "assignment_census",
    "average_merge",
    "magmax_merge",
    "provenance_label",
    "random_mix_merge",
    "read_assignment",
    "selection_stream",
    "tunable_merge",
    "write_assignment",
    "AlphaSchedule",
    "SimilarityVector",
    "load_preference",
    "preference_from_alpha",
    "preference_from_similarities",
    "save_preference",
    "validate_preference",
    "EmbeddingSet",
    "LabelHistogram",
    "OTConfig",
    "SinkhornResult",
    "cosine_mean_distance",
    "label_similarity",
    "median_heuristic_bandwidth",
    "mmd_rbf",
    "ot_similarity",
    "pairwise_sq_dists",
    "similarity_vector",
    "sinkhorn_ot",
    "EvalResult",
    "PipelineConfig",
    "PipelineReport",
    "SyntheticTask",
    "TargetEnvironment",
    "evaluate",
    "generate_task_suite",
    "largest_remainder_counts",
    "mix_target_environment",
    "run_pipeline",
    "sequential_finetune_analog",
]
