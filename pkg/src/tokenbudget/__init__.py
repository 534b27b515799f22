"""Visual-token budgeting over pre-extracted embedding sequences.

Text-conditioned frame selection, temporal dedup merging, spatial token
sampling, and iterative bipartite merging, with a reverse-mode
differentiation core small enough to verify end to end.
"""

from .autodiff import Tensor
from .errors import (
    BudgetError,
    ConfigError,
    DimensionError,
    FormatError,
    TrainingError,
)
from .estimator import TokenBudgetReducer
from .merger import (
    BudgetConfig,
    MergeGroups,
    bipartite_halve,
    enforce_budget,
    find_duplicate_groups,
    temporal_merge,
)
from .nn import AttentionStack, multi_head_attention
from .pipeline import (
    PipelineConfig,
    PipelineParams,
    PipelineTrace,
    SynthInstance,
    run,
    sweep,
    synth_generate,
    synth_stream,
    train_toy,
)
from .sampler import Projection, SpatialQueryBank, assemble_sequence, project, spatial_sample
from .selector import (
    QueryBank,
    SelectionMatrix,
    TextContext,
    VideoTokens,
    generate_queries,
    gumbel_softmax,
    select_frames,
    selection_logits,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionStack",
    "BudgetConfig",
    "BudgetError",
    "ConfigError",
    "DimensionError",
    "FormatError",
    "MergeGroups",
    "PipelineConfig",
    "PipelineParams",
    "PipelineTrace",
    "Projection",
    "QueryBank",
    "SelectionMatrix",
    "SpatialQueryBank",
    "SynthInstance",
    "Tensor",
    "TextContext",
    "TokenBudgetReducer",
    "TrainingError",
    "VideoTokens",
    "assemble_sequence",
    "bipartite_halve",
    "enforce_budget",
    "find_duplicate_groups",
    "generate_queries",
    "gumbel_softmax",
    "multi_head_attention",
    "project",
    "run",
    "select_frames",
    "selection_logits",
    "spatial_sample",
    "sweep",
    "synth_generate",
    "synth_stream",
    "temporal_merge",
    "train_toy",
]
