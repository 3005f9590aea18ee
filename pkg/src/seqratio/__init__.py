"""Early multiclass time-series classification with LLR-matrix estimation and the MSPRT."""
from .core import (
    ClassPriorStats,
    CostMatrix,
    Decision,
    DegenerateInput,
    EmptyClass,
    InvalidInput,
    LlrMatrixSeries,
    NumericalDivergence,
    PosteriorSeries,
    PreconditionFailed,
    ScoreVector,
    SequenceBatch,
    ThresholdMatrix,
    antisymmetrize,
    min_rival_margin,
    validate_cost_matrix,
)

__version__ = "0.1.0"
