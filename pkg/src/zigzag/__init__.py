"""Layer-exclusive retrieval/streaming attention at toy scale."""

from .errors import (
    CapacityError,
    ConsistencyError,
    InputError,
    NumericalError,
    TrainingError,
    ZigzagError,
)
from .kernels import StreamingConfig, full_attention, mixed_attention, streaming_attention
from .model import (
    AlphaMatrix,
    LossBreakdown,
    ModelConfig,
    ToyTransformer,
    TrainSample,
    alpha_gradient,
    classify_heads,
    distill_loss,
    reg_loss,
    train_alphas,
)
from .transport import (
    TransportSolution,
    assignment_cost,
    grid_search_omega,
    layer_budget,
    solve_enumerative,
    solve_greedy,
)

__version__ = "0.1.0"
