"""Non-local recurrent neural memory: blockwise self-attention memory with
gated recurrent updates, fused into an LSTM backbone for long-range
sequence classification. Includes baselines, synthetic long-range tasks,
and a CLI experiment harness."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    NumericError,
    ParseError,
    TapeError,
)
from .lstm import LstmLayerParams, LstmLayerState, lstm_step, stack_forward
from .memory import (
    BlockUnavailableError,
    MemoryState,
    NrnmConfig,
    NrnmParams,
    assemble_block,
    memory_contribution,
    memory_embedding,
    memory_schedule,
    update_memory,
)
from .model import (
    ModelConfig,
    SequenceBatch,
    SequenceClassifier,
    loss_from_logits,
    nll_loss,
    predict,
)
from .tensor import GradTape, Tensor, backward

__all__ = [
    "BlockUnavailableError",
    "ConfigError",
    "DimensionError",
    "DivergenceError",
    "GradTape",
    "LstmLayerParams",
    "LstmLayerState",
    "MemoryState",
    "ModelConfig",
    "NrnmConfig",
    "NrnmParams",
    "NumericError",
    "ParseError",
    "SequenceBatch",
    "SequenceClassifier",
    "TapeError",
    "Tensor",
    "assemble_block",
    "backward",
    "loss_from_logits",
    "lstm_step",
    "memory_contribution",
    "memory_embedding",
    "memory_schedule",
    "nll_loss",
    "predict",
    "stack_forward",
    "update_memory",
]
