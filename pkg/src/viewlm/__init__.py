"""Joint-embedding training for small byte-level language models on paired views."""

from .errors import (CapacityError, ContractError, DegenerateInputError, DimensionError,
                     DivergenceError, FormatError, SchemaError, ViewLMError, VocabularyError)
from .masking import SegmentLayout, additive_mask, block_causal_mask, pack_views
from .model import Model, ModelConfig, TransformerWeights, load_checkpoint, save_checkpoint
from .numerics import Tape, Tensor, backward
from .objectives import LossBreakdown, ObjectiveConfig, dropout_schedule, llm_jepa_loss
from .trainer import TrainConfig, train

__all__ = [
    "CapacityError", "ContractError", "DegenerateInputError", "DimensionError",
    "DivergenceError", "FormatError", "SchemaError", "ViewLMError", "VocabularyError",
    "SegmentLayout", "additive_mask", "block_causal_mask", "pack_views",
    "Model", "ModelConfig", "TransformerWeights", "load_checkpoint", "save_checkpoint",
    "Tape", "Tensor", "backward",
    "LossBreakdown", "ObjectiveConfig", "dropout_schedule", "llm_jepa_loss",
    "TrainConfig", "train",
]
