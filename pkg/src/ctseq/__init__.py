"""Consistency-regularized self-attentive sequential recommendation."""

from .corpus import InteractionLog, SequenceBatch, UserSequence
from .encoder import EncoderConfig, PassOutput, SequenceEncoder
from .evaluator import EvalProtocol, EvalReport
from .objectives import LossBreakdown, LossWeights
from .trainer import PreparedData, TrainConfig, TrainState

__all__ = [
    "EncoderConfig",
    "EvalProtocol",
    "EvalReport",
    "InteractionLog",
    "LossBreakdown",
    "LossWeights",
    "PassOutput",
    "PreparedData",
    "SequenceBatch",
    "SequenceEncoder",
    "TrainConfig",
    "TrainState",
    "UserSequence",
]
