"""Emotion recognition and emotion-flip trigger detection for multi-party
dialogues: corpus tooling, embedding cache, the two models, training,
metrics, a CLI and an HTTP service."""

__version__ = "0.1.0"

from .errors import (
    CacheError,
    CheckpointError,
    CorpusParseError,
    CorpusValidationError,
    EncoderError,
    FlipkitError,
    InputError,
    TrainingError,
)

__all__ = [
    "__version__",
    "CacheError",
    "CheckpointError",
    "CorpusParseError",
    "CorpusValidationError",
    "EncoderError",
    "FlipkitError",
    "InputError",
    "TrainingError",
]
