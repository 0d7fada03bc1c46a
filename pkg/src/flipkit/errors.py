"""Exception hierarchy.

InputError covers anything caused by bad user input (malformed files,
misaligned arrays, unknown labels); everything else that goes wrong at
runtime derives from FlipkitError directly. The CLI maps InputError to
exit code 1 and other FlipkitError (or unexpected exceptions) to 2.
"""


class FlipkitError(Exception):
    """Base class for all errors raised by this package."""


class InputError(FlipkitError):
    """Invalid user-supplied input: files, labels, shapes, CLI arguments."""


class CorpusParseError(InputError):
    """The data file is not valid JSON or not the expected episode array."""


class CorpusValidationError(InputError):
    """An episode violates the schema (misaligned arrays, bad labels...)."""


class CacheError(FlipkitError):
    """Embedding cache is unreadable or inconsistent with the config."""


class EncoderError(FlipkitError):
    """The embedding provider failed or is unreachable."""


class CheckpointError(FlipkitError):
    """A model checkpoint is unreadable or inconsistent."""


class TrainingError(FlipkitError):
    """Training diverged or could not start (missing embeddings, NaN loss)."""
