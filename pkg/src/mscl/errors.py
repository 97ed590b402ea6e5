"""Exception types shared across the package.

Every failure mode the pipeline reports deliberately gets its own class so
callers (and the CLI's single-line error formatter) can dispatch on type
rather than parse messages.
"""


class MsclError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MsclError, ValueError):
    """Operand shapes, ranks, or sizes violate an operation's contract."""


class InvalidValueError(MsclError, ValueError):
    """Values outside an operation's domain (NaN, non-positive, out of range)."""


class EmptyInputError(MsclError, ValueError):
    """An input that must be nonempty was empty."""


class LabelError(MsclError, ValueError):
    """A label tensor is not one-hot."""


class TapeError(MsclError, RuntimeError):
    """Tape misuse: backward on a consumed tape or a detached loss."""


class OptimizerError(MsclError, RuntimeError):
    """Optimizer stepped over parameters with missing gradients or bad state."""


class FormatError(MsclError, ValueError):
    """A serialized artifact (RLE counts, manifest, JSONL, checkpoint) is malformed."""


class BackendError(MsclError, RuntimeError):
    """A proposal backend failed; the message names the backend."""


class ParameterError(MsclError, ValueError):
    """A hyperparameter is outside its legal range."""


class EmptyTargetError(MsclError, ValueError):
    """A generation target contained no non-padding positions."""


class LengthError(MsclError, ValueError):
    """A token sequence exceeds the configured maximum length."""


class InputError(MsclError, ValueError):
    """A dataset-level input (corpus, study set, pair list) is unusable."""


class SchemaError(MsclError, ValueError):
    """A dataset manifest or generations file violates its schema."""


class ConfigError(MsclError, ValueError):
    """A run configuration is invalid; raised before any work starts."""


class CompatibilityError(MsclError, RuntimeError):
    """A checkpoint does not match the requested model, vocab, or dataset."""


class TrainingError(MsclError, RuntimeError):
    """Training aborted (for example on a NaN loss); the message names the term."""
