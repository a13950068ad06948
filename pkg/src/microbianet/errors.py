"""Exception hierarchy shared by all modules."""


class MicrobiaNetError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MicrobiaNetError):
    """Array shapes do not satisfy an operation's contract."""


class ParameterError(MicrobiaNetError):
    """A hyperparameter or argument is outside its allowed range."""


class NonFiniteError(MicrobiaNetError):
    """NaN or Inf appeared in the output of a numeric operation."""


class LabelError(MicrobiaNetError):
    """A class label or label index is not valid for the active scheme."""


class DegenerateBatchError(MicrobiaNetError):
    """Batch statistics requested on a batch that is too small."""


class DataError(MicrobiaNetError):
    """Segment, mask or split data violate a structural requirement."""


class SplitError(MicrobiaNetError):
    """A stratified split cannot be produced for the given records."""


class GenerationError(MicrobiaNetError):
    """The synthetic generator could not place colonies on the canvas."""


class IngestionError(MicrobiaNetError):
    """A manifest or image file is missing or malformed."""


class NormalizationError(MicrobiaNetError):
    """Channel statistics are degenerate (zero standard deviation)."""


class CheckpointError(MicrobiaNetError):
    """A checkpoint file is truncated, mismatched or unreadable."""


class SchemeError(MicrobiaNetError):
    """Operation applied to a report/model with the wrong label scheme."""


class StateError(MicrobiaNetError):
    """Model state used inconsistently (stale trace, wrong mode)."""


class DivergenceError(MicrobiaNetError):
    """Training produced a non-finite loss."""


class ConfigError(MicrobiaNetError):
    """An experiment configuration file is invalid."""
