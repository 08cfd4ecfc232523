"""Exception types shared across the package."""


class SketchChatError(Exception):
    """Base class for all package errors."""


class DimensionError(SketchChatError, ValueError):
    """An array or vector had an unexpected dimension."""


class EmptySketchError(SketchChatError, ValueError):
    """A stroke operation received an empty drawing."""


class DegenerateCorpusError(SketchChatError, ValueError):
    """A corpus statistic (e.g. offset std) is degenerate."""


class DegenerateGeometryError(SketchChatError, ValueError):
    """A drawing has no usable spatial extent."""


class AlignmentError(SketchChatError, ValueError):
    """Predictions and targets could not be aligned."""


class ConfigError(SketchChatError, ValueError):
    """Invalid model or training configuration."""


class ParameterError(SketchChatError, ValueError):
    """Distribution parameters violate their invariants."""


class FormatError(SketchChatError, ValueError):
    """A file did not match its expected layout."""


class MappingError(SketchChatError, KeyError):
    """A clip-art or category id has no known mapping."""


class SessionConflictError(SketchChatError):
    """A session op overlapped with another in-flight op."""


class SessionNotFoundError(SketchChatError, KeyError):
    """Unknown session or object id."""


class InstructionTooLongError(SketchChatError, ValueError):
    """Instruction text exceeded the length limit."""
