"""Exception types shared across the pipeline."""


class ShapeMismatchError(ValueError):
    """Input tensor shape does not match the declared contract."""


class SegmentLengthError(ShapeMismatchError):
    """Video segment length differs from the encoder's frames-per-segment."""


class InsufficientFramesError(ValueError):
    """Source video has fewer frames than the requested sample count."""


class ContextOverflowError(RuntimeError):
    """Assembled sequence does not fit the language model context window."""


class EmptyLossMaskError(ValueError):
    """Loss requested over a mask that selects no positions."""


class ConfigError(Exception):
    """Invalid or contradictory run configuration. CLI exit code 2."""


class CoverageGapError(Exception):
    """Predictions are missing for some reference items. CLI exit code 3."""


class PipelineError(RuntimeError):
    """Annotation step failed after retries; partial results were saved."""


class ParseError(ValueError):
    """Client returned output that does not parse as the requested format."""


class SchemaError(ValueError):
    """Record carries a tag outside the benchmark's fixed vocabulary."""
