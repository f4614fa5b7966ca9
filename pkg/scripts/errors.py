"""
Exception hierarchy shared by every TSCD component.

The command-line entry point maps these onto exit codes:
usage/input problems -> 2, numeric failures -> 3.
"""


class TSCDError(Exception):
    """Base class for all errors raised by the toolkit."""


class ShapeError(TSCDError):
    """Incompatible shapes, channel counts or broadcast patterns."""


class NumericError(TSCDError):
    """A computation produced NaN or Inf."""


class GraphError(TSCDError):
    """Invalid use of the differentiation graph (non-scalar root, cycles)."""


class SamplingError(TSCDError):
    """Invalid position sampling or mismatched sampled positions."""


class ConfigError(TSCDError):
    """Unknown configuration key or unparsable value."""


class ImageFormatError(TSCDError):
    """Malformed or truncated portable pixmap/graymap file."""


class CheckpointError(TSCDError):
    """Unreadable or incompatible parameter checkpoint."""


class GenerationError(TSCDError):
    """Synthetic scene could not be placed within the retry budget."""


class TrainingDiverged(NumericError):
    """Non-finite loss during training; carries the component values seen so far."""

    def __init__(self, message, components=None, step=None):
        super().__init__(message)
        self.components = dict(components or {})
        self.step = step
