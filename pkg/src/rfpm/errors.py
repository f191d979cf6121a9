"""Exception types shared across the package."""


class RFPMError(Exception):
    """Base class for all package errors."""


class ShapeError(RFPMError, ValueError):
    """Tensor shapes or sizes are inconsistent."""


class NumericError(RFPMError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class ConfigError(RFPMError, ValueError):
    """A configuration or parameter set is invalid or inconsistent."""


class FormatError(RFPMError, ValueError):
    """A file does not follow the expected binary or text layout."""


class GenerationError(RFPMError, ValueError):
    """A synthetic scene cannot be rendered as described."""


class DegenerateInputError(RFPMError, ValueError):
    """A metric was asked for over an empty set of valid pixels."""
