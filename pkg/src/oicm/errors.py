"""Exception types shared across the package."""


class OicmError(Exception):
    """Base class for package errors."""


class ShapeError(OicmError, ValueError):
    """Input tensor has the wrong channel count or indivisible spatial dims."""


class FrozenParamsError(OicmError, RuntimeError):
    """A parameter collection that must stay frozen has changed."""


class EntropyDomainError(OicmError, ValueError):
    """Likelihood or temperature outside its valid domain."""


class CoderError(OicmError, RuntimeError):
    """Range coder failure (corrupt or truncated stream)."""


class SymbolRangeError(CoderError):
    """A symbol fell outside its CDF table support."""

    def __init__(self, index: int, symbol: int, lo: int, hi: int):
        super().__init__(
            f"symbol {symbol} at position {index} outside table support [{lo}, {hi}]"
        )
        self.index = index
        self.symbol = symbol


class BitstreamError(OicmError, ValueError):
    """Malformed bitstream container."""


class MagicMismatchError(BitstreamError):
    pass


class VersionMismatchError(BitstreamError):
    pass


class ModelIdMismatchError(BitstreamError):
    pass


class TruncatedPayloadError(BitstreamError):
    pass


class ChecksumError(BitstreamError):
    pass


class ConfigError(OicmError, ValueError):
    """Bad experiment configuration (unknown key, unparsable value)."""


class DatasetError(OicmError, ValueError):
    """Missing or corrupt dataset file."""


class InsufficientOverlapError(OicmError, ValueError):
    """RD curves do not overlap enough in metric range for BD-rate."""
