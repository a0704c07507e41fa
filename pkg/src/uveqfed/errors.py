"""Exception types shared across the package."""


class UVeQFedError(Exception):
    """Base class for all package errors."""


class InvalidInputError(UVeQFedError):
    """Input vector contains NaN/Inf or violates a precondition."""


class DecodeError(UVeQFedError):
    """Bit stream is malformed or inconsistent with the declared layout."""


class RateInfeasibleError(UVeQFedError):
    """The bit budget cannot be met even at the coarsest quantizer setting."""


class DivergedRunError(UVeQFedError):
    """A training run produced non-finite values or exploded past the guard."""


class IdxFormatError(UVeQFedError):
    """An IDX dataset file has a bad magic number or is truncated."""


class UnsupportedModelError(UVeQFedError):
    """Operation requires a convex model kind."""


class ConfigError(UVeQFedError):
    """Experiment configuration is invalid or contains unknown keys."""
