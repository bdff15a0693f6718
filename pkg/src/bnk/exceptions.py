"""Error types raised by the numerics, kernel and inference layers."""


class NotPSD(ValueError):
    """A matrix required to be positive semi-definite failed factorisation."""


class NonHurwitz(ValueError):
    """A feedback matrix has an eigenvalue with non-negative real part."""


class NonPSDCavity(ValueError):
    """Removing a site fraction left a cavity with non-PD precision."""


class SingularScaling(ValueError):
    """The tilted-update scaling factor could not be formed."""


class ModeUnsupported(ValueError):
    """The requested approximation mode does not apply to this likelihood."""


class DomainError(ValueError):
    """An observation lies outside the likelihood's support."""


class Unsupported(ValueError):
    """The kernel has no state-space form for the requested operation."""


class DimensionOverflow(ValueError):
    """A tensor-product quadrature grid would exceed the node cap."""


class ParseError(ValueError):
    """A data file could not be parsed; carries the offending row number."""

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row
