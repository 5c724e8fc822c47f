"""Exception types shared across the package."""


class SigmalabError(Exception):
    """Base class for all package errors."""


class ConfigError(SigmalabError):
    """Bad or missing configuration key/value."""


class DegeneratePoint(SigmalabError):
    """Ambient point outside the tubular neighborhood of the target."""


class NotTangent(SigmalabError):
    """A vector that was required to be tangent is not."""


class GridTooSmall(SigmalabError):
    """Grid has too few points per axis for the stencils."""


class CircleOutOfDomain(SigmalabError):
    """A requested circle or annulus does not fit inside the chart."""


class ConstraintViolated(SigmalabError):
    """FieldState constraint (phi on target / psi tangency) is violated."""


class Diverged(SigmalabError):
    """Nonlinear solve failed to reduce the residual."""


class PicardStalled(SigmalabError):
    """Picard iteration for the spinor subsolve did not contract."""


class NoConcentration(SigmalabError):
    """No energy concentration point above threshold was detected."""
