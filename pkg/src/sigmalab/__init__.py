"""sigmalab: a numerical laboratory for the two-dimensional nonlinear
sigma model with gravitino on flat charts."""

from . import clifford, diagnostics, fields, grid, solver, target  # noqa: F401
from .errors import (  # noqa: F401
    CircleOutOfDomain,
    ConfigError,
    ConstraintViolated,
    DegeneratePoint,
    Diverged,
    GridTooSmall,
    NoConcentration,
    NotTangent,
    PicardStalled,
)

__version__ = "0.1.0"
