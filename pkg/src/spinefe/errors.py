"""Exception hierarchy.

Every failure raised by this package derives from :class:`SpineFEError` and
carries a short machine-readable ``category`` used by the command line
interface to build its one-line ``error:<category>: message`` output.
"""


class SpineFEError(Exception):
    """Base class for all package errors."""

    category = "error"


class MeshError(SpineFEError):
    """Invalid mesh topology, geometry, or part bookkeeping."""

    category = "mesh"


class MaterialError(SpineFEError):
    """Material mapping or assignment failure."""

    category = "material"


class SolverError(SpineFEError):
    """Assembly or linear-solve failure (singular, indefinite, non-finite)."""

    category = "solver"


class ConvergenceError(SolverError):
    """Iteration budget exhausted before reaching tolerance."""

    category = "convergence"


class RegistrationError(SpineFEError):
    """Rigid fit or alignment failure (degenerate cloud, divergence)."""

    category = "registration"


class BracketError(SpineFEError):
    """Root bracket does not contain the target value."""

    category = "bracket"


class CompareError(SpineFEError):
    """Model-vs-measurement comparison is undefined (too little overlap)."""

    category = "compare"


class FormatError(SpineFEError):
    """File does not conform to its documented format."""

    category = "format"


class ConfigError(SpineFEError):
    """Pipeline configuration is missing keys or has invalid values."""

    category = "config"
