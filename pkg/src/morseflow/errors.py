"""Exception types shared across the package."""


class MeshFailure(Exception):
    """Mesh generation could not resolve the requested geometry."""


class DegenerateFamilyError(Exception):
    """The deformation family has a singular Jacobian where one is needed."""


class ParseError(ValueError):
    """Expression parse failure; carries the byte offset of the offending token."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class UnsupportedFamilyError(Exception):
    """Operation requested for a family kind it does not support."""


class UnsupportedBCError(Exception):
    """Crossing-form formula requested for the wrong boundary condition."""


class UnsupportedGeometryError(Exception):
    """Boundary geometry lacks the analytic data (e.g. curvature) required."""


class NumericalBreakdownError(Exception):
    """Symmetric factorization failed; carries the failing pivot index."""

    def __init__(self, message: str, pivot: int):
        super().__init__(f"{message} (pivot {pivot})")
        self.pivot = pivot


class InvalidBracketError(Exception):
    """Crossing refinement called on a bracket without a sign change."""


class RefineGridError(Exception):
    """Scan grid too coarse; carries the suspect interval when known."""

    def __init__(self, message: str, interval=None):
        super().__init__(message)
        self.interval = interval


class RefineStepsError(Exception):
    """Fixed-step phase integration too coarse to resolve the oscillation."""


class DegenerateCrossingError(Exception):
    """Crossing form has zero eigenvalues and no override was given."""

    def __init__(self, t_star: float, zero_count: int):
        super().__init__(
            f"degenerate crossing at t={t_star!r} with {zero_count} zero "
            f"crossing-form eigenvalue(s); rerun with the degenerate override "
            f"to use the nondegenerate signature"
        )
        self.t_star = t_star
        self.zero_count = zero_count


class IncreaseModeCapError(Exception):
    """Angular mode cap too small for the requested spectral level."""


class ConfigError(ValueError):
    """Experiment configuration failed validation; message names the field."""
