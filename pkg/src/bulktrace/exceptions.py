"""Exception types shared across the package."""


class BulkTraceError(Exception):
    """Base class for all package errors."""


class ConfigError(BulkTraceError):
    """Invalid configuration, unsupported option, or malformed input file."""


class GeometryError(BulkTraceError):
    """Mesh or reference-element geometry is unusable (bad Jacobian, bad facet, ...)."""


class DomainValidityError(BulkTraceError):
    """The scalar field violates an admissibility requirement on the bulk domain."""


class ElementInversionError(BulkTraceError):
    """Deformation gradient lost positive orientation at a quadrature point."""


class SolverFailure(BulkTraceError):
    """Nonlinear or linear solve did not produce a usable solution."""
