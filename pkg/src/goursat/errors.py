"""Exception types raised by the toolkit."""


class GoursatError(Exception):
    """Base class for all toolkit errors."""


class GeometryError(GoursatError):
    pass


class NonMonotoneBoundary(GeometryError):
    pass


class DisconnectedCurve(GeometryError):
    pass


class OutsideDomain(GeometryError):
    pass


class AtVertex(GeometryError):
    pass


class NotOnBoundary(GeometryError):
    pass


class DimensionMismatch(GoursatError):
    pass


class SolverError(GoursatError):
    pass


class NoConvergence(SolverError):
    pass


class NaNEncountered(SolverError):
    pass


class ContractionViolated(SolverError):
    pass


class TargetOnVertexLine(SolverError):
    pass


class MissingVertexLimit(SolverError):
    pass


class OnForeignVertexLine(SolverError):
    pass


class ZoneOrderViolation(SolverError):
    pass


class LineSearchFailed(SolverError):
    pass


class DiskOutsideRegularPart(SolverError):
    pass


class CompatibilityViolated(GoursatError):
    pass


class DepthNonPositive(GoursatError):
    pass


class ConfigInvalid(GoursatError):
    pass
