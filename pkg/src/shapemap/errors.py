"""Exception types shared across the toolkit."""


class ShapemapError(Exception):
    """Base class for all toolkit errors."""


class DegenerateMesh(ShapemapError):
    """A deformation would invert or collapse at least one triangle."""


class ConnectivityMismatch(ShapemapError):
    """Two meshes that must share connectivity do not."""


class InvalidParameter(ShapemapError):
    """A parameter is outside its admissible range."""


class MissingCoefficient(ShapemapError):
    """A cell marker present in the mesh has no coefficient assigned."""


class UnknownMarker(ShapemapError):
    """A facet or cell marker is not present in the mesh."""


class SingularSystem(ShapemapError):
    """A linear system has no unique solution."""


class NoConvergence(ShapemapError):
    """An iterative solver failed to reach its tolerance."""


class SpaceMismatch(ShapemapError):
    """Two finite-element fields do not live on the same space."""


class MeshMismatch(ShapemapError):
    """Deformations or operators are hosted on different meshes."""


class KindMismatch(ShapemapError):
    """Two model responses are of different kinds."""


class LineSearchFailure(ShapemapError):
    """Backtracking exhausted its step budget without sufficient decrease."""


class ZeroDenominator(ShapemapError):
    """A relative measure has a vanishing reference norm."""


class SkippedUpdate(ShapemapError):
    """A quasi-Newton pair was rejected for near-zero curvature.

    Signaled, not fatal: callers may continue with the unmodified memory.
    """


class ParseError(ShapemapError):
    """A mesh or config file is malformed.  Carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnsupportedElement(ParseError):
    """A mesh file contains an element type outside the supported subset."""


class ConfigError(ShapemapError):
    """A run configuration is invalid or contains unknown keys."""


class BackendTimeout(ShapemapError):
    """The external fine-model responder did not answer within the timeout."""


class ProtocolError(ShapemapError):
    """The external fine-model responder produced a malformed reply."""
