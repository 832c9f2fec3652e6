"""Exception hierarchy shared by all sonoarm modules."""


class SonoarmError(Exception):
    """Base class for every error raised by this package."""


class DomainError(SonoarmError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class DegenerateInputError(SonoarmError, ValueError):
    """Geometrically degenerate input (collinear points, parallel axes, ...)."""


class EmptyInputError(SonoarmError, ValueError):
    """An operation that needs data received none."""


class ParameterError(SonoarmError, ValueError):
    """A configuration or tuning parameter is invalid for the given data."""


class NoConsensusError(SonoarmError, RuntimeError):
    """RANSAC could not reach the requested inlier fraction."""


class RegistrationError(SonoarmError, RuntimeError):
    """ICP failed to find usable correspondences."""


class OffSurfaceError(SonoarmError, ValueError):
    """A query point is too far from the surface cloud to project."""


class SurfaceGapError(SonoarmError, RuntimeError):
    """Path finding stepped off the anatomy (nearest point too far away)."""


class ConfigurationError(SonoarmError, ValueError):
    """A joint configuration violates the robot model limits."""


class SingularityError(SonoarmError, RuntimeError):
    """The Jacobian is rank deficient at the queried configuration."""


class InputError(SonoarmError, ValueError):
    """Caller-supplied data fails a precondition (bad key points, normals, ...)."""


class PlanningError(SonoarmError, RuntimeError):
    """A scan pattern could not be turned into a path plan."""


class ProtocolError(SonoarmError, RuntimeError):
    """Malformed frame, bad checksum, or a corrupt session log."""


class IllegalTransitionError(SonoarmError, RuntimeError):
    """Session event not legal in the current phase; state is unchanged."""

    def __init__(self, phase, event):
        super().__init__(f"event {event!r} not allowed in phase {phase!r}")
        self.phase = phase
        self.event = event
