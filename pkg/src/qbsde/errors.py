"""Exception hierarchy shared by all solvers."""


class QbsdeError(Exception):
    """Base class for every error raised by this package."""


class DomainError(QbsdeError, ValueError):
    """A function evaluated to a non-finite value, or an argument is outside its domain."""


class RangeError(QbsdeError, ValueError):
    """A query fell outside a tabulated range.

    ``valid_interval`` holds the admissible interval; callers can use it to
    rebuild with a larger radius.
    """

    def __init__(self, message, valid_interval=None, suggested_radius=None):
        super().__init__(message)
        self.valid_interval = valid_interval
        self.suggested_radius = suggested_radius


class IntegrabilityError(QbsdeError):
    """A conditional expectation does not exist numerically (tail test failed).

    ``assumption`` names the integrability condition that failed, e.g. ``"(A2)"``.
    """

    def __init__(self, message, assumption="(A2)"):
        super().__init__(message)
        self.assumption = assumption


class PreconditionError(QbsdeError, ValueError):
    """An operation was called on inputs violating its documented precondition."""


class StabilityError(QbsdeError):
    """The explicit PDE scheme is (or would be) unstable."""

    def __init__(self, message, suggested_nt=None):
        super().__init__(message)
        self.suggested_nt = suggested_nt


class ConfigError(QbsdeError, ValueError):
    """Invalid experiment configuration or inconsistent solver inputs."""
