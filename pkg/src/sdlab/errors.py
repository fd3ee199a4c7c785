"""Exception taxonomy shared across the package.

Configuration problems (bad keys, unsupported names, mismatched fingerprints)
and validation problems (out-of-range values, shape mismatches) both map to
CLI exit code 2; numerical trouble maps to exit code 3.
"""


class ConfigurationError(ValueError):
    """A config value names something that does not exist or cannot be wired."""


class ValidationError(ValueError):
    """A runtime argument violates a documented precondition."""


class NumericalAbort(RuntimeError):
    """Optimization produced a non-finite quantity and cannot continue.

    Carries the last finite state so callers can persist it for post-mortems.
    """

    def __init__(self, message, last_state=None, step=None):
        super().__init__(message)
        self.last_state = last_state
        self.step = step
