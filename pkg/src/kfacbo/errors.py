"""Exception hierarchy shared across the package."""


class KfacBoError(Exception):
    """Base class for all errors raised by kfacbo."""


class ShapeError(KfacBoError, ValueError):
    """Array dimensions do not fit together."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class StaleTraceError(KfacBoError):
    """A forward trace was used after the network weights changed."""


class SolverError(KfacBoError):
    """A linear solve failed (indefinite operator, singular system, ...)."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration


class InnerLoopError(KfacBoError):
    """The inner optimizer produced a non-finite loss."""

    def __init__(self, message, theta=None, step=None):
        super().__init__(message)
        self.theta = theta
        self.step = step


class ConfigError(KfacBoError, ValueError):
    """Invalid experiment configuration; names the offending key."""

    def __init__(self, key, constraint):
        super().__init__(f"{key}: {constraint}")
        self.key = key
        self.constraint = constraint


class FormatError(KfacBoError, ValueError):
    """Malformed binary file (bad magic, truncated payload, count mismatch)."""
