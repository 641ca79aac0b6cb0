"""Kronecker-factored curvature for bilevel optimization hypergradients."""

from importlib.metadata import PackageNotFoundError, version as _version

from .errors import (
    ConfigError,
    FormatError,
    InnerLoopError,
    KfacBoError,
    ShapeError,
    SolverError,
    StaleTraceError,
)

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source checkout
    __version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FormatError",
    "InnerLoopError",
    "KfacBoError",
    "ShapeError",
    "SolverError",
    "StaleTraceError",
    "__version__",
]
