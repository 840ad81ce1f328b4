"""Conformalized high-density quantile regression over learnable Voronoi prototypes."""

__version__ = "0.1.0"

from .errors import ChdqrError, ConfigError, DataError, DegenerateTessellationError, NumericalError  # noqa: E402

__all__ = ["__version__", "ChdqrError", "ConfigError", "DataError", "NumericalError",
           "DegenerateTessellationError"]
