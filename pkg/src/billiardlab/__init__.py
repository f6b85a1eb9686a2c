"""Numerical laboratory for open dispersing billiards and their derivative cocycles."""

from .errors import BilliardError
from .geometry import ConvexObstacle, ObstacleConfiguration, reference_configuration

__version__ = "0.1.0"

__all__ = ["BilliardError", "ConvexObstacle", "ObstacleConfiguration", "reference_configuration", "__version__"]
