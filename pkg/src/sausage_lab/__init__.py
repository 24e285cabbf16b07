"""Monte Carlo and numerical tools for Brownian motion among Poissonian
obstacles: survival estimators, Wiener sausage volumes, Dirichlet spectra,
capacities and the coarse-graining of obstacle fields."""

__version__ = "0.1.0"

from .constants import (  # noqa: E402
    Constants,
    lambda_ball,
    optimal_radius,
    rate_function,
    unit_ball_volume,
    variational_constant,
)
from .obstacles import Box, ObstacleField, ObstacleGeometry, sample_field  # noqa: E402

__all__ = [
    "__version__",
    "Box",
    "Constants",
    "ObstacleField",
    "ObstacleGeometry",
    "lambda_ball",
    "optimal_radius",
    "rate_function",
    "sample_field",
    "unit_ball_volume",
    "variational_constant",
]
