"""Spatio-temporal point pattern analysis with subsampling.

Library layout:

- ``core``        windows, patterns, gridded fields
- ``simulate``    Poisson / cluster generators, Bernoulli thinning
- ``intensity``   kernel and Voronoi intensity estimators
- ``bandwidth``   temporal plug-in and spatial cross-validated selectors
- ``separability``  first-order separability statistics and permutations
- ``secondorder`` space-time inhomogeneous K function and diagnostics
- ``inference``   global envelope (ERL) and quadrat tests
- ``homogenize``  level-set thinning that flattens an inhomogeneous pattern
- ``cli``         file ingestion and pipeline orchestration
"""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    GridSpec,
    PolygonMask,
    RasterMask,
    ScalarField,
    SpaceTimePattern,
    SpatialPattern,
    TemporalPattern,
    Window,
    ball_volume,
    count_in,
    project,
    substream,
)
