"""Lens-agnostic spherical image processing.

Project calibrated camera images onto the unit sphere, resample them on
near-uniform point sets, and run rotation-equivariant convolution, pooling,
and detection geometry directly on the sphere.
"""

from . import (
    detect,
    formats,
    geometry,
    harmonics,
    interp,
    learn,
    lens,
    neighbors,
    ops,
    sampling,
)
from .errors import SphereSigError
from .lens import RayMap, SphericalImage
from .neighbors import Cap, KNearest, NeighborGraph
from .sampling import (
    Equirectangular,
    Fibonacci,
    HEALPix,
    PointSet,
    Polyhedral,
    QuasiRandom,
)

__version__ = "0.1.0"

__all__ = [
    "Cap",
    "Equirectangular",
    "Fibonacci",
    "HEALPix",
    "KNearest",
    "NeighborGraph",
    "PointSet",
    "Polyhedral",
    "QuasiRandom",
    "RayMap",
    "SphereSigError",
    "SphericalImage",
    "detect",
    "formats",
    "geometry",
    "harmonics",
    "interp",
    "learn",
    "lens",
    "neighbors",
    "ops",
    "sampling",
]
