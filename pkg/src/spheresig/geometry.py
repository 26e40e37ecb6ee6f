"""Core spherical geometry: coordinates, geodesic metric, rotations, tangent frames.

Conventions
-----------
Points on the unit sphere are row vectors ``(x, y, z)`` with unit norm, or
polar coordinates ``(theta, phi)`` where theta is latitude in [-pi/2, pi/2]
and phi is longitude in [-pi, pi].  ``(1, 0, 0)`` corresponds to
``(theta, phi) = (0, 0)``.

All functions accept either a single point of shape (3,) or a batch of
shape (N, 3) and are pure; geometry is always computed in float64.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateDirection

# Pole fallback threshold for tangent frames: |p.z| above this uses the
# projected global x-axis as "north" instead of the z-axis.
POLE_EPS = 1e-6

# Below this geodesic distance (and within it of pi) azimuths are undefined.
DEGENERATE_EPS = 1e-9

GLOBAL_UP = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])


def normalize(p):
    """Return p scaled to unit norm (batched)."""
    p = np.asarray(p, dtype=np.float64)
    n = np.linalg.norm(p, axis=-1, keepdims=True)
    return p / n


def polar_to_cart(theta, phi):
    """(latitude, longitude) -> unit vectors, stacked on the last axis."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    ct = np.cos(theta)
    return np.stack([ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)], axis=-1)


def cart_to_polar(p):
    """Unit vectors -> (theta, phi); phi canonicalized to 0 at the poles."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rxy = np.hypot(x, y)
    theta = np.arctan2(z, rxy)
    phi = np.where(rxy < 1e-15, 0.0, np.arctan2(y, x))
    return theta, phi


def geodesic_distance(p, q):
    """Great-circle angle in [0, pi] between unit vectors p and q.

    Uses atan2(|p x q|, p . q), which stays accurate near 0 and pi where
    arccos of the dot product loses precision.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    cross = np.cross(p, q)
    sin_d = np.linalg.norm(cross, axis=-1)
    cos_d = np.sum(p * q, axis=-1)
    return np.arctan2(sin_d, cos_d)


def rotation_from_axis_angle(axis, angle):
    """Rodrigues rotation matrix about a unit axis."""
    axis = normalize(np.asarray(axis, dtype=np.float64))
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def random_rotation(rng):
    """Uniform random rotation in SO(3) (axis uniform on sphere, QR-free)."""
    # Uniform quaternion -> rotation matrix.
    u1, u2, u3 = rng.random(3)
    a = np.sqrt(1.0 - u1)
    b = np.sqrt(u1)
    q = np.array(
        [
            a * np.sin(2 * np.pi * u2),
            a * np.cos(2 * np.pi * u2),
            b * np.sin(2 * np.pi * u3),
            b * np.cos(2 * np.pi * u3),
        ]
    )
    w, x, y, z = q[3], q[0], q[1], q[2]
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def tangent_frame(p):
    """Right-handed orthonormal (east, north) basis of the tangent plane at p.

    "North" is the projection of the global z-axis onto the tangent plane;
    within POLE_EPS of the poles the global x-axis is projected instead.
    Returns (east, north) with the same batch shape as p.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    x_ref, z_ref = GLOBAL_UP
    near_pole = np.abs(p[:, 2]) > 1.0 - POLE_EPS
    ref = np.where(near_pole[:, None], x_ref, z_ref)
    north = ref - np.sum(ref * p, axis=-1, keepdims=True) * p
    north = normalize(north)
    east = np.cross(north, p)
    if single:
        return east[0], north[0]
    return east, north


def relative_azimuth(origin, pk):
    """Azimuth of pk in the tangent frame at origin, in [-pi, pi].

    Zero points "north" (toward the projected global up), positive turns
    east.  Raises DegenerateDirection for coincident or antipodal points.
    """
    origin = np.asarray(origin, dtype=np.float64)
    pk = np.asarray(pk, dtype=np.float64)
    d = geodesic_distance(origin, pk)
    if np.any(d < DEGENERATE_EPS) or np.any(d > np.pi - DEGENERATE_EPS):
        raise DegenerateDirection("azimuth undefined for coincident/antipodal points")
    east, north = tangent_frame(origin)
    # Log map direction: component of pk orthogonal to origin.
    v = pk - np.sum(pk * origin, axis=-1, keepdims=True) * origin
    return np.arctan2(np.sum(v * east, axis=-1), np.sum(v * north, axis=-1))


def relative_azimuth_edges(origins, targets, distances):
    """Vectorized azimuths for neighbor edges; degenerate edges get 0.

    origins/targets are (E, 3) per-edge arrays; distances the matching
    geodesic distances.  Returns (azimuths, degenerate_mask).
    """
    origins = np.asarray(origins, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    degen = (distances < DEGENERATE_EPS) | (distances > np.pi - DEGENERATE_EPS)
    east, north = tangent_frame(origins)
    east = np.atleast_2d(east)
    north = np.atleast_2d(north)
    v = targets - np.sum(targets * origins, axis=-1, keepdims=True) * origins
    az = np.arctan2(np.sum(v * east, axis=-1), np.sum(v * north, axis=-1))
    az = np.where(degen, 0.0, az)
    return az, degen
