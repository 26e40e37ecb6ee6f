"""Near-uniform spherical point sets: generators, density estimation, FoV filter.

Supported schemes: equirectangular latitude/longitude grids, barycentric
subdivision of platonic solids (tetra/hexa/octa/icosa), HEALPix RING pixel
centers, the Fibonacci lattice, and a plastic-constant quasi-random sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .errors import InvalidScheme, TooFewPoints

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0
# Plastic constant: unique real root of x^3 = x + 1.
PLASTIC = 1.324717957244746025960908854


# ---------------------------------------------------------------------------
# Scheme descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Equirectangular:
    rows: int
    cols: int


@dataclass(frozen=True)
class Polyhedral:
    base: str  # tetra | hexa | octa | icosa
    n_side: int


@dataclass(frozen=True)
class HEALPix:
    n_side: int


@dataclass(frozen=True)
class Fibonacci:
    n: int


@dataclass(frozen=True)
class QuasiRandom:
    n: int


SamplingScheme = Union[Equirectangular, Polyhedral, HEALPix, Fibonacci, QuasiRandom]

_POLY_BASES = ("tetra", "hexa", "octa", "icosa")


@dataclass(frozen=True)
class PointSet:
    """Unit vectors (N, 3) plus the scheme that produced them (or None)."""

    points: np.ndarray
    scheme: SamplingScheme | None = None

    def __len__(self):
        return self.points.shape[0]


def _validate(scheme: SamplingScheme):
    if isinstance(scheme, Equirectangular):
        if scheme.rows < 1 or scheme.cols < 1:
            raise InvalidScheme(f"equirectangular grid must be positive: {scheme}")
    elif isinstance(scheme, Polyhedral):
        if scheme.base not in _POLY_BASES:
            raise InvalidScheme(f"unknown base polyhedron {scheme.base!r}")
        if scheme.n_side < 1:
            raise InvalidScheme("n_side must be >= 1")
    elif isinstance(scheme, HEALPix):
        n = scheme.n_side
        if n < 1 or (n & (n - 1)) != 0:
            raise InvalidScheme(f"HEALPix n_side must be a positive power of two, got {n}")
    elif isinstance(scheme, (Fibonacci, QuasiRandom)):
        if scheme.n < 1:
            raise InvalidScheme("point count must be >= 1")
    else:
        raise InvalidScheme(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# Base polyhedra
# ---------------------------------------------------------------------------


def _base_polyhedron(name):
    """Vertices and faces (lists of vertex indices) of the base solid."""
    if name == "tetra":
        v = np.array(
            [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64
        )
        f = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]]
    elif name == "hexa":
        v = np.array(
            [
                [-1, -1, -1],
                [1, -1, -1],
                [1, 1, -1],
                [-1, 1, -1],
                [-1, -1, 1],
                [1, -1, 1],
                [1, 1, 1],
                [-1, 1, 1],
            ],
            dtype=np.float64,
        )
        f = [
            [0, 1, 2, 3],
            [4, 5, 6, 7],
            [0, 1, 5, 4],
            [2, 3, 7, 6],
            [1, 2, 6, 5],
            [0, 3, 7, 4],
        ]
    elif name == "octa":
        v = np.array(
            [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
            dtype=np.float64,
        )
        f = [
            [0, 2, 4],
            [0, 2, 5],
            [0, 3, 4],
            [0, 3, 5],
            [1, 2, 4],
            [1, 2, 5],
            [1, 3, 4],
            [1, 3, 5],
        ]
    elif name == "icosa":
        g = GOLDEN_RATIO
        v = np.array(
            [
                [-1, g, 0],
                [1, g, 0],
                [-1, -g, 0],
                [1, -g, 0],
                [0, -1, g],
                [0, 1, g],
                [0, -1, -g],
                [0, 1, -g],
                [g, 0, -1],
                [g, 0, 1],
                [-g, 0, -1],
                [-g, 0, 1],
            ],
            dtype=np.float64,
        )
        f = [
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ]
    else:  # pragma: no cover - guarded by _validate
        raise InvalidScheme(name)
    return geometry.normalize(v), f


def _integer_compositions(total, parts):
    """All nonnegative integer tuples of given length summing to total."""
    if parts == 1:
        return [(total,)]
    out = []
    for head in range(total + 1):
        for tail in _integer_compositions(total - head, parts - 1):
            out.append((head,) + tail)
    return out


def _dedup(points, tol=1e-9):
    """Merge points closer than ~tol (chord); keeps first occurrence order."""
    rounded = np.round(points / tol).astype(np.int64)
    _, idx = np.unique(rounded, axis=0, return_index=True)
    return points[np.sort(idx)]


def _polyhedral_points(base, n_side):
    verts, faces = _base_polyhedron(base)
    pts = []
    for face in faces:
        fv = verts[list(face)]
        combos = np.array(_integer_compositions(n_side, len(face)), dtype=np.float64)
        p = (combos / n_side) @ fv
        norms = np.linalg.norm(p, axis=1)
        p = p[norms > 1e-12] / norms[norms > 1e-12, None]
        pts.append(p)
    return _dedup(np.vstack(pts))


def _healpix_ring_points(n_side):
    """RING-scheme pixel centers, north to south."""
    z_list = []
    phi_list = []
    # North polar cap: rings i = 1 .. n_side - 1 with 4i pixels.
    for i in range(1, n_side):
        j = np.arange(1, 4 * i + 1)
        z_list.append(np.full(4 * i, 1.0 - i * i / (3.0 * n_side * n_side)))
        phi_list.append(np.pi / (2.0 * i) * (j - 0.5))
    # Equatorial belt: rings i = n_side .. 3 n_side with 4 n_side pixels.
    for i in range(n_side, 3 * n_side + 1):
        j = np.arange(1, 4 * n_side + 1)
        s = (i - n_side + 1) % 2
        z_list.append(np.full(4 * n_side, 4.0 / 3.0 - 2.0 * i / (3.0 * n_side)))
        phi_list.append(np.pi / (2.0 * n_side) * (j - s / 2.0))
    # South polar cap mirrors the north cap.
    for i in range(n_side - 1, 0, -1):
        j = np.arange(1, 4 * i + 1)
        z_list.append(np.full(4 * i, -(1.0 - i * i / (3.0 * n_side * n_side))))
        phi_list.append(np.pi / (2.0 * i) * (j - 0.5))
    z = np.concatenate(z_list)
    phi = np.mod(np.concatenate(phi_list), 2.0 * np.pi)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def _fibonacci_points(n):
    i = np.arange(n, dtype=np.float64)
    polar = np.arccos(np.clip(1.0 - 2.0 * i / n, -1.0, 1.0))
    az = 2.0 * np.pi * i / GOLDEN_RATIO
    sp = np.sin(polar)
    return np.stack([sp * np.cos(az), sp * np.sin(az), np.cos(polar)], axis=-1)


def _quasi_random_points(n):
    i = np.arange(n, dtype=np.float64)
    u = np.mod(0.5 + i / PLASTIC, 1.0)
    v = np.mod(0.5 + i / PLASTIC**2, 1.0)
    z = 1.0 - 2.0 * u
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = 2.0 * np.pi * v
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def _equirectangular_points(rows, cols):
    theta = -np.pi / 2.0 + np.pi * (np.arange(rows) + 0.5) / rows
    phi = -np.pi + 2.0 * np.pi * (np.arange(cols) + 0.5) / cols
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    return geometry.polar_to_cart(tt.ravel(), pp.ravel())


def generate_locations(scheme: SamplingScheme) -> PointSet:
    """Generate the point set for a scheme; deterministic per parameters."""
    _validate(scheme)
    if isinstance(scheme, Equirectangular):
        pts = _equirectangular_points(scheme.rows, scheme.cols)
    elif isinstance(scheme, Polyhedral):
        pts = _polyhedral_points(scheme.base, scheme.n_side)
    elif isinstance(scheme, HEALPix):
        pts = _healpix_ring_points(scheme.n_side)
    elif isinstance(scheme, Fibonacci):
        pts = _fibonacci_points(scheme.n)
    else:
        pts = _quasi_random_points(scheme.n)
    return PointSet(points=pts, scheme=scheme)


def point_count(scheme: SamplingScheme) -> int:
    """Number of points a scheme generates (closed-form where available)."""
    _validate(scheme)
    if isinstance(scheme, Equirectangular):
        return scheme.rows * scheme.cols
    if isinstance(scheme, HEALPix):
        return 12 * scheme.n_side**2
    if isinstance(scheme, (Fibonacci, QuasiRandom)):
        return scheme.n
    n = scheme.n_side
    if scheme.base == "icosa":
        return 10 * n * n + 2
    if scheme.base == "octa":
        return 4 * n * n + 2
    if scheme.base == "tetra":
        return 2 * n * n + 2
    # hexa: cube subdivision with coincident barycenters; count empirically.
    return len(_polyhedral_points("hexa", n))


# ---------------------------------------------------------------------------
# Density estimation, matching, FoV filtering
# ---------------------------------------------------------------------------


def uniform_sphere(n, rng):
    """n points uniform on the sphere."""
    v = rng.standard_normal((n, 3))
    return geometry.normalize(v)


def estimate_mean_pixel_area(ps: PointSet, probes: int, seed: int = 0) -> float:
    """Mean Voronoi cell area (steradians) of the lower 75% quantile of cells.

    Cell areas are estimated by Monte-Carlo assignment of uniform probes to
    their nearest point; robust to tiny outlier cells at image boundaries.
    """
    n = len(ps)
    if n < 4:
        raise TooFewPoints(f"need >= 4 points, got {n}")
    if probes < 10 * n:
        raise TooFewPoints(f"need >= {10 * n} probes for {n} points")
    rng = np.random.default_rng(seed)
    tree = cKDTree(ps.points)
    counts = np.zeros(n, dtype=np.int64)
    # Chunked to bound memory at large probe counts.
    remaining = probes
    while remaining > 0:
        chunk = min(remaining, 1_000_000)
        _, idx = tree.query(uniform_sphere(chunk, rng), k=1)
        counts += np.bincount(idx, minlength=n)
        remaining -= chunk
    areas = np.sort(counts * (4.0 * np.pi / probes))
    keep = int(np.ceil(0.75 * n))
    return float(np.mean(areas[:keep]))


def _candidate_schemes(family: SamplingScheme, max_points: int):
    """Admissible parameterizations of a scheme family, ordered by count."""
    out = []
    if isinstance(family, (Fibonacci, QuasiRandom)):
        return None  # continuous in N; handled directly
    if isinstance(family, HEALPix):
        n = 1
        while 12 * n * n <= max_points:
            out.append(replace(family, n_side=n))
            n *= 2
    elif isinstance(family, Polyhedral):
        n = 1
        while True:
            s = replace(family, n_side=n)
            if point_count(s) > max_points and n > 1:
                break
            out.append(s)
            n += 1
    elif isinstance(family, Equirectangular):
        r = 1
        while 2 * r * r <= max_points or r == 1:
            out.append(Equirectangular(rows=r, cols=2 * r))
            r += 1
    return out


def match_density(family: SamplingScheme, reference: PointSet, probes: int | None = None,
                  seed: int = 0, target_area: float | None = None) -> SamplingScheme:
    """Pick scheme parameters whose full-sphere count best matches a density.

    The target is the reference set's mean pixel area (or ``target_area``
    directly); for quantized families the admissible parameter minimizing
    |4pi/N - target| wins.
    """
    if target_area is None:
        if len(reference) == 0:
            raise TooFewPoints("empty reference")
        if probes is None:
            probes = max(10 * len(reference), 100_000)
        target_area = estimate_mean_pixel_area(reference, probes, seed=seed)
    target_n = 4.0 * np.pi / target_area
    if isinstance(family, (Fibonacci, QuasiRandom)):
        return replace(family, n=max(1, int(round(target_n))))
    candidates = _candidate_schemes(family, max_points=int(target_n * 4) + 16)
    best = min(
        candidates,
        key=lambda s: abs(4.0 * np.pi / point_count(s) - target_area),
    )
    return best


def mean_nn_distance(ps: PointSet) -> float:
    """Mean geodesic distance from each point to its nearest other point."""
    if len(ps) < 2:
        raise TooFewPoints("need >= 2 points")
    tree = cKDTree(ps.points)
    chord, _ = tree.query(ps.points, k=2)
    nearest_chord = np.clip(chord[:, 1], 0.0, 2.0)
    return float(np.mean(2.0 * np.arcsin(nearest_chord / 2.0)))


def nn_distance_cv(ps: PointSet) -> float:
    """Coefficient of variation of nearest-neighbor distances (uniformity proxy)."""
    tree = cKDTree(ps.points)
    chord, _ = tree.query(ps.points, k=2)
    d = 2.0 * np.arcsin(np.clip(chord[:, 1], 0.0, 2.0) / 2.0)
    return float(np.std(d) / np.mean(d))


def fov_filter(candidates: PointSet, reference: PointSet) -> PointSet:
    """Keep candidates within 2x the reference's mean NN distance of it."""
    t = 2.0 * mean_nn_distance(reference)
    mask = fov_mask(candidates, reference, threshold=t)
    return PointSet(points=candidates.points[mask], scheme=candidates.scheme)


def fov_mask(candidates: PointSet, reference: PointSet, threshold: float | None = None):
    """Boolean mask of candidates within the reference FoV threshold."""
    if threshold is None:
        threshold = 2.0 * mean_nn_distance(reference)
    tree = cKDTree(reference.points)
    chord, _ = tree.query(candidates.points, k=1)
    d = 2.0 * np.arcsin(np.clip(chord, 0.0, 2.0) / 2.0)
    return d <= threshold
