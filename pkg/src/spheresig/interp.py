"""Value interpolation at new spherical locations, and rotate-then-resample.

Weights come from a radial basis function of geodesic distance, normalized
to sum to 1 per output (partition of unity), so constant signals are
preserved exactly and the weighting is rotationally symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import sampling
from .errors import GraphMismatch
from .lens import SphericalImage
from .neighbors import Cap, KNearest, NeighborGraph, NeighborhoodSpec, build_neighbor_graph
from .sampling import PointSet


@dataclass(frozen=True)
class Softmax:
    temperature: float  # > 0, controls sharpness


@dataclass(frozen=True)
class Gaussian:
    sigma: float  # > 0


@dataclass(frozen=True)
class Hann:
    support: float  # > 0; weight reaches 0 at d = support


@dataclass(frozen=True)
class WendlandC2:
    support: float  # > 0; weight reaches 0 at d = support


@dataclass(frozen=True)
class NearestExact:
    """Copy the single closest neighbor's value (discrete labels)."""


RbfKernel = Union[Softmax, Gaussian, Hann, WendlandC2, NearestExact]


def rbf_weight(kernel: RbfKernel, d) -> np.ndarray:
    """Unnormalized weight for geodesic distance(s) d >= 0.

    Hann and Wendland-C2 normalize d by their support radius and clamp to
    zero beyond it; Softmax/Gaussian act on the raw distance.
    """
    d = np.asarray(d, dtype=np.float64)
    if isinstance(kernel, Softmax):
        return np.exp(-d / kernel.temperature)
    if isinstance(kernel, Gaussian):
        return np.exp(-(d * d) / (2.0 * kernel.sigma**2))
    if isinstance(kernel, Hann):
        dn = np.clip(d / kernel.support, 0.0, 1.0)
        return np.where(dn < 1.0, 0.5 * (1.0 + np.cos(np.pi * dn)), 0.0)
    if isinstance(kernel, WendlandC2):
        dn = np.clip(d / kernel.support, 0.0, 1.0)
        return np.where(dn < 1.0, (1.0 - dn) ** 4 * (1.0 + 4.0 * dn), 0.0)
    if isinstance(kernel, NearestExact):
        # Degenerate kernel: selection handled in interpolate().
        return np.where(d == 0.0, 1.0, 0.0)
    raise TypeError(f"unknown kernel {kernel!r}")


def default_kernel(src_locations: np.ndarray) -> Gaussian:
    """Gaussian with sigma = mean nearest-neighbor spacing of the source."""
    spacing = sampling.mean_nn_distance(PointSet(points=src_locations))
    return Gaussian(sigma=spacing)


def interpolate(src: SphericalImage, graph: NeighborGraph, kernel: RbfKernel):
    """Weighted neighborhood average of src values at the graph's outputs.

    Returns (values, empty_mask): outputs with empty neighborhoods get NaN
    and are reported in the mask.  The graph must have been built with
    src.locations as inputs.
    """
    if graph.n_edges and int(graph.indices.max()) >= src.n_points:
        raise GraphMismatch("graph indices exceed source point count")
    n_out = graph.n_outputs
    values = np.full((n_out, src.channels), np.nan, dtype=np.float64)
    deg = graph.degrees()
    empty = deg == 0
    if graph.n_edges == 0:
        return values, empty
    edge_out = graph.edge_outputs()

    if isinstance(kernel, NearestExact):
        # Edges are sorted by distance per output: the first edge wins.
        first = graph.offsets[:-1][~empty]
        values[~empty] = src.values[graph.indices[first]]
        return values, empty

    w = rbf_weight(kernel, graph.distances)
    wsum = np.bincount(edge_out, weights=w, minlength=n_out)
    # Guard all-zero weight sums (e.g. all neighbors at the support edge).
    degenerate_sum = (wsum <= 0) & (~empty)
    if np.any(degenerate_sum):
        w = w + np.where(degenerate_sum[edge_out], 1.0, 0.0)
        wsum = np.bincount(edge_out, weights=w, minlength=n_out)
    wn = w / wsum[edge_out]
    contrib = wn[:, None] * src.values[graph.indices]
    acc = np.stack(
        [
            np.bincount(edge_out, weights=contrib[:, c], minlength=n_out)
            for c in range(src.channels)
        ],
        axis=-1,
    )
    values[~empty] = acc[~empty]
    return values, empty


def resample(
    src: SphericalImage,
    targets: PointSet,
    kernel: RbfKernel | None = None,
    spec: NeighborhoodSpec | None = None,
    fill=np.nan,
) -> SphericalImage:
    """Interpolate src onto target locations (graph built internally)."""
    srcset = PointSet(points=src.locations)
    if kernel is None:
        kernel = default_kernel(src.locations)
    if spec is None:
        spec = KNearest(k=min(4, src.n_points))
    graph = build_neighbor_graph(srcset, targets, spec)
    values, empty = interpolate(src, graph, kernel)
    if not np.isnan(fill):
        values[empty] = fill
    return SphericalImage(locations=np.asarray(targets.points), values=values)


def rotate_spherical_image(
    src: SphericalImage,
    rotation: np.ndarray,
    kernel: RbfKernel | None = None,
    spec: NeighborhoodSpec | None = None,
    fill=0.0,
) -> SphericalImage:
    """Rotate content, then resample back onto the canonical locations.

    Output locations equal src.locations; values are interpolated from the
    rotated point set.  Canonical points that fall outside the rotated
    coverage (partial-sphere inputs) receive `fill`.
    """
    rotated = PointSet(points=src.locations @ np.asarray(rotation).T)
    moved = SphericalImage(locations=rotated.points, values=src.values)
    canonical = PointSet(points=src.locations)
    if kernel is None:
        kernel = default_kernel(src.locations)
    if spec is None:
        spec = KNearest(k=min(4, src.n_points))
    graph = build_neighbor_graph(rotated, canonical, spec)
    values, empty = interpolate(moved, graph, kernel)
    # FoV filter: canonical points too far from any rotated source point are
    # outside the rotated coverage.
    if src.n_points >= 2:
        inside = sampling.fov_mask(canonical, rotated)
        values[~inside] = fill
    values[empty] = fill
    return SphericalImage(locations=src.locations.copy(), values=values)
