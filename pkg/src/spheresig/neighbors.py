"""Geodesic neighbor queries and the cached CSR neighbor graph.

Every resampling / convolution / pooling layer consumes a NeighborGraph:
for each output point, the input points inside its geodesic cap (or its k
nearest inputs), with precomputed distances and tangent-plane azimuths.
Edge order is (distance ascending, input index ascending) so graphs are
byte-for-byte reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .errors import EmptyInput
from .sampling import PointSet


@dataclass(frozen=True)
class KNearest:
    k: int


@dataclass(frozen=True)
class Cap:
    radius: float  # radians, in (0, pi)


NeighborhoodSpec = Union[KNearest, Cap]


@dataclass
class NeighborGraph:
    """CSR adjacency from output points to input points."""

    offsets: np.ndarray  # (n_outputs + 1,) int64
    indices: np.ndarray  # (n_edges,) int64 input ids
    distances: np.ndarray  # (n_edges,) float64 radians
    azimuths: np.ndarray  # (n_edges,) float64 in [-pi, pi]
    degenerate: np.ndarray  # (n_edges,) bool, True where azimuth undefined

    @property
    def n_outputs(self):
        return self.offsets.shape[0] - 1

    @property
    def n_edges(self):
        return self.indices.shape[0]

    def degrees(self):
        return np.diff(self.offsets)

    def edge_outputs(self):
        """Output id of every edge (expanded CSR rows)."""
        return np.repeat(np.arange(self.n_outputs), self.degrees())


def _chord_to_geodesic(chord):
    return 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))


def _assemble(inputs, outputs, per_output_ids):
    """Sort each adjacency list by (distance, index) and pack into CSR."""
    counts = np.array([len(ids) for ids in per_output_ids], dtype=np.int64)
    offsets = np.zeros(len(per_output_ids) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    indices = np.empty(offsets[-1], dtype=np.int64)
    distances = np.empty(offsets[-1], dtype=np.float64)
    for o, ids in enumerate(per_output_ids):
        if len(ids) == 0:
            continue
        ids = np.asarray(ids, dtype=np.int64)
        d = geometry.geodesic_distance(outputs[o], inputs[ids])
        order = np.lexsort((ids, d))
        indices[offsets[o]:offsets[o + 1]] = ids[order]
        distances[offsets[o]:offsets[o + 1]] = d[order]
    edge_out = np.repeat(np.arange(len(per_output_ids)), counts)
    # Chunked so the (E, 3) azimuth intermediates stay bounded at large E.
    azimuths = np.empty(offsets[-1], dtype=np.float64)
    degen = np.empty(offsets[-1], dtype=bool)
    chunk = 1_000_000
    for lo in range(0, int(offsets[-1]), chunk):
        hi = min(lo + chunk, int(offsets[-1]))
        az, dg = geometry.relative_azimuth_edges(
            outputs[edge_out[lo:hi]], inputs[indices[lo:hi]], distances[lo:hi]
        )
        azimuths[lo:hi] = az
        degen[lo:hi] = dg
    return NeighborGraph(
        offsets=offsets,
        indices=indices,
        distances=distances,
        azimuths=azimuths,
        degenerate=degen,
    )


def build_neighbor_graph(
    inputs: PointSet, outputs: PointSet, spec: NeighborhoodSpec
) -> NeighborGraph:
    """Exact neighbor graph via a KD-tree on the embedding space.

    Chord distance is monotone in geodesic distance, so Euclidean queries
    return exactly the geodesic neighbor sets.  k > |inputs| clamps.
    """
    if len(inputs) == 0:
        raise EmptyInput("no input points")
    ip = np.asarray(inputs.points, dtype=np.float64)
    op = np.asarray(outputs.points, dtype=np.float64)
    if op.shape[0] == 0:
        return _assemble(ip, op, [])
    tree = cKDTree(ip)
    if isinstance(spec, Cap):
        # Query with slack so fp rounding can never drop a boundary point;
        # exactness is restored by the geodesic re-check below.
        chord = 2.0 * np.sin(min(spec.radius + 1e-9, np.pi) / 2.0)
        lists = tree.query_ball_point(op, chord)
        per_output = []
        for o, ids in enumerate(lists):
            ids = np.asarray(ids, dtype=np.int64)
            if ids.size:
                d = geometry.geodesic_distance(op[o], ip[ids])
                ids = ids[d <= spec.radius + 1e-12]
            per_output.append(ids)
    else:
        k = min(spec.k, ip.shape[0])
        dist, idx = tree.query(op, k=k)
        dist = np.atleast_2d(dist.reshape(op.shape[0], k))
        idx = np.atleast_2d(idx.reshape(op.shape[0], k))
        per_output = []
        for o in range(op.shape[0]):
            ids = idx[o]
            # Tie handling at the k-th boundary: re-query by the k-th radius
            # and keep the lowest-index candidates deterministically.
            kth = dist[o, -1]
            cand = np.asarray(
                tree.query_ball_point(op[o], kth * (1.0 + 1e-9) + 1e-12),
                dtype=np.int64,
            )
            if cand.size > k:
                dd = np.linalg.norm(ip[cand] - op[o], axis=1)
                order = np.lexsort((cand, dd))
                ids = cand[order][:k]
            per_output.append(np.asarray(ids, dtype=np.int64))
    return _assemble(ip, op, per_output)


def brute_force_neighbors(
    inputs: PointSet, outputs: PointSet, spec: NeighborhoodSpec
) -> NeighborGraph:
    """O(|inputs| * |outputs|) exhaustive scan; the correctness oracle."""
    if len(inputs) == 0:
        raise EmptyInput("no input points")
    ip = np.asarray(inputs.points, dtype=np.float64)
    op = np.asarray(outputs.points, dtype=np.float64)
    per_output = []
    for o in range(op.shape[0]):
        d = geometry.geodesic_distance(op[o], ip)
        if isinstance(spec, Cap):
            ids = np.nonzero(d <= spec.radius + 1e-12)[0]
        else:
            k = min(spec.k, ip.shape[0])
            order = np.lexsort((np.arange(ip.shape[0]), d))
            ids = np.sort(order[:k])
        per_output.append(ids.astype(np.int64))
    return _assemble(ip, op, per_output)


def graphs_equal(a: NeighborGraph, b: NeighborGraph) -> bool:
    return (
        np.array_equal(a.offsets, b.offsets)
        and np.array_equal(a.indices, b.indices)
        and np.allclose(a.distances, b.distances, atol=1e-12)
        and np.allclose(a.azimuths, b.azimuths, atol=1e-12)
        and np.array_equal(a.degenerate, b.degenerate)
    )


def content_key(inputs: PointSet, outputs: PointSet, spec: NeighborhoodSpec) -> str:
    """Stable hash of (inputs, outputs, spec) for graph cache filenames."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(inputs.points, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(outputs.points, dtype=np.float64).tobytes())
    if isinstance(spec, Cap):
        h.update(b"cap" + np.float64(spec.radius).tobytes())
    else:
        h.update(b"knn" + np.int64(spec.k).tobytes())
    return h.hexdigest()[:32]
