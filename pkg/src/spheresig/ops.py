"""Spherical convolution and pooling with factorized distance x direction weighting.

Each output feature is the average of neighbor features, modulated by a
learned function of the edge's geodesic distance (and optionally its
tangent-plane azimuth).  Weighting functions are either piecewise-constant
tables over uniform bins or small MLPs on Fourier-embedded measurements.
Distance-only kernels are rotation-equivariant by construction; adding a
direction factor makes the kernel gauge-dependent and breaks equivariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
import scipy.sparse as sp

from . import sampling
from .errors import InvalidFactor, RadiusExceeded, ShapeMismatch
from .lens import SphericalImage
from .neighbors import NeighborGraph
from .sampling import PointSet

# ---------------------------------------------------------------------------
# Weighting-function descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PwcDistance:
    bins: int


@dataclass(frozen=True)
class PwcDistanceDirection:
    dist_bins: int
    dir_bins: int


@dataclass(frozen=True)
class MlpDistance:
    hidden: tuple
    fourier_levels: int = 0


@dataclass(frozen=True)
class MlpDistanceDirection:
    hidden: tuple
    fourier_levels: int = 0


WeightFn = Union[PwcDistance, PwcDistanceDirection, MlpDistance, MlpDistanceDirection]


@dataclass(frozen=True)
class KernelSpec:
    radius: float  # cap radius, radians
    weight_fn: WeightFn
    in_channels: int
    out_channels: int


@dataclass
class WeightTable:
    """Parameters of one spherical conv layer.

    PWC: ``table`` is (C_out, C_in, B_d) or (C_out, C_in, B_d, B_a).
    MLP: ``layers`` is a list of (W, b) pairs, tanh between hidden layers,
    final output reshaped to (C_out, C_in).  ``bias`` is per output channel.
    """

    bias: np.ndarray
    table: np.ndarray | None = None
    layers: list = field(default_factory=list)


def init_weight_table(spec: KernelSpec, rng, scale: float | None = None) -> WeightTable:
    """He-style random initialization for a kernel spec."""
    fn = spec.weight_fn
    co, ci = spec.out_channels, spec.in_channels
    if scale is None:
        scale = float(np.sqrt(2.0 / max(ci, 1)))
    bias = np.zeros(co, dtype=np.float64)
    if isinstance(fn, PwcDistance):
        return WeightTable(bias=bias, table=rng.normal(0.0, scale, size=(co, ci, fn.bins)))
    if isinstance(fn, PwcDistanceDirection):
        return WeightTable(
            bias=bias,
            table=rng.normal(0.0, scale, size=(co, ci, fn.dist_bins, fn.dir_bins)),
        )
    dims = [_mlp_input_dim(fn)] + list(fn.hidden) + [co * ci]
    layers = []
    for a, b in zip(dims[:-1], dims[1:]):
        layers.append(
            (rng.normal(0.0, np.sqrt(1.0 / a), size=(a, b)), np.zeros(b, dtype=np.float64))
        )
    return WeightTable(bias=bias, layers=layers)


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------


def fourier_embed(value, levels: int) -> np.ndarray:
    """[sin(2^j pi v), cos(2^j pi v)] for j = 0..levels-1, stacked per level.

    Periodic in v with period 2, so wrapped azimuths (-1 and +1) embed
    identically.
    """
    v = np.asarray(value, dtype=np.float64)
    freqs = (2.0 ** np.arange(levels)) * np.pi
    ang = v[..., None] * freqs
    out = np.empty(v.shape + (2 * levels,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _mlp_input_dim(fn) -> int:
    per = 2 * fn.fourier_levels if fn.fourier_levels > 0 else 1
    if isinstance(fn, MlpDistanceDirection):
        return 2 * per
    return per


def measure_and_bin(graph: NeighborGraph, spec: KernelSpec):
    """Normalized per-edge measurements and PWC bin indices.

    Returns a dict with d_norm in [0, 1], a_norm in [-1, 1], and (for PWC
    weight functions) dist_bin / dir_bin index arrays.  Distance exactly at
    the radius clamps into the last bin; direction bins uniformly partition
    [-pi, pi) starting at -pi.
    """
    if graph.n_edges and float(graph.distances.max()) > spec.radius + 1e-9:
        raise RadiusExceeded(
            f"edge distance {graph.distances.max():.6g} exceeds radius {spec.radius:.6g}"
        )
    d_norm = np.clip(graph.distances / spec.radius, 0.0, 1.0)
    a_norm = graph.azimuths / np.pi
    out = {"d_norm": d_norm, "a_norm": a_norm, "dist_bin": None, "dir_bin": None}
    fn = spec.weight_fn
    if isinstance(fn, PwcDistance):
        out["dist_bin"] = np.minimum((d_norm * fn.bins).astype(np.int64), fn.bins - 1)
    elif isinstance(fn, PwcDistanceDirection):
        out["dist_bin"] = np.minimum(
            (d_norm * fn.dist_bins).astype(np.int64), fn.dist_bins - 1
        )
        frac = (graph.azimuths + np.pi) / (2.0 * np.pi)
        out["dir_bin"] = np.minimum(
            (frac * fn.dir_bins).astype(np.int64), fn.dir_bins - 1
        )
    return out


def _mlp_modulation(fn, weights: WeightTable, d_norm, a_norm, co, ci):
    """Per-edge (E, C_out, C_in) modulation from the MLP weighting function."""
    L = fn.fourier_levels
    feats = [fourier_embed(d_norm, L) if L > 0 else d_norm[:, None]]
    if isinstance(fn, MlpDistanceDirection):
        feats.append(fourier_embed(a_norm, L) if L > 0 else a_norm[:, None])
    h = np.concatenate(feats, axis=-1)
    for w, b in weights.layers[:-1]:
        h = np.tanh(h @ w + b)
    w, b = weights.layers[-1]
    return (h @ w + b).reshape(-1, co, ci)


def _edge_weights(spec: KernelSpec, weights: WeightTable, graph: NeighborGraph, mb):
    """Dense per-edge (E, C_out, C_in) weights (reference path)."""
    fn = spec.weight_fn
    co, ci = spec.out_channels, spec.in_channels
    if isinstance(fn, PwcDistance):
        w = weights.table[:, :, mb["dist_bin"]]  # (co, ci, E)
        return np.moveaxis(w, 2, 0)
    if isinstance(fn, PwcDistanceDirection):
        w = weights.table[:, :, mb["dist_bin"], mb["dir_bin"]]
        w = np.moveaxis(w, 2, 0)
        if np.any(graph.degenerate):
            # Self-edges take the isotropic mean over direction bins so the
            # gauge never leaks into a zero-length edge.
            iso = weights.table.mean(axis=3)[:, :, mb["dist_bin"]]
            iso = np.moveaxis(iso, 2, 0)
            w = np.where(graph.degenerate[:, None, None], iso, w)
        return w
    mod = _mlp_modulation(fn, weights, mb["d_norm"], mb["a_norm"], co, ci)
    if isinstance(fn, MlpDistanceDirection) and np.any(graph.degenerate):
        # Isotropic stand-in: average the modulation over direction samples.
        degen = np.nonzero(graph.degenerate)[0]
        a_samples = np.linspace(-1.0, 1.0, 16, endpoint=False)
        iso = np.zeros((degen.size, co, ci))
        for a in a_samples:
            iso += _mlp_modulation(
                fn, weights, mb["d_norm"][degen], np.full(degen.size, a), co, ci
            )
        mod[degen] = iso / a_samples.size
    return mod


def spherical_conv_forward(
    src: SphericalImage, graph: NeighborGraph, spec: KernelSpec, weights: WeightTable,
    out_locations: np.ndarray | None = None,
) -> SphericalImage:
    """Reference forward pass: explicit per-edge weighting, chunked over edges.

    Outputs with empty neighborhoods emit the bias alone.  The graph must
    come from a Cap neighborhood with the kernel's radius.
    """
    if src.channels != spec.in_channels:
        raise ShapeMismatch(f"{src.channels} channels vs spec {spec.in_channels}")
    if graph.n_edges and int(graph.indices.max()) >= src.n_points:
        raise ShapeMismatch("graph indices exceed source point count")
    mb = measure_and_bin(graph, spec)
    n_out = graph.n_outputs
    out = np.zeros((n_out, spec.out_channels), dtype=np.float64)
    edge_out = graph.edge_outputs()
    x = np.asarray(src.values, dtype=np.float64)
    chunk = max(1, 2_000_000 // max(1, spec.out_channels * spec.in_channels))
    for lo in range(0, graph.n_edges, chunk):
        hi = min(lo + chunk, graph.n_edges)
        sub = slice(lo, hi)
        submb = {
            k: (v[sub] if isinstance(v, np.ndarray) else v) for k, v in mb.items()
        }
        subgraph_degen = graph.degenerate[sub]
        w = _edge_weights(
            spec,
            weights,
            _GraphView(graph, sub, subgraph_degen),
            submb,
        )
        contrib = np.einsum("eoc,ec->eo", w, x[graph.indices[sub]])
        for c in range(spec.out_channels):
            out[:, c] += np.bincount(edge_out[sub], weights=contrib[:, c], minlength=n_out)
    deg = graph.degrees()
    nz = deg > 0
    out[nz] /= deg[nz, None]
    out += weights.bias[None, :]
    if out_locations is None:
        out_locations = np.empty((n_out, 0))
    return SphericalImage(locations=out_locations, values=out)


class _GraphView:
    """Minimal view exposing just the degenerate flags of an edge slice."""

    def __init__(self, graph, sub, degenerate):
        self.degenerate = degenerate


def segment_reduce_fast_path(
    src: SphericalImage, graph: NeighborGraph, spec: KernelSpec, weights: WeightTable,
    out_locations: np.ndarray | None = None,
) -> SphericalImage:
    """PWC fast path: bin-wise feature reduction, then one dense contraction.

    Numerically equivalent to spherical_conv_forward within fp reduction
    order; asymptotically O(E * C_in + N_out * B * C_in * C_out).
    """
    fn = spec.weight_fn
    if not isinstance(fn, (PwcDistance, PwcDistanceDirection)):
        raise ShapeMismatch("segment reduction requires a PWC weight function")
    if src.channels != spec.in_channels:
        raise ShapeMismatch(f"{src.channels} channels vs spec {spec.in_channels}")
    mb = measure_and_bin(graph, spec)
    n_out = graph.n_outputs
    x = np.asarray(src.values, dtype=np.float64)
    edge_out = graph.edge_outputs()

    if isinstance(fn, PwcDistance):
        n_bins = fn.bins
        flat_bin = mb["dist_bin"]
        table = weights.table  # (co, ci, B)
        regular = slice(None)
        degen = np.zeros(0, dtype=np.int64)
    else:
        n_bins = fn.dist_bins * fn.dir_bins
        flat_bin = mb["dist_bin"] * fn.dir_bins + mb["dir_bin"]
        table = weights.table.reshape(
            spec.out_channels, spec.in_channels, n_bins
        )
        degen = np.nonzero(graph.degenerate)[0]
        regular = np.nonzero(~graph.degenerate)[0]

    # (N_out * B, C_in) segment sums via one sparse matmul.
    rows = edge_out[regular] * n_bins + flat_bin[regular]
    cols = graph.indices[regular]
    data = np.ones(rows.shape[0], dtype=np.float64)
    A = sp.csr_matrix(
        (data, (rows, cols)), shape=(n_out * n_bins, src.n_points)
    )
    S = (A @ x).reshape(n_out, n_bins, spec.in_channels)
    out = np.einsum("obc,kcb->ok", S, table)

    if degen.size:
        # Degenerate-direction edges use the direction-mean of the table,
        # accumulated over distance bins only.
        iso = weights.table.mean(axis=3)  # (co, ci, B_d)
        rows_d = edge_out[degen] * fn.dist_bins + mb["dist_bin"][degen]
        Ad = sp.csr_matrix(
            (np.ones(degen.size), (rows_d, graph.indices[degen])),
            shape=(n_out * fn.dist_bins, src.n_points),
        )
        Sd = (Ad @ x).reshape(n_out, fn.dist_bins, spec.in_channels)
        out += np.einsum("obc,kcb->ok", Sd, iso)

    deg = graph.degrees()
    nz = deg > 0
    out[nz] /= deg[nz, None]
    out += weights.bias[None, :]
    if out_locations is None:
        out_locations = np.empty((n_out, 0))
    return SphericalImage(locations=out_locations, values=out)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

POOL_REDUCERS = ("min", "max", "mean", "upper_quartile_mean")


def spherical_pool(src: SphericalImage, graph: NeighborGraph, reducer: str):
    """Per-channel neighborhood reduction; empty neighborhoods yield NaN.

    Returns (SphericalImage, empty_mask).
    """
    if reducer not in POOL_REDUCERS:
        raise ShapeMismatch(f"unknown reducer {reducer!r}")
    if graph.n_edges and int(graph.indices.max()) >= src.n_points:
        raise ShapeMismatch("graph indices exceed source point count")
    n_out = graph.n_outputs
    deg = graph.degrees()
    empty = deg == 0
    x = np.asarray(src.values, dtype=np.float64)
    out = np.full((n_out, src.channels), np.nan)
    gathered = x[graph.indices]
    starts = graph.offsets[:-1][~empty]
    if reducer == "mean":
        edge_out = graph.edge_outputs()
        for c in range(src.channels):
            s = np.bincount(edge_out, weights=gathered[:, c], minlength=n_out)
            out[~empty, c] = s[~empty] / deg[~empty]
    elif reducer in ("min", "max"):
        ufunc = np.minimum if reducer == "min" else np.maximum
        if starts.size:
            red = ufunc.reduceat(gathered, starts, axis=0)
            out[~empty] = red
    else:  # upper_quartile_mean: mean of the ceil(|N|/4) largest values
        for o in np.nonzero(~empty)[0]:
            seg = gathered[graph.offsets[o]:graph.offsets[o + 1]]
            k = int(np.ceil(seg.shape[0] / 4))
            top = np.sort(seg, axis=0)[-k:]
            out[o] = top.mean(axis=0)
    return SphericalImage(locations=np.empty((n_out, 0)), values=out), empty


# ---------------------------------------------------------------------------
# Layer output locations + registry
# ---------------------------------------------------------------------------


class LocationRegistry:
    """Stack of location sets so upsampling layers can mirror downsampling.

    A downsampling layer pushes its *input* locations; the matching
    upsampling layer pops them back, guaranteeing exact channel-concat
    geometry in encoder/decoder architectures.
    """

    def __init__(self):
        self._stack: list[PointSet] = []

    def push(self, ps: PointSet):
        self._stack.append(ps)

    def pop(self) -> PointSet:
        return self._stack.pop()

    def __len__(self):
        return len(self._stack)


def layer_output_locations(
    input_points: PointSet,
    scheme_family,
    resolution_factor: float,
    registry: LocationRegistry | None = None,
    fov_reference: PointSet | None = None,
) -> PointSet:
    """Output locations for a conv/pool layer at a resolution factor.

    factor < 1 downsamples (and records the input set in the registry);
    factor > 1 upsamples, reusing the registry's stored set when present.
    Generated sets are FoV-filtered against ``fov_reference`` for
    partial-sphere pipelines.
    """
    if resolution_factor <= 0:
        raise InvalidFactor(f"resolution factor must be positive: {resolution_factor}")
    if resolution_factor > 1.0 and registry is not None and len(registry):
        return registry.pop()
    if resolution_factor < 1.0 and registry is not None:
        registry.push(input_points)
    target = max(1, round(resolution_factor * len(input_points)))
    scheme = sampling.match_density(
        scheme_family, input_points, target_area=4.0 * np.pi / target
    )
    out = sampling.generate_locations(scheme)
    if fov_reference is not None:
        out = sampling.fov_filter(out, fov_reference)
    return out
