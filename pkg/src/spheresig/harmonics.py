"""Low-degree real spherical harmonics and quadrature-based spectral checks.

Closed forms are tabulated up to degree 4; analysis uses equal-weight
quadrature (4*pi/N per point) on near-uniform full-sphere point sets.  The
spectral check measures the per-(degree, order) gain of a spherical conv
kernel: radial kernels act diagonally with order-independent gains, while
direction-dependent kernels leak energy across orders.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import ops, sampling
from .errors import DegreeOutOfRange, PartialCoverage
from .lens import SphericalImage
from .neighbors import Cap, NeighborGraph, build_neighbor_graph
from .sampling import Fibonacci, PointSet

L_MAX = 4


def real_sh(ell: int, m: int, p) -> np.ndarray:
    """Real orthonormal spherical harmonic of degree ell <= 4 at unit vectors p."""
    if not (0 <= ell <= L_MAX) or abs(m) > ell:
        raise DegreeOutOfRange(f"(ell, m) = ({ell}, {m}) out of tabulated range")
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rp = np.sqrt(np.pi)
    if ell == 0:
        return np.full(np.shape(x), 0.5 / rp)
    if ell == 1:
        c = np.sqrt(3.0) / (2.0 * rp)
        return c * {-1: y, 0: z, 1: x}[m]
    if ell == 2:
        if m == -2:
            return 0.5 * np.sqrt(15.0) / rp * x * y
        if m == -1:
            return 0.5 * np.sqrt(15.0) / rp * y * z
        if m == 0:
            return 0.25 * np.sqrt(5.0) / rp * (3.0 * z * z - 1.0)
        if m == 1:
            return 0.5 * np.sqrt(15.0) / rp * x * z
        return 0.25 * np.sqrt(15.0) / rp * (x * x - y * y)
    if ell == 3:
        if m == -3:
            return 0.25 * np.sqrt(35.0 / 2.0) / rp * y * (3.0 * x * x - y * y)
        if m == -2:
            return 0.5 * np.sqrt(105.0) / rp * x * y * z
        if m == -1:
            return 0.25 * np.sqrt(21.0 / 2.0) / rp * y * (5.0 * z * z - 1.0)
        if m == 0:
            return 0.25 * np.sqrt(7.0) / rp * z * (5.0 * z * z - 3.0)
        if m == 1:
            return 0.25 * np.sqrt(21.0 / 2.0) / rp * x * (5.0 * z * z - 1.0)
        if m == 2:
            return 0.25 * np.sqrt(105.0) / rp * z * (x * x - y * y)
        return 0.25 * np.sqrt(35.0 / 2.0) / rp * x * (x * x - 3.0 * y * y)
    # ell == 4
    if m == -4:
        return 0.75 * np.sqrt(35.0) / rp * x * y * (x * x - y * y)
    if m == -3:
        return 0.75 * np.sqrt(35.0 / 2.0) / rp * y * z * (3.0 * x * x - y * y)
    if m == -2:
        return 0.75 * np.sqrt(5.0) / rp * x * y * (7.0 * z * z - 1.0)
    if m == -1:
        return 0.75 * np.sqrt(5.0 / 2.0) / rp * y * z * (7.0 * z * z - 3.0)
    if m == 0:
        return 3.0 / (16.0 * rp) * (35.0 * z**4 - 30.0 * z * z + 3.0)
    if m == 1:
        return 0.75 * np.sqrt(5.0 / 2.0) / rp * x * z * (7.0 * z * z - 3.0)
    if m == 2:
        return 3.0 / 8.0 * np.sqrt(5.0) / rp * (x * x - y * y) * (7.0 * z * z - 1.0)
    if m == 3:
        return 0.75 * np.sqrt(35.0 / 2.0) / rp * x * z * (x * x - 3.0 * y * y)
    return (
        3.0 / 16.0 * np.sqrt(35.0) / rp
        * (x * x * (x * x - 3.0 * y * y) - y * y * (3.0 * x * x - y * y))
    )


def lm_pairs(l_max: int = L_MAX):
    return [(l, m) for l in range(l_max + 1) for m in range(-l, l + 1)]


def sh_basis(p, l_max: int = L_MAX) -> np.ndarray:
    """(N, (l_max+1)^2) matrix of harmonic values at unit vectors p."""
    return np.stack([real_sh(l, m, p) for l, m in lm_pairs(l_max)], axis=-1)


@dataclass
class ShCoeffs:
    l_max: int
    coefficients: np.ndarray  # flat, (l_max+1)^2, ordered by lm_pairs

    def get(self, ell, m):
        return float(self.coefficients[ell * ell + (m + ell)])


def check_full_coverage(locations: np.ndarray, probe_n: int = 2048):
    """Raise PartialCoverage if a coarse probe set finds holes."""
    ps = PointSet(points=np.asarray(locations, dtype=np.float64))
    probes = sampling.generate_locations(Fibonacci(probe_n))
    threshold = 4.0 * sampling.mean_nn_distance(ps)
    if not np.all(sampling.fov_mask(probes, ps, threshold=threshold)):
        raise PartialCoverage("point set does not cover the full sphere")


def sh_analysis(s: SphericalImage, l_max: int = L_MAX) -> ShCoeffs:
    """Harmonic coefficients by equal-weight quadrature on a uniform set."""
    if l_max > L_MAX:
        raise DegreeOutOfRange(f"l_max {l_max} > {L_MAX}")
    check_full_coverage(s.locations)
    basis = sh_basis(s.locations, l_max)
    w = 4.0 * np.pi / s.n_points
    coeffs = w * basis.T @ np.asarray(s.values, dtype=np.float64)
    return ShCoeffs(l_max=l_max, coefficients=coeffs.squeeze(-1) if coeffs.ndim == 2 and coeffs.shape[1] == 1 else coeffs)


def _single_channel_edge_weights(graph: NeighborGraph, spec: ops.KernelSpec,
                                 weights: ops.WeightTable) -> np.ndarray:
    """Scalar weight per edge for a 1 -> 1 channel kernel."""
    mb = ops.measure_and_bin(graph, spec)
    w = ops._edge_weights(spec, weights, graph, mb)
    return w[:, 0, 0]


def single_channel_conv(graph: NeighborGraph, spec: ops.KernelSpec,
                        weights: ops.WeightTable, signals: np.ndarray) -> np.ndarray:
    """Apply a 1-channel kernel to each column of signals (N_in, K) at once."""
    w = _single_channel_edge_weights(graph, spec, weights)
    edge_out = graph.edge_outputs()
    A = sp.csr_matrix(
        (w, (edge_out, graph.indices)),
        shape=(graph.n_outputs, signals.shape[0]),
    )
    deg = np.maximum(graph.degrees(), 1)
    out = (A @ signals) / deg[:, None]
    return out + weights.bias[0]


@dataclass
class SpectralGain:
    ell: int
    m: int
    gain: float
    crosstalk_energy: float


def zonal_spectral_check(spec: ops.KernelSpec, weights: ops.WeightTable,
                         n_points: int, l_max: int = L_MAX,
                         graph: NeighborGraph | None = None) -> list[SpectralGain]:
    """Feed each harmonic through the kernel and measure its spectral gain.

    gain = <out, Y_lm> / <Y_lm, Y_lm>; crosstalk_energy is the summed
    squared projection of the output onto every other basis function.
    """
    ps = sampling.generate_locations(Fibonacci(n_points))
    if graph is None:
        graph = build_neighbor_graph(ps, ps, Cap(radius=spec.radius))
    basis = sh_basis(ps.points, l_max)  # (N, K)
    out = single_channel_conv(graph, spec, weights, basis)  # (N, K)
    w = 4.0 * np.pi / n_points
    # proj[j, i] = <out_i, Y_j>
    proj = w * basis.T @ out
    norms = w * np.sum(basis * basis, axis=0)
    results = []
    for i, (l, m) in enumerate(lm_pairs(l_max)):
        gain = proj[i, i] / norms[i]
        cross = float(np.sum(proj[:, i] ** 2) - proj[i, i] ** 2)
        results.append(SpectralGain(ell=l, m=m, gain=float(gain), crosstalk_energy=cross))
    return results


def gains_to_csv(gains: list[SpectralGain], path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["l", "m", "gain", "crosstalk_energy"])
        for g in gains:
            writer.writerow([g.ell, g.m, f"{g.gain:.9g}", f"{g.crosstalk_energy:.9g}"])


def m_spread(gains: list[SpectralGain], ell: int) -> float:
    """max_m |gain - mean_m gain| / |mean_m gain| for one degree."""
    gs = np.array([g.gain for g in gains if g.ell == ell])
    mu = gs.mean()
    if abs(mu) < 1e-12:
        return float(np.max(np.abs(gs - mu)))
    return float(np.max(np.abs(gs - mu)) / abs(mu))
