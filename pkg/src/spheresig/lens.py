"""Camera models, dense ray maps, and planar <-> spherical image transfer.

The optical axis of every model maps to (1, 0, 0) so that the image center
lands at (theta, phi) = (0, 0).  Camera-frame conventions: image u (right)
points along -y on the sphere, image v (down) along -z.  Pixel coordinates
sample at cell centers (u + 0.5, v + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import geometry
from .errors import GeometryMismatch, InvalidModel, ShapeMismatch


@dataclass(frozen=True)
class Pinhole:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int


@dataclass(frozen=True)
class FisheyeEquidistant:
    fov: float  # full field of view, radians
    width: int
    height: int


@dataclass(frozen=True)
class EquirectangularLens:
    width: int
    height: int


LensModel = Union[Pinhole, FisheyeEquidistant, EquirectangularLens]


@dataclass
class RayMap:
    rays: np.ndarray  # (H, W, 3) float64 unit vectors (garbage where invalid)
    valid: np.ndarray  # (H, W) bool

    @property
    def height(self):
        return self.rays.shape[0]

    @property
    def width(self):
        return self.rays.shape[1]


@dataclass
class SphericalImage:
    """Unordered unit-sphere locations with per-point feature channels."""

    locations: np.ndarray  # (N, 3) float64
    values: np.ndarray  # (N, C)

    @property
    def n_points(self):
        return self.locations.shape[0]

    @property
    def channels(self):
        return self.values.shape[1]


def _cam_to_sphere(x_cam, y_cam, z_cam):
    """Camera frame (x right, y down, z forward) -> sphere frame."""
    return np.stack([z_cam, -x_cam, -y_cam], axis=-1)


def _validate_model(model: LensModel):
    if isinstance(model, Pinhole):
        if model.fx <= 0 or model.fy <= 0:
            raise InvalidModel("focal lengths must be positive")
        if not (0 <= model.cx <= model.width and 0 <= model.cy <= model.height):
            raise InvalidModel("principal point outside the image")
    elif isinstance(model, FisheyeEquidistant):
        if not (0 < model.fov <= 2 * np.pi):
            raise InvalidModel("fov must be in (0, 2pi]")
    elif not isinstance(model, EquirectangularLens):
        raise InvalidModel(f"unknown lens model {model!r}")
    if model.width < 1 or model.height < 1:
        raise InvalidModel("image dimensions must be >= 1")


def build_raymap(model: LensModel) -> RayMap:
    """Dense per-pixel unit ray directions plus validity mask."""
    _validate_model(model)
    h, w = model.height, model.width
    u = np.arange(w) + 0.5
    v = np.arange(h) + 0.5
    uu, vv = np.meshgrid(u, v)

    if isinstance(model, Pinhole):
        x = (uu - model.cx) / model.fx
        y = (vv - model.cy) / model.fy
        rays = geometry.normalize(_cam_to_sphere(x, y, np.ones_like(x)))
        valid = np.ones((h, w), dtype=bool)
    elif isinstance(model, FisheyeEquidistant):
        cx, cy = w / 2.0, h / 2.0
        # Equidistant: pixel radius proportional to angle from axis, scaled so
        # the inscribed circle reaches fov/2.
        f = (min(w, h) / 2.0) / (model.fov / 2.0)
        dx, dy = uu - cx, vv - cy
        rho = np.hypot(dx, dy)
        angle = rho / f
        valid = angle <= model.fov / 2.0
        with np.errstate(invalid="ignore", divide="ignore"):
            ux = np.where(rho > 0, dx / np.maximum(rho, 1e-30), 0.0)
            uy = np.where(rho > 0, dy / np.maximum(rho, 1e-30), 0.0)
        sin_a = np.sin(angle)
        rays = _cam_to_sphere(sin_a * ux, sin_a * uy, np.cos(angle))
    else:
        theta = np.pi / 2.0 - np.pi * vv / h
        phi = -np.pi + 2.0 * np.pi * uu / w
        rays = geometry.polar_to_cart(theta, phi)
        valid = np.ones((h, w), dtype=bool)
    return RayMap(rays=rays, valid=valid)


def project(image: np.ndarray, rm: RayMap) -> SphericalImage:
    """Valid pixels of a planar H x W x C image -> spherical image (row-major)."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[:2] != (rm.height, rm.width):
        raise ShapeMismatch(
            f"image {image.shape[:2]} does not match ray map {(rm.height, rm.width)}"
        )
    mask = rm.valid
    return SphericalImage(
        locations=rm.rays[mask].astype(np.float64),
        values=image[mask].copy(),
    )


def unproject(s: SphericalImage, rm: RayMap, fill=0.0) -> np.ndarray:
    """Write values back through the ray map; invalid pixels get `fill`.

    Locations must match the valid rays exactly (same row-major order).
    """
    mask = rm.valid
    n_valid = int(mask.sum())
    if s.n_points != n_valid:
        raise GeometryMismatch(f"{s.n_points} points vs {n_valid} valid rays")
    if np.max(np.abs(s.locations - rm.rays[mask])) > 1e-9:
        raise GeometryMismatch("spherical image locations differ from ray map rays")
    out = np.full((rm.height, rm.width, s.channels), fill, dtype=s.values.dtype)
    out[mask] = s.values
    return out


def subpixel_rays(rm: RayMap, uv: np.ndarray) -> np.ndarray:
    """Rays at fractional pixel coordinates via bilinear blend + renormalize.

    uv is (N, 2) in (u, v) pixel units; the blend uses the four surrounding
    pixel-center rays, clamped at the border.
    """
    uv = np.asarray(uv, dtype=np.float64)
    gu = np.clip(uv[:, 0] - 0.5, 0.0, rm.width - 1.0)
    gv = np.clip(uv[:, 1] - 0.5, 0.0, rm.height - 1.0)
    u0 = np.floor(gu).astype(int)
    v0 = np.floor(gv).astype(int)
    u1 = np.minimum(u0 + 1, rm.width - 1)
    v1 = np.minimum(v0 + 1, rm.height - 1)
    fu = (gu - u0)[:, None]
    fv = (gv - v0)[:, None]
    r = (
        rm.rays[v0, u0] * (1 - fu) * (1 - fv)
        + rm.rays[v0, u1] * fu * (1 - fv)
        + rm.rays[v1, u0] * (1 - fu) * fv
        + rm.rays[v1, u1] * fu * fv
    )
    return geometry.normalize(r)
