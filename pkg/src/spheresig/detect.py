"""Spherical detection geometry: rotated bounding fields of view.

A box is described by its center (theta, phi), angular extents (alpha,
beta), an in-plane roll gamma, and a category.  Membership tests rotate
points into the box frame and check gnomonic tangent-plane angles, so boxes
keep their shape anywhere on the sphere, poles included.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from . import geometry, sampling
from .errors import EmptyDenseSet
from .sampling import Fibonacci, PointSet


@dataclass(frozen=True)
class RBFoV:
    theta: float  # center latitude, radians
    phi: float  # center longitude, radians
    alpha: float  # horizontal angular extent, radians, in (0, pi)
    beta: float  # vertical angular extent, radians, in (0, pi)
    gamma: float = 0.0  # in-plane roll about the center ray
    category: int = 0
    score: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.alpha < np.pi and 0.0 < self.beta < np.pi):
            raise ValueError("extents must lie in (0, pi)")
        if not (-np.pi / 2 <= self.theta <= np.pi / 2):
            raise ValueError("center latitude out of range")


def _box_frame(box: RBFoV) -> np.ndarray:
    """Rotation taking world points into the box frame (center -> (1,0,0)).

    Build the frame that maps (1,0,0) to the center with roll gamma, then
    return its inverse (transpose).
    """
    center = geometry.polar_to_cart(np.array([box.theta]), np.array([box.phi]))[0]
    east, north = geometry.tangent_frame(center)
    cg, sg = np.cos(box.gamma), np.sin(box.gamma)
    # Box axes in world coordinates: a-axis along rolled east, b-axis along
    # rolled north.
    a_axis = cg * east + sg * north
    b_axis = -sg * east + cg * north
    frame = np.stack([center, a_axis, b_axis], axis=0)
    return frame


def _gnomonic_angles(box: RBFoV, points: np.ndarray):
    q = np.asarray(points, dtype=np.float64) @ _box_frame(box).T
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    front = x > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(front, np.arctan2(y, np.abs(x) + (~front)), 0.0)
        b = np.where(front, np.arctan2(z, np.abs(x) + (~front)), 0.0)
    return a, b, front


def rbfov_contains(box: RBFoV, points) -> np.ndarray:
    """Closed-boundary membership mask over unit vectors or a PointSet."""
    pts = points.points if isinstance(points, PointSet) else np.asarray(points)
    a, b, front = _gnomonic_angles(box, pts)
    return front & (np.abs(a) <= box.alpha / 2) & (np.abs(b) <= box.beta / 2)


def pairwise_iou(a, b, dense: PointSet) -> np.ndarray:
    """|a| x |b| mask-based IoU on a dense full-sphere point set."""
    if len(dense) == 0:
        raise EmptyDenseSet("dense point set is empty")
    masks_a = np.stack([rbfov_contains(box, dense) for box in a]) if a else np.zeros((0, len(dense)), bool)
    if b is a:
        masks_b = masks_a
    else:
        masks_b = np.stack([rbfov_contains(box, dense) for box in b]) if b else np.zeros((0, len(dense)), bool)
    inter = masks_a.astype(np.int64) @ masks_b.T.astype(np.int64)
    na = masks_a.sum(axis=1)[:, None]
    nb = masks_b.sum(axis=1)[None, :]
    union = na + nb - inter
    with np.errstate(invalid="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return iou


def matrix_nms(boxes, sigma: float = 5.0, score_threshold: float = 0.3,
               dense: PointSet | None = None):
    """Parallel NMS with Gaussian score decay (SOLOv2 style).

    Boxes are ranked by score; each lower-ranked box j of the same category
    is decayed by min_i exp(-(iou(i,j)^2 - iota_i^2) / sigma), where iota_i
    is box i's own max IoU with any higher-ranked box.  Decayed boxes below
    score_threshold are dropped.
    """
    if not boxes:
        return []
    if dense is None:
        dense = sampling.generate_locations(Fibonacci(10000))
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    ranked = [boxes[i] for i in order]
    iou = pairwise_iou(ranked, ranked, dense)
    n = len(ranked)
    cats = np.array([bx.category for bx in ranked])
    same_cat = cats[:, None] == cats[None, :]
    # Upper triangle: iou[i, j] for i ranked above j.
    above = np.triu(np.ones((n, n), bool), k=1) & same_cat
    iou_above = np.where(above, iou, 0.0)
    iota = iou_above.max(axis=0)  # max IoU of each box with any higher-ranked one
    decay = np.exp(-(iou_above**2 - iota[:, None] ** 2) / sigma)
    decay = np.where(above, decay, np.inf)
    factor = np.minimum(decay.min(axis=0), 1.0)
    out = []
    for j, bx in enumerate(ranked):
        new_score = bx.score * float(factor[j])
        if new_score >= score_threshold:
            out.append(replace(bx, score=new_score))
    return out


def gaussian_heatmap(centers, points: PointSet, sigma_factor: float = 1.0 / 6.0) -> dict:
    """Per-category max-of-Gaussians heat values at the given points.

    Each box contributes exp(-(a^2 / (2 sa^2) + b^2 / (2 sb^2))) with (a, b)
    the gnomonic offsets in its frame and (sa, sb) = sigma_factor * (alpha,
    beta).  Points behind the tangent plane get 0.
    """
    pts = points.points if isinstance(points, PointSet) else np.asarray(points)
    out: dict[int, np.ndarray] = {}
    for box in centers:
        a, b, front = _gnomonic_angles(box, pts)
        sa = sigma_factor * box.alpha
        sb = sigma_factor * box.beta
        heat = np.exp(-(a * a / (2 * sa * sa) + b * b / (2 * sb * sb)))
        heat = np.where(front, heat, 0.0)
        if box.category in out:
            out[box.category] = np.maximum(out[box.category], heat)
        else:
            out[box.category] = heat
    return out


def regression_mask(centers, points: PointSet) -> np.ndarray:
    """Points supervised by center regression: a small cap around each
    box center (nearest point plus neighbors within mean point spacing)."""
    pts = points.points if isinstance(points, PointSet) else np.asarray(points)
    spacing = sampling.mean_nn_distance(PointSet(points=pts))
    mask = np.zeros(pts.shape[0], dtype=bool)
    for box in centers:
        c = geometry.polar_to_cart(np.array([box.theta]), np.array([box.phi]))[0]
        d = geometry.geodesic_distance(pts, c[None, :])
        mask[np.argmin(d)] = True
        mask |= d <= spacing
    return mask


# ---------------------------------------------------------------------------
# Box file IO
# ---------------------------------------------------------------------------

_FIELDS = ["theta", "phi", "alpha", "beta", "gamma", "category", "score"]


def boxes_to_csv(boxes, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_FIELDS)
        for b in boxes:
            writer.writerow(
                [b.theta, b.phi, b.alpha, b.beta, b.gamma, b.category, b.score]
            )


def boxes_from_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                RBFoV(
                    theta=float(row["theta"]),
                    phi=float(row["phi"]),
                    alpha=float(row["alpha"]),
                    beta=float(row["beta"]),
                    gamma=float(row["gamma"]),
                    category=int(row["category"]),
                    score=float(row["score"]),
                )
            )
    return out


def boxes_to_jsonl(boxes, path):
    with open(path, "w") as fh:
        for b in boxes:
            fh.write(
                json.dumps({f: getattr(b, f) for f in _FIELDS}) + "\n"
            )


def boxes_from_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(RBFoV(**{k: d[k] for k in _FIELDS}))
    return out


def average_precision(predictions, ground_truth, dense: PointSet,
                      iou_threshold: float = 0.5) -> float:
    """Single-category AP at one IoU threshold (11-point interpolation)."""
    preds = sorted(predictions, key=lambda b: -b.score)
    if not ground_truth:
        return 0.0
    if not preds:
        return 0.0
    iou = pairwise_iou(preds, ground_truth, dense)
    matched = np.zeros(len(ground_truth), dtype=bool)
    tp = np.zeros(len(preds))
    for i in range(len(preds)):
        j = int(np.argmax(iou[i]))
        if iou[i, j] >= iou_threshold and not matched[j]:
            matched[j] = True
            tp[i] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / len(ground_truth)
    precision = cum_tp / np.arange(1, len(preds) + 1)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        ps = precision[recall >= r]
        ap += (ps.max() if ps.size else 0.0) / 11.0
    return float(ap)


def mean_average_precision(predictions, ground_truth, dense: PointSet,
                           iou_threshold: float = 0.5) -> float:
    """Mean AP over the categories present in the ground truth."""
    cats = sorted({b.category for b in ground_truth})
    if not cats:
        return 0.0
    aps = []
    for c in cats:
        aps.append(
            average_precision(
                [b for b in predictions if b.category == c],
                [b for b in ground_truth if b.category == c],
                dense,
                iou_threshold,
            )
        )
    return float(np.mean(aps))
