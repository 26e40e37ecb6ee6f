"""Desk-scale training stack: manual-gradient spherical layers, losses, AdamW.

Trainable layers are restricted to piecewise-constant conv kernels, whose
gradients are exact table-lookup sums; MLP-weighted kernels are
inference-only.  Digit images are lifted to the sphere by inverse
stereographic projection and resampled onto a canonical training grid.
"""

from __future__ import annotations

import gzip
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import interp, ops, sampling
from .errors import (
    BadMagic,
    EmptyClassSet,
    NonFiniteGradient,
    TruncatedStream,
    UntrainableLayer,
)
from .lens import SphericalImage
from .neighbors import Cap, KNearest, NeighborGraph, build_neighbor_graph
from .sampling import PointSet, Polyhedral

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# ---------------------------------------------------------------------------
# MNIST ingestion
# ---------------------------------------------------------------------------


def parse_idx(data: bytes) -> np.ndarray:
    """Decode a big-endian IDX stream; image pixels are scaled to [0, 1]."""
    if len(data) < 4:
        raise TruncatedStream("IDX stream shorter than its magic")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES_MAGIC:
        if len(data) < 16:
            raise TruncatedStream("IDX image header truncated")
        n, h, w = struct.unpack(">III", data[4:16])
        payload = data[16 : 16 + n * h * w]
        if len(payload) != n * h * w:
            raise TruncatedStream("IDX image payload truncated")
        return (
            np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w).astype(np.float32)
            / 255.0
        )
    if magic == IDX_LABELS_MAGIC:
        if len(data) < 8:
            raise TruncatedStream("IDX label header truncated")
        (n,) = struct.unpack(">I", data[4:8])
        payload = data[8 : 8 + n]
        if len(payload) != n:
            raise TruncatedStream("IDX label payload truncated")
        return np.frombuffer(payload, dtype=np.uint8).copy()
    raise BadMagic(f"unknown IDX magic 0x{magic:08x}")


def _read_maybe_gz(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def load_mnist(directory) -> tuple:
    """(train_images, train_labels, test_images, test_labels) from IDX files."""
    directory = Path(directory)
    out = []
    for stem in (
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ):
        for cand in (directory / stem, directory / (stem + ".gz")):
            if cand.exists():
                out.append(parse_idx(_read_maybe_gz(cand)))
                break
        else:
            raise FileNotFoundError(f"missing MNIST file {stem}[.gz] in {directory}")
    return tuple(out)


def mnist_available(directory) -> bool:
    directory = Path(directory)
    stem = "train-images-idx3-ubyte"
    return (directory / stem).exists() or (directory / (stem + ".gz")).exists()


# ---------------------------------------------------------------------------
# Stereographic lift onto the sphere
# ---------------------------------------------------------------------------


def stereographic_points(height: int, width: int) -> np.ndarray:
    """Pixel centers scaled to [-1, 1]^2, lifted from the south pole.

    (a, b) -> (2a, 2b, 1 - a^2 - b^2) / (1 + a^2 + b^2): the plane origin
    maps to the north pole and the unit square stays in the upper patch.
    """
    a = -1.0 + 2.0 * (np.arange(width) + 0.5) / width
    b = 1.0 - 2.0 * (np.arange(height) + 0.5) / height  # row 0 at the top
    aa, bb = np.meshgrid(a, b)
    denom = 1.0 + aa * aa + bb * bb
    pts = np.stack(
        [2.0 * aa / denom, 2.0 * bb / denom, (1.0 - aa * aa - bb * bb) / denom],
        axis=-1,
    )
    return pts.reshape(-1, 3)


def plane_to_sphere(a, b):
    """Inverse stereographic projection of plane coordinates (from south pole)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = 1.0 + a * a + b * b
    return np.stack([2.0 * a, 2.0 * b, 1.0 - a * a - b * b], axis=-1) / denom[..., None]


def build_planar_lift(
    height: int, width: int, grid: PointSet, kernel=None, k_neighbors: int = 4
) -> sp.csr_matrix:
    """Sparse (|grid|, H*W) matrix mapping flat pixel vectors to grid values.

    Grid points outside the projected patch's FoV get all-zero rows, so
    off-patch values are exactly 0.  The matrix is geometry-only and reused
    across the whole dataset.
    """
    pix = PointSet(points=stereographic_points(height, width))
    if kernel is None:
        kernel = interp.default_kernel(pix.points)
    graph = build_neighbor_graph(pix, grid, KNearest(k=k_neighbors))
    inside = sampling.fov_mask(grid, pix)
    w = interp.rbf_weight(kernel, graph.distances)
    edge_out = graph.edge_outputs()
    wsum = np.bincount(edge_out, weights=w, minlength=graph.n_outputs)
    wsum[wsum <= 0] = 1.0
    data = w / wsum[edge_out]
    data = np.where(inside[edge_out], data, 0.0)
    M = sp.csr_matrix(
        (data, (edge_out, graph.indices)), shape=(len(grid), height * width)
    )
    M.eliminate_zeros()
    return M


def lift_images(images: np.ndarray, M: sp.csr_matrix) -> np.ndarray:
    """(S, H, W) planar batch -> (S, N_grid, 1) spherical batch."""
    s = images.shape[0]
    flat = images.reshape(s, -1).astype(np.float64)
    return (M @ flat.T).T[:, :, None]


def mnist_to_sphere(pixels: np.ndarray, grid: PointSet, M=None) -> SphericalImage:
    """Lift one digit onto the canonical grid (off-patch points are 0)."""
    if M is None:
        M = build_planar_lift(pixels.shape[0], pixels.shape[1], grid)
    vals = lift_images(pixels[None], M)[0]
    return SphericalImage(locations=np.asarray(grid.points), values=vals)


# ---------------------------------------------------------------------------
# Layers (manual gradients)
# ---------------------------------------------------------------------------


class SphConvLayer:
    """Trainable spherical conv with a PWC weight function.

    Geometry (neighbor graph, bin assignment) is baked into a sparse
    segment matrix at construction and cached for every forward pass.
    """

    def __init__(self, spec: ops.KernelSpec, graph: NeighborGraph, rng, n_inputs=None):
        fn = spec.weight_fn
        if not isinstance(fn, (ops.PwcDistance, ops.PwcDistanceDirection)):
            raise UntrainableLayer("only PWC weight functions are trainable")
        self.spec = spec
        self.graph = graph
        self.n_inputs = n_inputs
        mb = ops.measure_and_bin(graph, spec)
        if isinstance(fn, ops.PwcDistance):
            self.n_bins = fn.bins
            flat_bin = mb["dist_bin"]
            rows = graph.edge_outputs() * self.n_bins + flat_bin
            data = np.ones(graph.n_edges)
        else:
            self.n_bins = fn.dist_bins * fn.dir_bins
            flat_bin = mb["dist_bin"] * fn.dir_bins + mb["dir_bin"]
            rows = graph.edge_outputs() * self.n_bins + flat_bin
            data = np.ones(graph.n_edges)
            # Degenerate (zero-length) edges spread 1/B_a over all direction
            # bins of their distance bin: the isotropic mean, with gradients
            # flowing evenly to every direction bin.
            degen = np.nonzero(graph.degenerate)[0]
            if degen.size:
                ba = fn.dir_bins
                keep = ~graph.degenerate
                rows = rows[keep]
                data = data[keep]
                cols_reg = graph.indices[keep]
                d_rows = (
                    (graph.edge_outputs()[degen] * fn.dist_bins + mb["dist_bin"][degen])[:, None]
                    * ba
                    + np.arange(ba)[None, :]
                ).ravel()
                d_cols = np.repeat(graph.indices[degen], ba)
                d_data = np.full(d_rows.size, 1.0 / ba)
                rows = np.concatenate([rows, d_rows])
                data = np.concatenate([data, d_data])
                cols = np.concatenate([cols_reg, d_cols])
                self._segment = sp.csr_matrix(
                    (data, (rows, cols)),
                    shape=(graph.n_outputs * self.n_bins, self._n_inputs()),
                )
                self.deg = np.maximum(graph.degrees(), 1)
                self.weights = ops.init_weight_table(spec, rng)
                self._cache = None
                return
        cols = graph.indices
        self._segment = sp.csr_matrix(
            (data, (rows, cols)),
            shape=(graph.n_outputs * self.n_bins, self._n_inputs()),
        )
        self.deg = np.maximum(graph.degrees(), 1)
        self.weights = ops.init_weight_table(spec, rng)
        self._cache = None

    def _n_inputs(self):
        if self.n_inputs is not None:
            return self.n_inputs
        return int(self.graph.indices.max()) + 1 if self.graph.n_edges else 0

    @property
    def table_flat(self):
        return self.weights.table.reshape(
            self.spec.out_channels, self.spec.in_channels, self.n_bins
        )

    def params(self):
        return {"table": self.weights.table, "bias": self.weights.bias}

    def forward(self, x):
        """x: (S, N_in, C_in) -> (S, N_out, C_out)."""
        s, n_in, ci = x.shape
        xt = x.transpose(1, 0, 2).reshape(n_in, s * ci)
        seg = (self._segment @ xt).reshape(self.graph.n_outputs, self.n_bins, s, ci)
        self._cache = (seg, (s, n_in, ci))
        out = np.einsum("obsc,kcb->sok", seg, self.table_flat, optimize=True)
        out /= self.deg[None, :, None]
        out += self.weights.bias[None, None, :]
        return out

    def backward(self, g):
        """g: (S, N_out, C_out) -> (grad dict, dx)."""
        seg, (s, n_in, ci) = self._cache
        gn = g / self.deg[None, :, None]
        d_table = np.einsum("sok,obsc->kcb", gn, seg, optimize=True)
        d_bias = g.sum(axis=(0, 1))
        d_seg = np.einsum("sok,kcb->obsc", gn, self.table_flat, optimize=True)
        d_seg = d_seg.reshape(self.graph.n_outputs * self.n_bins, s * ci)
        dxt = self._segment.T @ d_seg
        dx = dxt.reshape(n_in, s, ci).transpose(1, 0, 2)
        grads = {
            "table": d_table.reshape(self.weights.table.shape),
            "bias": d_bias,
        }
        return grads, dx


class ReLULayer:
    def params(self):
        return {}

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return {}, g * self._mask


class GlobalAvgPoolLayer:
    """(S, N, C) -> (S, C): rotation-invariant readout over all points."""

    def params(self):
        return {}

    def forward(self, x):
        self._n = x.shape[1]
        return x.mean(axis=1)

    def backward(self, g):
        return {}, np.repeat(g[:, None, :], self._n, axis=1) / self._n


class DenseLayer:
    def __init__(self, in_dim, out_dim, rng):
        self.w = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(in_dim, out_dim))
        self.b = np.zeros(out_dim)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x):
        self._x = x
        return x @ self.w + self.b

    def backward(self, g):
        grads = {"w": self._x.T @ g, "b": g.sum(axis=0)}
        return grads, g @ self.w.T


@dataclass
class Model:
    layers: list

    def parameters(self):
        """{(layer_index, name): array} over all trainable parameters."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[(i, name)] = arr
        return out

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_smoothed(logits, labels, smoothing: float = 0.05):
    """(mean loss, dlogits) with label smoothing over 10 classes."""
    s, k = logits.shape
    p = softmax(logits)
    t = np.full((s, k), smoothing / k)
    t[np.arange(s), labels] += 1.0 - smoothing
    logp = np.log(np.clip(p, 1e-12, None))
    loss = float(-(t * logp).sum() / s)
    return loss, (p - t) / s


def forward_backward(model: Model, x, labels, smoothing: float = 0.05):
    """One batch: returns (loss, {(layer, name): grad})."""
    logits = model.forward(x)
    loss, g = cross_entropy_smoothed(logits, labels, smoothing)
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        layer_grads, g = model.layers[i].backward(g)
        for name, arr in layer_grads.items():
            grads[(i, name)] = arr
    return loss, grads


# ---------------------------------------------------------------------------
# Losses for detection / segmentation heads
# ---------------------------------------------------------------------------


def focal_loss(probs, targets, lam_pos: float = 2.0, lam_neg: float = 4.0) -> float:
    """Heatmap focal loss: mean of the positive and negative branch terms."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-7, 1.0 - 1e-7)
    y = np.asarray(targets, dtype=np.float64)
    pos = -np.log(p) * (1.0 - p) ** lam_pos * y
    neg = -np.log(1.0 - p) * p**lam_pos * (1.0 - y) ** lam_neg
    return float(np.mean(pos + neg))


def dice_loss(probs, one_hot_targets, valid_mask=None, class_set=None) -> float:
    """1 - mean Dice over the given classes, restricted to valid points."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(one_hot_targets, dtype=np.float64)
    if valid_mask is not None:
        p = p[np.asarray(valid_mask, dtype=bool)]
        y = y[np.asarray(valid_mask, dtype=bool)]
    if class_set is None:
        class_set = list(range(p.shape[-1]))
    if len(class_set) == 0:
        raise EmptyClassSet("no classes to score")
    dices = []
    for c in class_set:
        denom = p[:, c].sum() + y[:, c].sum()
        if denom <= 0:
            dices.append(1.0)  # class absent and not predicted: perfect
            continue
        dices.append(2.0 * float((p[:, c] * y[:, c]).sum()) / float(denom))
    return 1.0 - float(np.mean(dices))


# ---------------------------------------------------------------------------
# AdamW + schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamW:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    warmup_fraction: float = 0.4
    final_lr_factor: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1000
    step_count: int = 0
    moments: dict = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        """Linear warmup over the first 40% of steps, then cosine decay to
        final_lr_factor of the peak."""
        warm = self.warmup_fraction * self.total_steps
        if step < warm:
            return self.lr * step / max(warm, 1)
        t = (step - warm) / max(self.total_steps - warm, 1)
        t = min(t, 1.0)
        floor = self.final_lr_factor
        return self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * t)))

    def step(self, params: dict, grads: dict):
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for {key}")
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        t = self.step_count
        for key, p in params.items():
            g = grads.get(key)
            if g is None:
                continue
            if key not in self.moments:
                self.moments[key] = (np.zeros_like(p), np.zeros_like(p))
            m, v = self.moments[key]
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.moments[key] = (m, v)
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            p -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)


def adamw_step(state: AdamW, params: dict, grads: dict):
    state.step(params, grads)
    return params


# ---------------------------------------------------------------------------
# Spherical digit classifier
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    data_dir: str = "data/mnist"
    variant: str = "radial"  # radial: PWC x3 distance; directional: PWC 3x6
    n_train: int = 6000
    n_test: int = 2000
    epochs: int = 100
    batch_size: int = 1024
    seed: int = 0
    grid_n_side: int = 8  # icosahedral grid, 10 n^2 + 2 points
    radius_factor: float = 2.5
    lr: float = 1e-3
    weight_decay: float = 1e-2
    label_smoothing: float = 0.05
    metrics_path: str | None = None


def _weight_fn_for(variant: str):
    if variant == "radial":
        return ops.PwcDistance(bins=3)
    if variant == "directional":
        return ops.PwcDistanceDirection(dist_bins=3, dir_bins=6)
    raise ValueError(f"unknown variant {variant!r}")


def build_classifier(cfg: TrainConfig, rng) -> tuple[Model, PointSet]:
    """Two PWC conv layers (1->16->32, 1/4 downsampling), ReLU, GAP, dense."""
    grid0 = sampling.generate_locations(Polyhedral("icosa", cfg.grid_n_side))
    registry = ops.LocationRegistry()
    grid1 = ops.layer_output_locations(grid0, Polyhedral("icosa", 1), 0.25, registry)
    grid2 = ops.layer_output_locations(grid1, Polyhedral("icosa", 1), 0.25, registry)
    fn = _weight_fn_for(cfg.variant)

    def conv(src_grid, dst_grid, ci, co):
        radius = cfg.radius_factor * sampling.mean_nn_distance(src_grid)
        spec = ops.KernelSpec(radius=radius, weight_fn=fn, in_channels=ci, out_channels=co)
        graph = build_neighbor_graph(src_grid, dst_grid, Cap(radius=radius))
        return SphConvLayer(spec, graph, rng, n_inputs=len(src_grid))

    model = Model(
        layers=[
            conv(grid0, grid1, 1, 16),
            ReLULayer(),
            conv(grid1, grid2, 16, 32),
            ReLULayer(),
            GlobalAvgPoolLayer(),
            DenseLayer(32, 10, rng),
        ]
    )
    return model, grid0


def evaluate(model: Model, x, labels, batch_size: int = 1024) -> float:
    correct = 0
    for lo in range(0, x.shape[0], batch_size):
        logits = model.forward(x[lo : lo + batch_size])
        correct += int(np.sum(np.argmax(logits, axis=-1) == labels[lo : lo + batch_size]))
    return correct / x.shape[0]


def rotate_batch(x, grid: PointSet, rng, kernel=None):
    """Independently rotate each spherical sample (rotate-then-resample)."""
    from . import geometry

    if kernel is None:
        kernel = interp.default_kernel(grid.points)
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        rot = geometry.random_rotation(rng)
        img = SphericalImage(locations=grid.points, values=x[i])
        out[i] = interp.rotate_spherical_image(
            img, rot, kernel=kernel, spec=KNearest(k=4)
        ).values
    return out


def train_spherical_mnist(cfg: TrainConfig, dataset=None) -> dict:
    """Train and evaluate; returns the metrics report.

    ``dataset`` may supply (train_images, train_labels, test_images,
    test_labels) directly; otherwise MNIST IDX files are loaded from
    cfg.data_dir.  Evaluation reports upright (nr) accuracy and accuracy
    under independent uniform random rotations (rr).
    """
    rng = np.random.default_rng(cfg.seed)
    if dataset is None:
        train_x, train_y, test_x, test_y = load_mnist(cfg.data_dir)
    else:
        train_x, train_y, test_x, test_y = dataset
    train_x, train_y = train_x[: cfg.n_train], train_y[: cfg.n_train]
    test_x, test_y = test_x[: cfg.n_test], test_y[: cfg.n_test]

    model, grid = build_classifier(cfg, rng)
    lift = build_planar_lift(train_x.shape[1], train_x.shape[2], grid)
    xs = lift_images(train_x, lift)
    xt = lift_images(test_x, lift)

    steps_per_epoch = int(np.ceil(cfg.n_train / cfg.batch_size))
    opt = AdamW(
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        total_steps=cfg.epochs * steps_per_epoch,
    )
    params = model.parameters()
    history = []
    t0 = time.time()
    for epoch in range(cfg.epochs):
        order = rng.permutation(cfg.n_train)
        losses = []
        for lo in range(0, cfg.n_train, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            loss, grads = forward_backward(
                model, xs[idx], train_y[idx], cfg.label_smoothing
            )
            opt.step(params, grads)
            losses.append(loss)
        history.append({"epoch": epoch, "split": "train", "loss": float(np.mean(losses))})

    nr = evaluate(model, xt, test_y)
    rot_rng = np.random.default_rng(cfg.seed + 1)
    xr = rotate_batch(xt, grid, rot_rng)
    rr = evaluate(model, xr, test_y)
    report = {
        "variant": cfg.variant,
        "nr_accuracy": nr,
        "rr_accuracy": rr,
        "train_seconds": time.time() - t0,
        "history": history,
    }
    if cfg.metrics_path:
        with open(cfg.metrics_path, "w") as fh:
            for row in history:
                fh.write(json.dumps(row) + "\n")
            fh.write(json.dumps({"split": "test", "nr": nr, "rr": rr}) + "\n")
    report["model"] = model
    report["grid"] = grid
    return report
