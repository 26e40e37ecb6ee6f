"""Command-line pipeline: sampling, projection, resampling, training, checks.

Exit codes: 2 for usage or file-format violations, 3 for geometry
mismatches, 4 for missing data.  Neighbor graphs are cached as NGRF files
under $USF_CACHE_DIR when it is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import detect, formats, geometry, harmonics, interp, learn, ops, sampling
from .errors import (
    BadMagic,
    FormatError,
    GeometryMismatch,
    GraphMismatch,
    PartialCoverage,
    ShapeMismatch,
    SphereSigError,
    TruncatedStream,
)
from .lens import (
    EquirectangularLens,
    FisheyeEquidistant,
    Pinhole,
    SphericalImage,
    build_raymap,
    project,
    unproject,
)
from .neighbors import Cap, KNearest, build_neighbor_graph, content_key
from .sampling import (
    Equirectangular,
    Fibonacci,
    HEALPix,
    PointSet,
    Polyhedral,
    QuasiRandom,
)

EXIT_USAGE = 2
EXIT_GEOMETRY = 3
EXIT_DATA = 4


class UsageError(Exception):
    pass


def _scheme_from_args(name: str, param: int):
    name = name.lower()
    if name in ("tetra", "hexa", "octa", "icosa"):
        return Polyhedral(base=name, n_side=param)
    if name == "healpix":
        return HEALPix(n_side=param)
    if name == "fibonacci":
        return Fibonacci(n=param)
    if name in ("quasi", "quasirandom"):
        return QuasiRandom(n=param)
    if name in ("equirect", "equirectangular"):
        # param is the row count; columns are 2x rows.
        return Equirectangular(rows=param, cols=2 * param)
    raise UsageError(f"unknown scheme {name!r}")


def _kernel_from_args(name: str, scale: float):
    name = name.lower()
    if name == "softmax":
        return interp.Softmax(temperature=scale)
    if name == "gaussian":
        return interp.Gaussian(sigma=scale)
    if name == "hann":
        return interp.Hann(support=scale)
    if name == "wendland":
        return interp.WendlandC2(support=scale)
    if name == "nearest":
        return interp.NearestExact()
    raise UsageError(f"unknown kernel {name!r}")


def _neighbors_from_args(text: str):
    try:
        kind, value = text.split(":", 1)
        if kind == "knn":
            return KNearest(k=int(value))
        if kind == "cap":
            return Cap(radius=float(value))
    except ValueError:
        pass
    raise UsageError(f"bad --neighbors {text!r}, expected knn:K or cap:R")


def cached_neighbor_graph(inputs: PointSet, outputs: PointSet, spec):
    """Build a neighbor graph, going through $USF_CACHE_DIR when set."""
    cache_dir = os.environ.get("USF_CACHE_DIR")
    if not cache_dir:
        return build_neighbor_graph(inputs, outputs, spec)
    path = Path(cache_dir) / (content_key(inputs, outputs, spec) + ".ngrf")
    if path.exists():
        return formats.read_ngrf(path)
    graph = build_neighbor_graph(inputs, outputs, spec)
    path.parent.mkdir(parents=True, exist_ok=True)
    formats.write_ngrf(path, graph)
    return graph


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_sample(args):
    scheme = _scheme_from_args(args.scheme, args.param)
    ps = sampling.generate_locations(scheme)
    formats.write_sphi(args.out, SphericalImage(locations=ps.points,
                                                values=np.empty((len(ps), 0))))
    spacing = sampling.mean_nn_distance(ps) if len(ps) >= 2 else float("nan")
    print(f"points={len(ps)} mean_nn_spacing={spacing:.6g}")
    return 0


def cmd_raymap(args):
    if args.model == "pinhole":
        lens = Pinhole(fx=args.fx, fy=args.fy, cx=args.width / 2.0,
                       cy=args.height / 2.0, width=args.width, height=args.height)
    elif args.model == "fisheye":
        lens = FisheyeEquidistant(fov=np.deg2rad(args.fov), width=args.width,
                                  height=args.height)
    elif args.model == "equirect":
        lens = EquirectangularLens(width=args.width, height=args.height)
    else:
        raise UsageError(f"unknown lens model {args.model!r}")
    rm = build_raymap(lens)
    formats.write_raym(args.out, rm)
    print(f"rays={rm.height}x{rm.width} valid={int(rm.valid.sum())}")
    return 0


def _load_planar(path):
    path = str(path)
    if path.endswith((".pgm", ".ppm")):
        return formats.read_pnm(path)
    return formats.read_plnr(path)


def cmd_project(args):
    rm = formats.read_raym(args.raymap)
    image = _load_planar(args.image)
    s = project(image, rm)
    formats.write_sphi(args.out, s)
    print(f"points={s.n_points} channels={s.channels}")
    return 0


def cmd_unproject(args):
    rm = formats.read_raym(args.raymap)
    s = formats.read_sphi(args.sphi)
    image = unproject(s, rm, fill=args.fill)
    formats.write_plnr(args.out, image)
    print(f"image={image.shape[0]}x{image.shape[1]}x{image.shape[2]}")
    return 0


def cmd_resample(args):
    s = formats.read_sphi(args.sphi)
    src = PointSet(points=s.locations)
    if args.scheme:
        if args.param:
            targets = sampling.generate_locations(
                _scheme_from_args(args.scheme, args.param))
        else:
            # Density matching plus FoV filtering by default.
            family = _scheme_from_args(args.scheme, 1)
            scheme = sampling.match_density(family, src, seed=args.seed)
            targets = sampling.generate_locations(scheme)
        targets = sampling.fov_filter(targets, src)
    else:
        raise UsageError("--scheme is required")
    scale = args.scale
    if scale is None:
        scale = sampling.mean_nn_distance(src)
    kernel = _kernel_from_args(args.kernel, scale)
    spec = _neighbors_from_args(args.neighbors)
    out = interp.resample(s, targets, kernel=kernel, spec=spec, fill=0.0)
    formats.write_sphi(args.out, out)
    print(f"points={out.n_points} channels={out.channels}")
    return 0


def cmd_rotate(args):
    s = formats.read_sphi(args.sphi)
    axis = np.array([float(t) for t in args.axis.split(",")])
    rot = geometry.rotation_from_axis_angle(axis, np.deg2rad(args.angle))
    scale = args.scale
    if scale is None:
        scale = sampling.mean_nn_distance(PointSet(points=s.locations))
    kernel = _kernel_from_args(args.kernel, scale)
    spec = _neighbors_from_args(args.neighbors)
    out = interp.rotate_spherical_image(s, rot, kernel=kernel, spec=spec)
    formats.write_sphi(args.out, out)
    print(f"points={out.n_points} channels={out.channels}")
    return 0


def cmd_train_mnist(args):
    if not learn.mnist_available(args.data_dir):
        print(f"missing MNIST IDX files in {args.data_dir}", file=sys.stderr)
        return EXIT_DATA
    cfg = learn.TrainConfig(
        data_dir=args.data_dir,
        variant=args.variant,
        n_train=args.n_train,
        n_test=args.n_test,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        metrics_path=args.metrics,
    )
    report = learn.train_spherical_mnist(cfg)
    model = report.pop("model")
    report.pop("grid")
    if args.out:
        tensors = {}
        for (i, name), arr in model.parameters().items():
            tensors[f"layer{i}.{name}"] = arr
        formats.write_usfw(args.out, tensors)
    print(json.dumps({k: v for k, v in report.items() if k != "history"}))
    return 0


def cmd_eval_mnist(args):
    if not learn.mnist_available(args.data_dir):
        print(f"missing MNIST IDX files in {args.data_dir}", file=sys.stderr)
        return EXIT_DATA
    rng = np.random.default_rng(args.seed)
    cfg = learn.TrainConfig(data_dir=args.data_dir, variant=args.variant,
                            seed=args.seed, n_test=args.n_test)
    model, grid = learn.build_classifier(cfg, rng)
    if args.checkpoint:
        tensors = formats.read_usfw(args.checkpoint)
        for (i, name), arr in model.parameters().items():
            arr[...] = tensors[f"layer{i}.{name}"]
    _, _, test_x, test_y = learn.load_mnist(args.data_dir)
    test_x, test_y = test_x[: args.n_test], test_y[: args.n_test]
    lift = learn.build_planar_lift(test_x.shape[1], test_x.shape[2], grid)
    xt = learn.lift_images(test_x, lift)
    if args.rotations == "random":
        xt = learn.rotate_batch(xt, grid, np.random.default_rng(args.seed + 1))
    acc = learn.evaluate(model, xt, test_y)
    print(json.dumps({"rotations": args.rotations, "accuracy": acc}))
    return 0


def cmd_spectral_check(args):
    rng = np.random.default_rng(args.seed)
    if args.direction_bins > 0:
        fn = ops.PwcDistanceDirection(dist_bins=args.distance_bins,
                                      dir_bins=args.direction_bins)
    else:
        fn = ops.PwcDistance(bins=args.distance_bins)
    ps = sampling.generate_locations(Fibonacci(args.points))
    # Wide default support so every distance bin is resolved by many
    # samples; narrow caps alias the lattice structure into the gains.
    radius = args.radius or 8.0 * sampling.mean_nn_distance(ps)
    spec = ops.KernelSpec(radius=radius, weight_fn=fn, in_channels=1,
                          out_channels=1)
    weights = ops.init_weight_table(spec, rng)
    gains = harmonics.zonal_spectral_check(spec, weights, args.points)
    if args.out:
        harmonics.gains_to_csv(gains, args.out)
    for ell in range(harmonics.L_MAX + 1):
        spread = harmonics.m_spread(gains, ell)
        print(f"l={ell} m_spread={spread:.6g}")
    return 0


def cmd_bench(args):
    rng = np.random.default_rng(args.seed)
    ps = sampling.generate_locations(Fibonacci(args.points))
    radius = 2.5 * sampling.mean_nn_distance(ps)
    fn = ops.PwcDistance(bins=3)
    spec = ops.KernelSpec(radius=radius, weight_fn=fn,
                          in_channels=args.channels, out_channels=args.channels)
    weights = ops.init_weight_table(spec, rng)
    x = SphericalImage(locations=ps.points,
                       values=rng.normal(size=(len(ps), args.channels)))

    t0 = time.perf_counter()
    graph = cached_neighbor_graph(ps, ps, Cap(radius=radius))
    ops.segment_reduce_fast_path(x, graph, spec, weights)
    cold = time.perf_counter() - t0

    warm_times = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        graph = cached_neighbor_graph(ps, ps, Cap(radius=radius))
        ops.segment_reduce_fast_path(x, graph, spec, weights)
        warm_times.append(time.perf_counter() - t0)
    warm = float(np.median(warm_times))

    t0 = time.perf_counter()
    ops.spherical_conv_forward(x, graph, spec, weights)
    naive = time.perf_counter() - t0
    t0 = time.perf_counter()
    ops.segment_reduce_fast_path(x, graph, spec, weights)
    fast = time.perf_counter() - t0

    report = {
        "points": args.points,
        "channels": args.channels,
        "cold_seconds": cold,
        "warm_seconds": warm,
        "cache_speedup": cold / warm if warm > 0 else float("inf"),
        "naive_forward_seconds": naive,
        "fast_forward_seconds": fast,
        "fast_path_speedup": naive / fast if fast > 0 else float("inf"),
    }
    print(json.dumps(report))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="spheresig",
                                description="Lens-agnostic spherical pipeline")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0,
                   help="cap BLAS worker threads (0 = library default)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", help="generate a point set")
    s.add_argument("--scheme", required=True)
    s.add_argument("--param", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("raymap", help="build a calibrated ray map")
    s.add_argument("--model", required=True,
                   choices=["pinhole", "fisheye", "equirect"])
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--fx", type=float, default=500.0)
    s.add_argument("--fy", type=float, default=500.0)
    s.add_argument("--fov", type=float, default=180.0, help="degrees")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_raymap)

    s = sub.add_parser("project", help="planar image -> spherical image")
    s.add_argument("--raymap", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("unproject", help="spherical image -> planar image")
    s.add_argument("--raymap", required=True)
    s.add_argument("--sphi", required=True)
    s.add_argument("--fill", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_unproject)

    s = sub.add_parser("resample", help="resample onto a new point set")
    s.add_argument("--sphi", required=True)
    s.add_argument("--scheme", required=True)
    s.add_argument("--param", type=int, default=0)
    s.add_argument("--kernel", default="gaussian")
    s.add_argument("--scale", type=float, default=None,
                   help="kernel sigma/temperature/support")
    s.add_argument("--neighbors", default="knn:4")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_resample)

    s = sub.add_parser("rotate", help="rotate then resample back")
    s.add_argument("--sphi", required=True)
    s.add_argument("--axis", default="0,0,1")
    s.add_argument("--angle", type=float, required=True, help="degrees")
    s.add_argument("--kernel", default="gaussian")
    s.add_argument("--scale", type=float, default=None)
    s.add_argument("--neighbors", default="knn:4")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rotate)

    s = sub.add_parser("train-mnist", help="train the spherical digit model")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--variant", default="radial",
                   choices=["radial", "directional"])
    s.add_argument("--n-train", type=int, default=6000)
    s.add_argument("--n-test", type=int, default=2000)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--batch-size", type=int, default=1024)
    s.add_argument("--metrics", default=None)
    s.add_argument("--out", default=None, help="checkpoint path (USFW)")
    s.set_defaults(func=cmd_train_mnist)

    s = sub.add_parser("eval-mnist", help="evaluate a digit checkpoint")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--variant", default="radial",
                   choices=["radial", "directional"])
    s.add_argument("--n-test", type=int, default=2000)
    s.add_argument("--rotations", default="0", choices=["0", "random"])
    s.set_defaults(func=cmd_eval_mnist)

    s = sub.add_parser("spectral-check", help="harmonic gain diagnostics")
    s.add_argument("--points", type=int, default=5000)
    s.add_argument("--distance-bins", type=int, default=3)
    s.add_argument("--direction-bins", type=int, default=0)
    s.add_argument("--radius", type=float, default=None)
    s.add_argument("--out", default=None, help="CSV path")
    s.set_defaults(func=cmd_spectral_check)

    s = sub.add_parser("bench", help="forward-pass and cache benchmarks")
    s.add_argument("--points", type=int, default=100000)
    s.add_argument("--channels", type=int, default=32)
    s.add_argument("--repeat", type=int, default=10)
    s.set_defaults(func=cmd_bench)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0,) else 0
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except (UsageError, BadMagic, TruncatedStream, FormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (GeometryMismatch, ShapeMismatch, GraphMismatch, PartialCoverage) as e:
        print(f"geometry error: {e}", file=sys.stderr)
        return EXIT_GEOMETRY
    except FileNotFoundError as e:
        print(f"missing data: {e}", file=sys.stderr)
        return EXIT_DATA
    except SphereSigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
