"""Bit-exact binary containers and planar image parsers.

All formats are little-endian with a 4-byte ASCII magic and a u32 version:

SPHI  spherical image: u64 N, u64 C, N*3 f32 locations, N*C f32 values
RAYM  ray map: u32 H, u32 W, H*W*3 f32 rays, H*W u8 validity
PLNR  raw planar image: u32 H, u32 W, u32 C, f32 data
NGRF  neighbor graph: u64 n_outputs, u64 n_edges, offsets u64, indices u64,
      distances f32, azimuths f32, flags u8
USFW  weight checkpoint: u32 tensor count; per tensor u16 name length,
      UTF-8 name, u8 rank, u64 dims, f32 data

PGM (P5) and PPM (P6) are parsed for planar image ingestion.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagic, FormatError, TruncatedStream
from .lens import RayMap, SphericalImage
from .neighbors import NeighborGraph


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedStream(f"expected {n} bytes, got {len(data)}")
    return data


def _check_magic(fh, magic: bytes):
    got = _read_exact(fh, 4)
    if got != magic:
        raise BadMagic(f"expected {magic!r}, got {got!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != 1:
        raise FormatError(f"unsupported version {version}")


def _read_array(fh, dtype, count):
    itemsize = np.dtype(dtype).itemsize
    return np.frombuffer(_read_exact(fh, count * itemsize), dtype=dtype).copy()


# -- SPHI -------------------------------------------------------------------


def write_sphi(path, s: SphericalImage):
    with open(path, "wb") as fh:
        fh.write(b"SPHI" + struct.pack("<I", 1))
        fh.write(struct.pack("<QQ", s.n_points, s.channels))
        fh.write(np.ascontiguousarray(s.locations, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(s.values, dtype="<f4").tobytes())


def read_sphi(path) -> SphericalImage:
    with open(path, "rb") as fh:
        _check_magic(fh, b"SPHI")
        n, c = struct.unpack("<QQ", _read_exact(fh, 16))
        loc = _read_array(fh, "<f4", n * 3).reshape(n, 3).astype(np.float64)
        vals = _read_array(fh, "<f4", n * c).reshape(n, c)
        norms = np.linalg.norm(loc, axis=1)
        if n and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise FormatError("locations not unit-norm within 1e-6")
        # Locations are kept exactly as stored (f32-quantized) so that
        # write -> read -> write round trips are bitwise identical.
        return SphericalImage(locations=loc, values=vals)


# -- RAYM -------------------------------------------------------------------


def write_raym(path, rm: RayMap):
    with open(path, "wb") as fh:
        fh.write(b"RAYM" + struct.pack("<I", 1))
        fh.write(struct.pack("<II", rm.height, rm.width))
        fh.write(np.ascontiguousarray(rm.rays, dtype="<f4").tobytes())
        fh.write(rm.valid.astype(np.uint8).tobytes())


def read_raym(path) -> RayMap:
    with open(path, "rb") as fh:
        _check_magic(fh, b"RAYM")
        h, w = struct.unpack("<II", _read_exact(fh, 8))
        rays = _read_array(fh, "<f4", h * w * 3).reshape(h, w, 3).astype(np.float64)
        valid = _read_array(fh, np.uint8, h * w).reshape(h, w) == 1
        return RayMap(rays=rays, valid=valid)


# -- PLNR -------------------------------------------------------------------


def write_plnr(path, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(b"PLNR" + struct.pack("<I", 1))
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_plnr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_magic(fh, b"PLNR")
        h, w, c = struct.unpack("<III", _read_exact(fh, 12))
        return _read_array(fh, "<f4", h * w * c).reshape(h, w, c)


# -- NGRF -------------------------------------------------------------------


def write_ngrf(path, g: NeighborGraph):
    with open(path, "wb") as fh:
        fh.write(b"NGRF" + struct.pack("<I", 1))
        fh.write(struct.pack("<QQ", g.n_outputs, g.n_edges))
        fh.write(np.ascontiguousarray(g.offsets, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(g.indices, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(g.distances, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(g.azimuths, dtype="<f4").tobytes())
        fh.write(g.degenerate.astype(np.uint8).tobytes())


def read_ngrf(path) -> NeighborGraph:
    with open(path, "rb") as fh:
        _check_magic(fh, b"NGRF")
        n_out, n_edges = struct.unpack("<QQ", _read_exact(fh, 16))
        offsets = _read_array(fh, "<u8", n_out + 1).astype(np.int64)
        indices = _read_array(fh, "<u8", n_edges).astype(np.int64)
        distances = _read_array(fh, "<f4", n_edges).astype(np.float64)
        azimuths = _read_array(fh, "<f4", n_edges).astype(np.float64)
        degenerate = _read_array(fh, np.uint8, n_edges) == 1
        return NeighborGraph(
            offsets=offsets,
            indices=indices,
            distances=distances,
            azimuths=azimuths,
            degenerate=degenerate,
        )


# -- USFW -------------------------------------------------------------------


def write_usfw(path, tensors: dict):
    """Write named float tensors; iteration order is preserved."""
    with open(path, "wb") as fh:
        fh.write(b"USFW" + struct.pack("<I", 1))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_usfw(path) -> dict:
    out = {}
    with open(path, "rb") as fh:
        _check_magic(fh, b"USFW")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            size = int(np.prod(dims)) if rank else 1
            out[name] = _read_array(fh, "<f4", size).reshape(dims)
    return out


# -- PGM / PPM --------------------------------------------------------------


def read_pnm(path) -> np.ndarray:
    """Parse binary PGM (P5) or PPM (P6) into float32 in [0, 1], H x W x C."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P5", b"P6"):
        raise BadMagic(f"not a binary PGM/PPM file: {data[:2]!r}")
    channels = 1 if data[:2] == b"P5" else 3
    # Header tokens: magic, width, height, maxval, with comments allowed.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedStream("incomplete PNM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    count = h * w * channels
    itemsize = 1 if maxval < 256 else 2
    raw = data[pos : pos + count * itemsize]
    if len(raw) != count * itemsize:
        raise TruncatedStream("PNM payload shorter than header promises")
    dtype = np.uint8 if itemsize == 1 else ">u2"
    img = np.frombuffer(raw, dtype=dtype).reshape(h, w, channels)
    return (img.astype(np.float32) / maxval).astype(np.float32)
