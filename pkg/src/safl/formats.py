"""Binary container formats for maps, checkpoints, features and difference matrices.

Every file starts with the magic ``b"SAFL"``, a single record-type byte and a
little-endian u32 format version.  Record types:

====  =======================  =================================================
byte  record                   payload
====  =======================  =================================================
V     3-D voxel grid           u32 G, f32 cell_size, f32[3] origin, G**3 bytes
T     top-view image           u32 H, u32 W, f32 cell_size, f32[3] origin,
                               H*W float32
C     checkpoint               u32 tensor count, then per tensor: u32 name
                               length, utf-8 name, u8 rank, u32 per dim,
                               float32 payload
F     feature sequence         u32 frame count, u32 feature dim, count*dim
                               float32
D     difference matrix        u32 rows, u32 cols, rows*cols float32
====  =======================  =================================================

All integers and floats are little-endian.  Float payloads are written exactly
as provided (float32), so write/read round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SAFL"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised when a file does not parse as the expected record type."""


class FormatVersionMismatch(FormatError):
    """Raised when the file's format version differs from FORMAT_VERSION."""


def _write_header(f, record_type: bytes) -> None:
    f.write(MAGIC)
    f.write(record_type)
    f.write(struct.pack("<I", FORMAT_VERSION))


def _read_header(f, record_type: bytes, path) -> None:
    magic = f.read(4)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    rtype = f.read(1)
    if rtype != record_type:
        raise FormatError(
            f"{path}: record type {rtype!r}, expected {record_type!r}"
        )
    (version,) = struct.unpack("<I", f.read(4))
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )


def _read_exact(f, n: int, path) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated file, wanted {n} more bytes")
    return data


# ---------------------------------------------------------------------------
# voxel grids ('V')

def write_voxel_grid(path, occupancy: np.ndarray, cell_size: float,
                     origin: np.ndarray) -> None:
    """Write a cubic binary occupancy grid.  occupancy must be (G, G, G)."""
    occ = np.ascontiguousarray(occupancy, dtype=np.uint8)
    if occ.ndim != 3 or len(set(occ.shape)) != 1:
        raise FormatError(f"voxel grid must be cubic, got shape {occ.shape}")
    g = occ.shape[0]
    with open(path, "wb") as f:
        _write_header(f, b"V")
        f.write(struct.pack("<If", g, float(cell_size)))
        f.write(np.asarray(origin, dtype="<f4").tobytes())
        f.write(occ.tobytes())


def read_voxel_grid(path):
    """Read a 'V' record.  Returns (occupancy uint8 (G,G,G), cell_size, origin)."""
    with open(path, "rb") as f:
        _read_header(f, b"V", path)
        g, cell_size = struct.unpack("<If", _read_exact(f, 8, path))
        origin = np.frombuffer(_read_exact(f, 12, path), dtype="<f4").copy()
        occ = np.frombuffer(_read_exact(f, g ** 3, path), dtype=np.uint8)
    return occ.reshape(g, g, g).copy(), cell_size, origin


# ---------------------------------------------------------------------------
# top views ('T')

def write_top_view(path, pixels: np.ndarray, cell_size: float,
                   origin: np.ndarray) -> None:
    pix = np.ascontiguousarray(pixels, dtype="<f4")
    if pix.ndim != 2:
        raise FormatError(f"top view must be 2-D, got shape {pix.shape}")
    h, w = pix.shape
    with open(path, "wb") as f:
        _write_header(f, b"T")
        f.write(struct.pack("<IIf", h, w, float(cell_size)))
        f.write(np.asarray(origin, dtype="<f4").tobytes())
        f.write(pix.tobytes())


def read_top_view(path):
    """Read a 'T' record.  Returns (pixels float32 (H,W), cell_size, origin)."""
    with open(path, "rb") as f:
        _read_header(f, b"T", path)
        h, w, cell_size = struct.unpack("<IIf", _read_exact(f, 12, path))
        origin = np.frombuffer(_read_exact(f, 12, path), dtype="<f4").copy()
        pix = np.frombuffer(_read_exact(f, h * w * 4, path), dtype="<f4")
    return pix.reshape(h, w).copy(), cell_size, origin


# ---------------------------------------------------------------------------
# checkpoints ('C')

def write_checkpoint(path, tensors: dict) -> None:
    """Write named float32 tensors in insertion order."""
    with open(path, "wb") as f:
        _write_header(f, b"C")
        f.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            # ascontiguousarray would promote rank-0 tensors to rank-1
            arr = np.asarray(value, dtype="<f4")
            if not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.tobytes())


def read_checkpoint(path) -> dict:
    """Read a 'C' record into an ordered {name: float32 ndarray} dict."""
    tensors = {}
    with open(path, "rb") as f:
        _read_header(f, b"C", path)
        (count,) = struct.unpack("<I", _read_exact(f, 4, path))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, path))
            name = _read_exact(f, name_len, path).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, path))
            shape = struct.unpack(
                f"<{rank}I", _read_exact(f, 4 * rank, path)
            ) if rank else ()
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            data = np.frombuffer(_read_exact(f, 4 * n, path), dtype="<f4")
            tensors[name] = data.reshape(shape).copy()
    return tensors


# ---------------------------------------------------------------------------
# feature sequences ('F')

def write_features(path, features: np.ndarray) -> None:
    feats = np.ascontiguousarray(features, dtype="<f4")
    if feats.ndim != 2:
        raise FormatError(f"features must be (count, dim), got {feats.shape}")
    with open(path, "wb") as f:
        _write_header(f, b"F")
        f.write(struct.pack("<II", feats.shape[0], feats.shape[1]))
        f.write(feats.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        _read_header(f, b"F", path)
        count, dim = struct.unpack("<II", _read_exact(f, 8, path))
        data = np.frombuffer(_read_exact(f, count * dim * 4, path), dtype="<f4")
    return data.reshape(count, dim).copy()


# ---------------------------------------------------------------------------
# difference matrices ('D')

def write_difference_matrix(path, matrix: np.ndarray) -> None:
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim != 2:
        raise FormatError(f"difference matrix must be 2-D, got {mat.shape}")
    with open(path, "wb") as f:
        _write_header(f, b"D")
        f.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        f.write(mat.tobytes())


def read_difference_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        _read_header(f, b"D", path)
        rows, cols = struct.unpack("<II", _read_exact(f, 8, path))
        data = np.frombuffer(_read_exact(f, rows * cols * 4, path), dtype="<f4")
    return data.reshape(rows, cols).copy()
