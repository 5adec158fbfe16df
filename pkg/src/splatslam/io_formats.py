"""On-disk formats shared across the package.

Three small formats cover everything the pipeline writes: 8-bit PNG for
color images, a headered binary grid for float32 rasters (depth, opacity),
and binary little-endian PLY for colored point clouds.  Plus the one-line
plain-text pose row used by trajectory files.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .geometry import mat_to_quat

# float32 grid: 8-byte magic + uint32 width + uint32 height, row-major data
GRID_MAGIC = b"F32GRID\x00"


def save_f32_grid(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim != 2:
        raise ValueError("grid must be 2-D")
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(grid.tobytes(order="C"))


def load_f32_grid(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != GRID_MAGIC:
        raise DataError(f"{path}: not a float32 grid file")
    w, h = struct.unpack("<II", raw[8:16])
    expect = 16 + 4 * w * h
    if len(raw) != expect:
        raise DataError(f"{path}: truncated grid ({len(raw)} != {expect} bytes)")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(h, w).astype(np.float64)


def save_png(path, image: np.ndarray) -> None:
    """Image in [0,1], HxW (gray) or HxWx3 (color), to 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_png(path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return arr


def save_point_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    """Colored point cloud, binary little-endian PLY (xyz float + rgb uchar)."""
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    rgb = np.round(np.clip(colors, 0.0, 1.0) * 255.0).astype(np.uint8)
    n = len(points)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
    rec["xyz"] = points
    rec["rgb"] = rgb
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def load_point_ply(path):
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise DataError(f"{path}: missing PLY header terminator")
    header = raw[:end].decode("ascii").splitlines()
    n = None
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    if n is None:
        raise DataError(f"{path}: no vertex element")
    body = raw[end + len(b"end_header\n"):]
    rec = np.frombuffer(body, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)], count=n)
    return rec["xyz"].astype(np.float64), rec["rgb"].astype(np.float64) / 255.0


def tum_row(t: float, rot: np.ndarray, trans: np.ndarray) -> str:
    """One trajectory row: timestamp, translation, quaternion (x y z w)."""
    q = mat_to_quat(np.asarray(rot, dtype=np.float64))
    tx, ty, tz = np.asarray(trans, dtype=np.float64)
    return (f"{t:.9f} {tx:.9f} {ty:.9f} {tz:.9f} "
            f"{q[1]:.9f} {q[2]:.9f} {q[3]:.9f} {q[0]:.9f}")


def parse_tum(text: str):
    """Rows of (t, rot 3x3, trans 3) from TUM-format trajectory text."""
    stamps, rots, transs = [], [], []
    from .geometry import quat_to_mat
    for line in text.strip().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 8:
            raise DataError(f"trajectory row needs 8 fields, got {len(vals)}")
        t, tx, ty, tz, qx, qy, qz, qw = vals
        stamps.append(t)
        rots.append(quat_to_mat(np.array([qw, qx, qy, qz])))
        transs.append([tx, ty, tz])
    return np.array(stamps), np.array(rots), np.array(transs)
