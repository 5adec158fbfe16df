"""Downstream applications: TSDF meshing, frame interpolation, and metrics.

TSDF fusion integrates rendered (or ground-truth) depth maps into a voxel
grid; marching cubes turns the grid into a colored triangle mesh.  The
metric trio (PSNR / SSIM / Depth-L1) is what every rendering regression in
this package reports.  LPIPS is intentionally absent: it would require a
pretrained network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .rasterizer import Camera, forward
from .spline import Trajectory

WEIGHT_CAP = 100.0


# ---------------------------------------------------------------------------
# TSDF volume


@dataclass(eq=False)
class TsdfVolume:
    """Dense truncated signed distance grid with per-voxel color.

    ``tsdf`` is normalized by the truncation band, so values live in
    [-1, 1]; ``weight`` counts fused observations up to a cap of 100.
    Voxel centres sit at ``origin + (index + 0.5) * voxel``.
    """

    origin: np.ndarray  # (3,) world position of the grid corner
    dims: tuple  # (nx, ny, nz)
    voxel: float = 0.05
    trunc_voxels: float = 4.0
    tsdf: np.ndarray = field(init=False)
    weight: np.ndarray = field(init=False)
    rgb: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=np.float64)
        nx, ny, nz = (int(d) for d in self.dims)
        self.dims = (nx, ny, nz)
        self.tsdf = np.ones((nx, ny, nz), dtype=np.float32)
        self.weight = np.zeros((nx, ny, nz), dtype=np.float32)
        self.rgb = np.zeros((nx, ny, nz, 3), dtype=np.float32)
        self._centers = None

    @property
    def trunc(self) -> float:
        return self.trunc_voxels * self.voxel

    @classmethod
    def for_bbox(cls, lo, hi, voxel: float = 0.05, pad_voxels: int = 2,
                 trunc_voxels: float = 4.0) -> "TsdfVolume":
        lo = np.asarray(lo, dtype=np.float64) - pad_voxels * voxel
        hi = np.asarray(hi, dtype=np.float64) + pad_voxels * voxel
        dims = tuple(int(np.ceil((hi[i] - lo[i]) / voxel)) for i in range(3))
        return cls(lo, dims, voxel, trunc_voxels)

    def centers(self) -> np.ndarray:
        """(nx*ny*nz, 3) voxel centre positions, cached."""
        if self._centers is None:
            nx, ny, nz = self.dims
            ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                     indexing="ij")
            idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)
            self._centers = self.origin + (idx + 0.5) * self.voxel
        return self._centers


def camera_pose_matrix(cam: Camera) -> np.ndarray:
    """4x4 camera-to-world pose from a rasterizer camera."""
    t = np.eye(4)
    t[:3, :3] = cam.rot_cw.T
    t[:3, 3] = cam.center()
    return t


def tsdf_fuse(volume: TsdfVolume, depth_map: np.ndarray, rgb: np.ndarray,
              cam_pose: np.ndarray, k: np.ndarray) -> None:
    """Projective TSDF update with a weighted running average.

    ``cam_pose`` is the 4x4 camera-to-world transform, ``k`` the 3x3
    intrinsic matrix.  Pixels with non-positive depth are treated as
    unobserved.  Voxels more than one truncation band behind the surface
    are left untouched.
    """
    depth_map = np.asarray(depth_map, dtype=np.float64)
    if not np.all(np.isfinite(depth_map)):
        raise ValueError("depth map must be finite")
    rgb = np.asarray(rgb, dtype=np.float64)
    cam_pose = np.asarray(cam_pose, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    rot_wc = cam_pose[:3, :3]
    center = cam_pose[:3, 3]
    fx, fy, cx, cy = k[0, 0], k[1, 1], k[0, 2], k[1, 2]
    h, w = depth_map.shape

    p_cam = (volume.centers() - center) @ rot_wc  # R_cw (p - C), row form
    z = p_cam[:, 2]
    valid = z > 1e-6
    u = np.round(fx * p_cam[:, 0] / np.where(valid, z, 1.0) + cx).astype(np.int64)
    v = np.round(fy * p_cam[:, 1] / np.where(valid, z, 1.0) + cy).astype(np.int64)
    valid &= (u >= 0) & (u < w) & (v >= 0) & (v < h)
    d_meas = np.zeros(len(z))
    d_meas[valid] = depth_map[v[valid], u[valid]]
    valid &= d_meas > 0.0

    sdf = d_meas - z
    valid &= sdf > -volume.trunc
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return
    new_t = np.clip(sdf[idx] / volume.trunc, -1.0, 1.0)
    new_c = rgb[v[idx], u[idx]]

    shape = volume.dims
    flat_t = volume.tsdf.reshape(-1)
    flat_w = volume.weight.reshape(-1)
    flat_c = volume.rgb.reshape(-1, 3)
    w_old = flat_w[idx].astype(np.float64)
    denom = w_old + 1.0
    flat_t[idx] = ((flat_t[idx].astype(np.float64) * w_old + new_t) / denom).astype(np.float32)
    flat_c[idx] = ((flat_c[idx].astype(np.float64) * w_old[:, None] + new_c)
                   / denom[:, None]).astype(np.float32)
    flat_w[idx] = np.minimum(denom, WEIGHT_CAP).astype(np.float32)
    volume.tsdf = flat_t.reshape(shape)
    volume.weight = flat_w.reshape(shape)
    volume.rgb = flat_c.reshape(*shape, 3)


def marching_cubes(volume: TsdfVolume):
    """Zero isosurface of the TSDF as (vertices, faces, colors).

    Vertices are in world coordinates; colors come from trilinear
    interpolation of the voxel rgb grid.  A volume without observed zero
    crossings yields an empty mesh.
    """
    from skimage import measure

    observed = volume.weight > 0.0
    if not observed.any():
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3))
    mask = None if observed.all() else observed
    try:
        verts, faces, _, _ = measure.marching_cubes(
            volume.tsdf.astype(np.float64), level=0.0,
            spacing=(volume.voxel,) * 3, mask=mask)
    except (ValueError, RuntimeError):  # no crossing in the observed region
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3))

    grid_idx = (verts / volume.voxel).T  # trilinear sample coordinates
    colors = np.stack([
        map_coordinates(volume.rgb[..., ch].astype(np.float64), grid_idx,
                        order=1, mode="nearest")
        for ch in range(3)
    ], axis=1)
    world = volume.origin + 0.5 * volume.voxel + verts
    return world, faces.astype(np.int64), np.clip(colors, 0.0, 1.0)


# ---------------------------------------------------------------------------
# geometry helpers


def point_mesh_distance(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Exact unsigned distance from each point to the nearest triangle."""
    points = np.asarray(points, dtype=np.float64)
    best = np.full(len(points), np.inf)
    for tri in np.asarray(tris, dtype=np.float64):
        best = np.minimum(best, _point_tri_distance(points, tri))
    return best


def _point_tri_distance(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    a, b, c = tri
    e0, e1 = b - a, c - a
    n = np.cross(e0, e1)
    nn = n @ n
    v = p - a
    d00, d01, d11 = e0 @ e0, e0 @ e1, e1 @ e1
    d20, d21 = v @ e0, v @ e1
    den = d00 * d11 - d01 * d01
    u = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    inside = (u >= 0.0) & (w >= 0.0) & (u + w <= 1.0)
    plane = np.abs(v @ n) / np.sqrt(nn)

    def seg(p0, p1):
        e = p1 - p0
        t = np.clip((p - p0) @ e / (e @ e), 0.0, 1.0)
        return np.linalg.norm(p - p0 - t[:, None] * e, axis=1)

    edge = np.minimum(np.minimum(seg(a, b), seg(a, c)), seg(b, c))
    return np.where(inside, plane, edge)


# ---------------------------------------------------------------------------
# frame interpolation


def interpolate_frames(traj: Trajectory, gmap, timestamps, cam: Camera,
                       rot_bc: np.ndarray, trans_bc: np.ndarray) -> list:
    """Render the map at arbitrary trajectory times (e.g. frame doubling).

    For each t the camera pose is queried from the continuous trajectory via
    the camera extrinsic, so timestamps between keyframes give genuinely
    interpolated views.  Out-of-range timestamps raise DomainError.
    """
    ts = np.asarray(timestamps, dtype=np.float64).reshape(-1)
    rot_ws, t_ws = traj.query_sensor_pose(ts, rot_bc, trans_bc)
    frames = []
    for i in range(len(ts)):
        rot_cw = rot_ws[i].T
        out = forward(gmap, cam.with_pose(rot_cw, -rot_cw @ t_ws[i]))
        frames.append(out.color)
    return frames


# ---------------------------------------------------------------------------
# metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB with MAX = 1. Identical inputs
    give float('inf')."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_plane(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    c1, c2 = 0.01 ** 2, 0.03 ** 2  # dynamic range 1
    sig = 1.5
    mu_a = gaussian_filter(a, sig)
    mu_b = gaussian_filter(b, sig)
    var_a = gaussian_filter(a * a, sig) - mu_a * mu_a
    var_b = gaussian_filter(b * b, sig) - mu_b * mu_b
    cov = gaussian_filter(a * b, sig) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity (gaussian window, sigma 1.5, L = 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return float(np.mean(_ssim_plane(a, b)))
    planes = [np.mean(_ssim_plane(a[..., c], b[..., c])) for c in range(a.shape[2])]
    return float(np.mean(planes))


def depth_l1(pred: np.ndarray, gt: np.ndarray, valid_mask: np.ndarray) -> float:
    """Mean absolute depth error over the mask; NaN when nothing is valid."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(valid_mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != pred.shape:
        raise ValueError("depth_l1 inputs must share one shape")
    if not mask.any():
        return float("nan")  # undefined, deliberately not zero
    return float(np.mean(np.abs(pred[mask] - gt[mask])))


# ---------------------------------------------------------------------------
# exports


def save_mesh(path, verts: np.ndarray, faces: np.ndarray, colors: np.ndarray) -> None:
    """ASCII OBJ with per-vertex colors, plus a sibling PLY."""
    path = Path(path)
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    colors = np.clip(np.asarray(colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)

    lines = []
    for v, c in zip(verts, colors):
        lines.append(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}")
    for f in faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    path.write_text("\n".join(lines) + "\n")

    rgb8 = np.round(colors * 255.0).astype(np.uint8)
    ply = ["ply", "format ascii 1.0",
           f"element vertex {len(verts)}",
           "property float x", "property float y", "property float z",
           "property uchar red", "property uchar green", "property uchar blue",
           f"element face {len(faces)}",
           "property list uchar int vertex_indices", "end_header"]
    for v, c in zip(verts, rgb8):
        ply.append(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]} {c[1]} {c[2]}")
    for f in faces:
        ply.append(f"3 {f[0]} {f[1]} {f[2]}")
    path.with_suffix(".ply").write_text("\n".join(ply) + "\n")


def metrics_csv(path, rows) -> None:
    """Write (view_id, psnr, ssim, depth_l1) rows; inf and nan stay literal."""
    lines = ["view_id,psnr,ssim,depth_l1"]
    for view_id, p, s, d in rows:
        lines.append(f"{view_id},{p:.6f},{s:.6f},{d:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")
