"""Procedural scene and sensor simulator.

Generates a watertight indoor scene, a smooth closed-loop trajectory, and
synchronized IMU / LiDAR / camera streams with ground-truth depth and poses.
Everything is seeded and bit-reproducible, which makes the simulator the
reference oracle for end-to-end runs: zero-noise streams must be exactly
consistent with the estimator's measurement models.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange

from .errors import DataError
from .geometry import mat_to_quat
from .rasterizer import Camera
from .spline import DEGREE, Trajectory

GRAVITY = 9.81
_BIN_HEADER = struct.Struct("<dI")  # scan stamp, point count


def _g(x: float) -> str:
    """Shortest decimal that round-trips a float64."""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# scene


def _box_tris(center, half) -> np.ndarray:
    """Twelve triangles of an axis-aligned box, two per face.

    Face order is fixed: +x, -x, +y, -y, +z, -z.  Callers rely on it to tag
    faces (the +x room wall doubles as the textureless target).
    """
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half, dtype=np.float64)
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                     dtype=np.float64)
    v = signs * h + c  # index bits: x*4 + y*2 + z
    quads = [(4, 5, 7, 6), (0, 2, 3, 1), (2, 6, 7, 3),
             (0, 1, 5, 4), (1, 3, 7, 5), (0, 4, 6, 2)]
    tris = []
    for a, b, cc, d in quads:
        tris.append(v[[a, b, cc]])
        tris.append(v[[a, cc, d]])
    return np.array(tris)


def _hash_noise(pts: np.ndarray, cell: float = 0.05) -> np.ndarray:
    """Deterministic per-cell noise in [-1, 1] from quantized position."""
    q = np.floor(pts / cell).astype(np.int64)
    h = (q[:, 0] * np.int64(73856093)) ^ (q[:, 1] * np.int64(19349663)) \
        ^ (q[:, 2] * np.int64(83492791))
    h = h & np.int64(0x7FFFFFFF)
    return (h % 65536).astype(np.float64) / 65535.0 * 2.0 - 1.0


@dataclass(eq=False)
class SyntheticScene:
    """Triangle soup with procedural per-face albedo.

    ``meta`` carries the room layout (half extents, loop radius, the
    textureless wall) that the trajectory generator builds against.
    """

    tris: np.ndarray  # (T, 3, 3) vertices
    base_color: np.ndarray  # (T, 3)
    checker_scale: np.ndarray  # (T,) metres per checker cell
    checker_strength: np.ndarray  # (T,) contrast, 0 = flat
    noise_strength: np.ndarray  # (T,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.tris = np.ascontiguousarray(self.tris, dtype=np.float64)
        t = self.tris
        self.v0 = np.ascontiguousarray(t[:, 0])
        self.e1 = np.ascontiguousarray(t[:, 1] - t[:, 0])
        self.e2 = np.ascontiguousarray(t[:, 2] - t[:, 0])
        n = np.cross(self.e1, self.e2)
        self.normals = n / np.linalg.norm(n, axis=1, keepdims=True)
        u = self.e1 / np.linalg.norm(self.e1, axis=1, keepdims=True)
        self.u_axis = u
        self.v_axis = np.cross(self.normals, u)

    def bbox(self):
        flat = self.tris.reshape(-1, 3)
        return flat.min(axis=0), flat.max(axis=0)

    def albedo(self, tri: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Surface color at hit points ``pts`` on triangles ``tri``."""
        tri = np.asarray(tri, dtype=np.int64)
        base = self.base_color[tri]
        u = np.einsum("ij,ij->i", pts, self.u_axis[tri]) / self.checker_scale[tri]
        v = np.einsum("ij,ij->i", pts, self.v_axis[tri]) / self.checker_scale[tri]
        parity = ((np.floor(u).astype(np.int64) + np.floor(v).astype(np.int64)) & 1)
        fac = 1.0 + self.checker_strength[tri] * (2.0 * parity - 1.0)
        col = base * fac[:, None]
        col = col + (self.noise_strength[tri] * _hash_noise(pts))[:, None]
        return np.clip(col, 0.0, 1.0)


@njit(parallel=True, fastmath=True, cache=True)
def _ray_kernel(orig, dirs, v0, e1, e2, t_out, tri_out):
    n_rays = orig.shape[0]
    n_tri = v0.shape[0]
    for i in prange(n_rays):
        ox, oy, oz = orig[i, 0], orig[i, 1], orig[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        best = np.inf
        hit = -1
        for k in range(n_tri):
            px = dy * e2[k, 2] - dz * e2[k, 1]
            py = dz * e2[k, 0] - dx * e2[k, 2]
            pz = dx * e2[k, 1] - dy * e2[k, 0]
            det = e1[k, 0] * px + e1[k, 1] * py + e1[k, 2] * pz
            if det > -1e-12 and det < 1e-12:
                continue
            inv = 1.0 / det
            tx = ox - v0[k, 0]
            ty = oy - v0[k, 1]
            tz = oz - v0[k, 2]
            u = (tx * px + ty * py + tz * pz) * inv
            if u < -1e-9 or u > 1.0 + 1e-9:
                continue
            qx = ty * e1[k, 2] - tz * e1[k, 1]
            qy = tz * e1[k, 0] - tx * e1[k, 2]
            qz = tx * e1[k, 1] - ty * e1[k, 0]
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < -1e-9 or u + v > 1.0 + 1e-9:
                continue
            t = (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * inv
            if t > 1e-9 and t < best:
                best = t
                hit = k
        t_out[i] = best
        tri_out[i] = hit


def cast_rays(scene: SyntheticScene, origins: np.ndarray, dirs: np.ndarray):
    """Nearest triangle hits.  Returns (t, tri) with tri == -1 on miss.

    ``t`` is in units of the direction length, so unit directions give
    euclidean range and camera-style directions with unit z give z-depth.
    """
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    n = dirs.shape[0]
    if origins.shape[0] == 1 and n > 1:
        origins = np.ascontiguousarray(np.broadcast_to(origins, (n, 3)))
    t = np.empty(n)
    tri = np.empty(n, dtype=np.int64)
    _ray_kernel(origins, dirs, scene.v0, scene.e1, scene.e2, t, tri)
    return t, tri


def generate_scene(seed: int) -> SyntheticScene:
    """Seeded watertight room with a pillar, corner boxes, checkered walls.

    The +x wall is textureless (uniform albedo, no checker, no noise); the
    trajectory's degenerate dwell faces it.  The six axis rays from the room
    centre are kept clear of clutter so wall distances stay analytic.
    """
    rng = np.random.default_rng([int(seed), 11])
    hx = rng.uniform(4.6, 5.8)
    hy = rng.uniform(4.0, 5.2)
    hgt = rng.uniform(3.0, 3.8)
    blocks = [_box_tris((0.0, 0.0, hgt / 2.0), (hx, hy, hgt / 2.0))]

    if rng.random() < 0.85:  # centre pillar, offset off the axis rays
        px = rng.uniform(0.6, 1.1) * (1 if rng.random() < 0.5 else -1)
        py = rng.uniform(0.6, 1.1) * (1 if rng.random() < 0.5 else -1)
        ph = rng.uniform(1.0, 1.5)
        blocks.append(_box_tris((px, py, ph / 2.0), (0.3, 0.3, ph / 2.0)))

    corners = [(1, 1), (1, -1), (-1, 1), (-1, -1)]
    rng.shuffle(corners)
    for sx, sy in corners[: int(rng.integers(2, 5))]:
        cx = sx * (hx - rng.uniform(0.75, 1.1))
        cy = sy * (hy - rng.uniform(0.75, 1.1))
        bh = rng.uniform(0.3, 0.9)
        half = (rng.uniform(0.25, 0.5), rng.uniform(0.25, 0.5), bh)
        blocks.append(_box_tris((cx, cy, bh), half))

    tris = np.concatenate(blocks)
    n_tri = len(tris)
    n_face = n_tri // 2
    face_base = rng.uniform(0.15, 0.85, size=(n_face, 3))
    face_scale = rng.uniform(0.35, 0.85, size=n_face)
    face_strength = rng.uniform(0.25, 0.45, size=n_face)
    face_noise = rng.uniform(0.02, 0.05, size=n_face)
    pair = np.arange(n_tri) // 2

    base = face_base[pair]
    scale = face_scale[pair]
    strength = face_strength[pair]
    noise = face_noise[pair]
    base[[0, 1]] = np.array([0.62, 0.60, 0.58])  # +x wall: flat gray
    strength[[0, 1]] = 0.0
    noise[[0, 1]] = 0.0

    meta = {
        "hx": hx, "hy": hy, "height": hgt,
        "loop_radius": min(hx, hy) - 1.8,
        "loop_height": 1.4,
        "wall_x": hx,
        "textureless": [0, 1],
    }
    return SyntheticScene(tris, base, scale, strength, noise, meta)


# ---------------------------------------------------------------------------
# ground-truth trajectory


def _look_at(forward: np.ndarray) -> np.ndarray:
    """World-from-body rotation with body x along ``forward``, z near up."""
    x = np.asarray(forward, dtype=np.float64)
    x = x / np.linalg.norm(x)
    y = np.cross([0.0, 0.0, 1.0], x)
    y = y / np.linalg.norm(y)
    z = np.cross(x, y)
    return np.column_stack([x, y, z])


_DEFAULT_META = {
    "hx": 5.0, "hy": 4.5, "height": 3.2,
    "loop_radius": 2.7, "loop_height": 1.4, "wall_x": 5.0,
}


def make_gt_trajectory(seed: int, duration: float, meta: dict | None = None,
                       degenerate: bool = True):
    """Closed-loop trajectory inside the room, returned with its info dict.

    The loop starts and ends stationary at the same pose (exact closure by
    control-point wrap-around), circles the room at roughly 1 m/s, and, when
    ``degenerate`` and time allows, detours to hover in front of the
    textureless +x wall while sliding sideways: the camera then sees a blank
    plane and the LiDAR a single surface.

    info keys: ``t_static`` (pose is constant on [0, t_static]) and
    ``degenerate`` ((t0, t1) of the fully wall-facing span, or None).
    """
    if meta is None:
        meta = _DEFAULT_META
    rng = np.random.default_rng([int(seed), 77])
    r = float(meta["loop_radius"])
    zc = float(meta["loop_height"])
    stand = float(meta["wall_x"]) - 1.15

    t_still = 2.5 if duration >= 10.0 else max(1.6, 0.25 * duration)
    budget = duration - 2.0 * t_still
    if budget < 1.0:
        raise ValueError(f"duration {duration} too short for a closed loop")
    want_detour = bool(degenerate) and budget >= 12.0

    spacing = 0.55
    dt = 0.6
    for _ in range(2):  # fixed-point: counts depend on dt, dt on counts
        n_static = int(np.ceil(t_still / dt)) + 3
        n_dwell = max(4, int(round(6.0 / dt))) if want_detour else 0
        l_detour = 2.0 * max(stand - r, 0.6) + 1.6 if want_detour else 0.0
        l_target = max(0.95 * budget - l_detour, 1.5)
        circ = 2.0 * np.pi * r
        if l_target < circ:
            n_laps, r_eff = 1, l_target / (2.0 * np.pi)
        else:
            n_laps, r_eff = max(1, int(round(l_target / circ))), r
        n_arc = max(12, int(round(n_laps * 2.0 * np.pi * r_eff / spacing)))
        n_det = (4 + n_dwell + 4) if want_detour else 0
        m = n_static + n_arc + n_det + 1
        dt = duration / m

    bob = 0.08
    bobf = 2.0 + rng.uniform(0.0, 1.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    p0 = np.array([r_eff, 0.0, zc])
    f0 = np.array([0.0, 1.0, 0.0])

    pts = [p0] * n_static
    fwds = [f0] * n_static
    for i in range(1, n_arc + 1):
        th = 2.0 * np.pi * n_laps * i / n_arc
        pts.append(np.array([r_eff * np.cos(th), r_eff * np.sin(th),
                             zc + bob * np.sin(bobf * th + phase)]))
        fwds.append(np.array([-np.sin(th), np.cos(th), 0.0]))
    dwell_lo = dwell_hi = None
    if want_detour:
        for k in range(1, 5):  # swing off the circle toward the wall
            s = k / 4.0
            ang = 0.5 * np.pi * (1.0 - s)
            pts.append(np.array([r_eff + (stand - r_eff) * s, -0.8 * s, zc]))
            fwds.append(np.array([np.cos(ang), np.sin(ang), 0.0]))
        dwell_lo = len(pts) - 1  # approach end already faces the wall
        for y in np.linspace(-0.8, 0.8, n_dwell + 1)[1:]:
            pts.append(np.array([stand, y, zc]))
            fwds.append(np.array([1.0, 0.0, 0.0]))
        dwell_hi = len(pts) - 1
        for k in range(1, 5):
            s = k / 4.0
            ang = 0.5 * np.pi * s
            pts.append(np.array([stand + (r_eff - stand) * s, 0.8 * (1.0 - s), zc]))
            fwds.append(np.array([np.cos(ang), np.sin(ang), 0.0]))
    pts.append(p0)
    fwds.append(f0)

    m = len(pts)
    quats = np.array([mat_to_quat(_look_at(f)) for f in fwds + fwds[:DEGREE]])
    trans = np.array(pts + pts[:DEGREE])
    knots = duration * np.arange(-DEGREE, m + DEGREE + 1, dtype=np.float64) / m
    traj = Trajectory(knots, quats, trans)

    info = {"t_static": duration * (n_static - DEGREE) / m, "degenerate": None}
    if want_detour:
        # segment s uses ctrl s..s+3; fully inside the dwell for s in
        # [dwell_lo, dwell_hi - 3], i.e. t in duration * [lo, hi - 2] / m
        info["degenerate"] = (duration * dwell_lo / m,
                              duration * (dwell_hi - 2) / m)
    return traj, info


def novel_body_poses(meta: dict, seed: int, count: int):
    """Held-out body poses near, but off, the training loop."""
    rng = np.random.default_rng([int(seed), 404])
    th = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
    th = th + rng.uniform(0.05, 0.25, size=count)
    r = float(meta["loop_radius"]) + 0.35
    z = float(meta["loop_height"]) + 0.25
    rots = np.empty((count, 3, 3))
    trans = np.empty((count, 3))
    beta = 0.35  # yaw the gaze off the tangent, toward the room
    for i, t in enumerate(th):
        tang = np.array([-np.sin(t), np.cos(t), 0.0])
        inward = np.array([-np.cos(t), -np.sin(t), 0.0])
        rots[i] = _look_at(np.cos(beta) * tang + np.sin(beta) * inward)
        trans[i] = [r * np.cos(t), r * np.sin(t), z]
    return rots, trans


# ---------------------------------------------------------------------------
# sensor rig and streams


@dataclass(eq=False)
class SensorRig:
    """Rates, noise levels, intrinsics and mounts of the simulated platform.

    Rates divide one another so every camera frame and scan boundary falls
    exactly on an IMU stamp.  Extrinsics map sensor to body coordinates.
    """

    imu_rate: float = 200.0
    lidar_rate: float = 10.0
    cam_rate: float = 20.0

    lidar_pattern: str = "raster"  # "raster" | "spinning"
    lidar_rows: int = 32
    lidar_cols: int = 60
    lidar_fov_az: float = 1.10  # full width, radians (raster)
    lidar_fov_el: float = 0.76
    lidar_sweep: float = 0.095  # active sweep within each period
    range_sigma: float = 0.02

    gyro_sigma: float = 0.01
    accel_sigma: float = 0.05
    gyro_walk: float = 1e-4
    accel_walk: float = 1e-3
    gyro_bias: np.ndarray = field(default_factory=lambda: np.array([0.002, -0.0015, 0.001]))
    accel_bias: np.ndarray = field(default_factory=lambda: np.array([0.05, -0.03, 0.02]))

    cam_width: int = 128
    cam_height: int = 96
    fx: float = 80.0
    fy: float = 80.0
    cx: float = 63.5
    cy: float = 47.5
    pixel_sigma: float = 0.5
    assoc_stride: int = 8

    rot_bl: np.ndarray = field(default_factory=lambda: np.eye(3))
    trans_bl: np.ndarray = field(default_factory=lambda: np.array([0.05, 0.0, 0.08]))
    rot_bc: np.ndarray = field(default_factory=lambda: np.array(
        [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]))
    trans_bc: np.ndarray = field(default_factory=lambda: np.array([0.10, 0.02, -0.03]))

    def __post_init__(self) -> None:
        if self.lidar_pattern not in ("raster", "spinning"):
            raise ValueError(f"unknown lidar pattern {self.lidar_pattern!r}")
        for name in ("gyro_bias", "accel_bias", "trans_bl", "trans_bc"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        for name in ("rot_bl", "rot_bc"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def camera(self, rot_cw: np.ndarray, trans_cw: np.ndarray) -> Camera:
        return Camera(self.cam_width, self.cam_height, self.fx, self.fy,
                      self.cx, self.cy, rot_cw, trans_cw)


@dataclass(eq=False)
class ImuStream:
    stamps: np.ndarray  # (n,)
    gyro: np.ndarray  # (n, 3) rad/s, body frame
    accel: np.ndarray  # (n, 3) m/s^2 specific force
    bias_gyro: np.ndarray | None = None  # true biases, simulation only
    bias_accel: np.ndarray | None = None


@dataclass(eq=False)
class LidarScan:
    """One sweep.  Directions are unit vectors in the LiDAR frame; per-point
    time is ``stamp + offsets``."""

    stamp: float
    offsets: np.ndarray  # (n,) float32 seconds into the sweep
    dirs: np.ndarray  # (n, 3) float32
    ranges: np.ndarray  # (n,) float32 metres

    def stamps(self) -> np.ndarray:
        return self.stamp + self.offsets.astype(np.float64)

    def points(self) -> np.ndarray:
        return self.dirs.astype(np.float64) * self.ranges.astype(np.float64)[:, None]


@dataclass(eq=False)
class CameraFrame:
    stamp: float
    image: np.ndarray  # (H, W, 3) float64, 8-bit quantized values k/255
    depth: np.ndarray  # (H, W) float32 ground-truth z-depth, eval only


@dataclass(eq=False)
class Association:
    """Known world points with (noisy) pixel observations for one frame."""

    points: np.ndarray  # (M, 3)
    pixels: np.ndarray  # (M, 2)


def _sensor_grid(t0: float, t_end: float, rate: float, margin: float = 0.0) -> np.ndarray:
    n = int(np.floor((t_end - t0 - margin) * rate + 1e-9)) + 1
    return t0 + np.arange(max(n, 0)) / rate


def simulate_imu(traj: Trajectory, rig: SensorRig, seed: int) -> ImuStream:
    """IMU measurements along the trajectory.

    gyro = omega_body + b_g + white noise; accel measures specific force
    R^T (a_world - g_world) + b_a + white noise with g = (0, 0, -9.81).
    Biases follow a random walk scaled by sqrt(dt).
    """
    stamps = _sensor_grid(traj.t_start, traj.t_end, rig.imu_rate)
    omega, _, acc = traj.query_body_rates(stamps)
    rot, _ = traj.query_pose(stamps)
    g_w = np.array([0.0, 0.0, -GRAVITY])
    force = np.einsum("nji,nj->ni", rot, acc - g_w)

    rng = np.random.default_rng([int(seed), 101])
    n = len(stamps)
    dt = 1.0 / rig.imu_rate
    step_g = rig.gyro_walk * np.sqrt(dt) * rng.standard_normal((n, 3))
    step_a = rig.accel_walk * np.sqrt(dt) * rng.standard_normal((n, 3))
    step_g[0] = 0.0
    step_a[0] = 0.0
    bias_g = rig.gyro_bias + np.cumsum(step_g, axis=0)
    bias_a = rig.accel_bias + np.cumsum(step_a, axis=0)
    gyro = omega + bias_g + rig.gyro_sigma * rng.standard_normal((n, 3))
    accel = force + bias_a + rig.accel_sigma * rng.standard_normal((n, 3))
    return ImuStream(stamps, gyro, accel, bias_g, bias_a)


def lidar_pattern(rig: SensorRig):
    """Unit directions (n, 3) in the LiDAR frame and sweep time offsets (n,)."""
    if rig.lidar_pattern == "raster":
        az = np.linspace(-rig.lidar_fov_az / 2.0, rig.lidar_fov_az / 2.0, rig.lidar_cols)
        el = np.linspace(-rig.lidar_fov_el / 2.0, rig.lidar_fov_el / 2.0, rig.lidar_rows)
        ee, aa = np.meshgrid(el, az, indexing="ij")
    else:  # spinning: full azimuth circle, one column per firing
        az = np.linspace(0.0, 2.0 * np.pi, rig.lidar_cols, endpoint=False)
        el = np.linspace(-rig.lidar_fov_el / 2.0, rig.lidar_fov_el / 2.0, rig.lidar_rows)
        aa, ee = np.meshgrid(az, el, indexing="ij")  # azimuth-major: beams fire together
    dirs = np.column_stack([
        (np.cos(ee) * np.cos(aa)).ravel(),
        (np.cos(ee) * np.sin(aa)).ravel(),
        np.sin(ee).ravel(),
    ])
    n = dirs.shape[0]
    if rig.lidar_pattern == "raster":
        offsets = rig.lidar_sweep * np.arange(n) / n
    else:
        offsets = np.repeat(rig.lidar_sweep * np.arange(rig.lidar_cols) / rig.lidar_cols,
                            rig.lidar_rows)
    return dirs, offsets


def simulate_lidar(traj: Trajectory, scene: SyntheticScene, rig: SensorRig,
                   seed: int) -> list[LidarScan]:
    """Ray-cast sweeps with per-point poses (motion distortion is real)."""
    dirs_l, offsets = lidar_pattern(rig)
    scan_starts = _sensor_grid(traj.t_start, traj.t_end, rig.lidar_rate,
                               margin=rig.lidar_sweep)
    rng = np.random.default_rng([int(seed), 202])
    scans = []
    for t_ref in scan_starts:
        stamps = t_ref + offsets
        rot, trans = traj.query_sensor_pose(stamps, rig.rot_bl, rig.trans_bl)
        dirs_w = np.einsum("nij,nj->ni", rot, dirs_l)
        rng_t, tri = cast_rays(scene, trans, dirs_w)
        keep = tri >= 0
        ranges = rng_t[keep] + rig.range_sigma * rng.standard_normal(int(keep.sum()))
        ok = ranges > 0.05
        scans.append(LidarScan(
            stamp=float(t_ref),
            offsets=offsets[keep][ok].astype(np.float32),
            dirs=dirs_l[keep][ok].astype(np.float32),
            ranges=ranges[ok].astype(np.float32),
        ))
    return scans


def render_view(scene: SyntheticScene, cam: Camera):
    """Ray-traced albedo image and z-depth for one camera. Global shutter.

    Pixel centres sit at integer coordinates.  Directions carry unit z in the
    camera frame, so the ray parameter is the z-depth directly.
    """
    h, w = cam.height, cam.width
    px, py = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    d_cam = np.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy,
                      np.ones_like(px)], axis=-1).reshape(-1, 3)
    rot_wc = cam.rot_cw.T
    center = cam.center()
    t, tri = cast_rays(scene, center, d_cam @ rot_wc.T)
    hit = tri >= 0
    depth = np.where(hit, t, 0.0)
    color = np.zeros((h * w, 3))
    if hit.any():
        pts = center + depth[hit, None] * (d_cam[hit] @ rot_wc.T)
        color[hit] = scene.albedo(tri[hit], pts)
    return color.reshape(h, w, 3), depth.reshape(h, w)


def _camera_at(traj: Trajectory, rig: SensorRig, t: float) -> Camera:
    rot_ws, t_ws = traj.query_sensor_pose(np.array([t]), rig.rot_bc, rig.trans_bc)
    rot_cw = rot_ws[0].T
    return rig.camera(rot_cw, -rot_cw @ t_ws[0])


def simulate_camera(traj: Trajectory, scene: SyntheticScene, rig: SensorRig) -> list[CameraFrame]:
    """Ray-traced frames at the camera rate, 8-bit quantized, float32 depth."""
    frames = []
    for t in _sensor_grid(traj.t_start, traj.t_end, rig.cam_rate):
        color, depth = render_view(scene, _camera_at(traj, rig, float(t)))
        image = np.round(np.clip(color, 0.0, 1.0) * 255.0) / 255.0
        frames.append(CameraFrame(float(t), image, depth.astype(np.float32)))
    return frames


def make_associations(frame: CameraFrame, cam: Camera, rig: SensorRig,
                      rng: np.random.Generator) -> Association:
    """World-point-to-pixel matches on a sparse grid with pixel noise."""
    us = np.arange(rig.assoc_stride // 2, rig.cam_width, rig.assoc_stride)
    vs = np.arange(rig.assoc_stride // 2, rig.cam_height, rig.assoc_stride)
    uu, vv = np.meshgrid(us.astype(np.float64), vs.astype(np.float64))
    uu, vv = uu.ravel(), vv.ravel()
    z = frame.depth[vv.astype(np.int64), uu.astype(np.int64)].astype(np.float64)
    good = z > 0.0
    uu, vv, z = uu[good], vv[good], z[good]
    p_cam = np.column_stack([(uu - cam.cx) * z / cam.fx,
                             (vv - cam.cy) * z / cam.fy, z])
    p_w = p_cam @ cam.rot_cw + cam.center()
    pix = np.column_stack([uu, vv]) + rig.pixel_sigma * rng.standard_normal((len(uu), 2))
    return Association(p_w, pix)


# ---------------------------------------------------------------------------
# dataset bundle


@dataclass(eq=False)
class Dataset:
    seed: int
    duration: float
    rig: SensorRig
    t_static: float
    degenerate: tuple | None
    imu: ImuStream
    scans: list
    frames: list
    assoc: list
    gt: np.ndarray  # (N, 8) rows t x y z qx qy qz qw


def simulate_dataset(seed: int, duration: float, rig: SensorRig | None = None,
                     degenerate: bool = True) -> Dataset:
    """Full seeded dataset: scene, loop trajectory, all three streams."""
    rig = rig if rig is not None else SensorRig()
    scene = generate_scene(seed)
    traj, info = make_gt_trajectory(seed, duration, meta=scene.meta,
                                    degenerate=degenerate)
    imu = simulate_imu(traj, rig, seed)
    scans = simulate_lidar(traj, scene, rig, seed)
    frames = simulate_camera(traj, scene, rig)
    assoc = []
    for k, frame in enumerate(frames):
        rng = np.random.default_rng([int(seed), 303, k])
        assoc.append(make_associations(frame, _camera_at(traj, rig, frame.stamp),
                                       rig, rng))
    return Dataset(int(seed), float(duration), rig, info["t_static"],
                   info["degenerate"], imu, scans, frames, assoc,
                   traj.sample_tum(imu.stamps))


# ---------------------------------------------------------------------------
# on-disk format


_MANIFEST_KEYS = [
    "format", "seed", "duration", "t_static", "degenerate", "gravity",
    "imu_rate", "lidar_rate", "cam_rate",
    "lidar_pattern", "lidar_rows", "lidar_cols",
    "lidar_fov_az", "lidar_fov_el", "lidar_sweep", "range_sigma",
    "gyro_sigma", "accel_sigma", "gyro_walk", "accel_walk",
    "gyro_bias", "accel_bias",
    "cam_width", "cam_height", "fx", "fy", "cx", "cy",
    "pixel_sigma", "assoc_stride",
    "rot_bl", "trans_bl", "rot_bc", "trans_bc",
    "n_imu", "n_scans", "n_frames",
]

_IMU_HEADER = "stamp,gx,gy,gz,ax,ay,az"
_ASSOC_HEADER = "x,y,z,u,v"


def _vec(a: np.ndarray) -> str:
    return " ".join(_g(x) for x in np.asarray(a, dtype=np.float64).ravel())


def _manifest_lines(ds: Dataset) -> list[str]:
    r = ds.rig
    deg = "none" if ds.degenerate is None else f"{_g(ds.degenerate[0])} {_g(ds.degenerate[1])}"
    vals = {
        "format": "1", "seed": str(ds.seed), "duration": _g(ds.duration),
        "t_static": _g(ds.t_static), "degenerate": deg, "gravity": _g(GRAVITY),
        "imu_rate": _g(r.imu_rate), "lidar_rate": _g(r.lidar_rate),
        "cam_rate": _g(r.cam_rate),
        "lidar_pattern": r.lidar_pattern, "lidar_rows": str(r.lidar_rows),
        "lidar_cols": str(r.lidar_cols),
        "lidar_fov_az": _g(r.lidar_fov_az), "lidar_fov_el": _g(r.lidar_fov_el),
        "lidar_sweep": _g(r.lidar_sweep), "range_sigma": _g(r.range_sigma),
        "gyro_sigma": _g(r.gyro_sigma), "accel_sigma": _g(r.accel_sigma),
        "gyro_walk": _g(r.gyro_walk), "accel_walk": _g(r.accel_walk),
        "gyro_bias": _vec(r.gyro_bias), "accel_bias": _vec(r.accel_bias),
        "cam_width": str(r.cam_width), "cam_height": str(r.cam_height),
        "fx": _g(r.fx), "fy": _g(r.fy), "cx": _g(r.cx), "cy": _g(r.cy),
        "pixel_sigma": _g(r.pixel_sigma), "assoc_stride": str(r.assoc_stride),
        "rot_bl": _vec(r.rot_bl), "trans_bl": _vec(r.trans_bl),
        "rot_bc": _vec(r.rot_bc), "trans_bc": _vec(r.trans_bc),
        "n_imu": str(len(ds.imu.stamps)), "n_scans": str(len(ds.scans)),
        "n_frames": str(len(ds.frames)),
    }
    return [f"{k}={vals[k]}" for k in _MANIFEST_KEYS]


def _parse_manifest(text: str, path) -> dict:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}: manifest line without '=': {line!r}")
        k, v = line.split("=", 1)
        if k in kv:
            raise DataError(f"{path}: duplicate manifest key {k!r}")
        kv[k] = v
    unknown = set(kv) - set(_MANIFEST_KEYS)
    if unknown:
        raise DataError(f"{path}: unknown manifest keys {sorted(unknown)}")
    missing = set(_MANIFEST_KEYS) - set(kv)
    if missing:
        raise DataError(f"{path}: missing manifest keys {sorted(missing)}")
    if kv["format"] != "1":
        raise DataError(f"{path}: unsupported format {kv['format']!r}")
    return kv


def _floats(s: str, n: int, path, key: str) -> np.ndarray:
    parts = s.split()
    if len(parts) != n:
        raise DataError(f"{path}: key {key!r} needs {n} numbers, got {len(parts)}")
    return np.array([float(p) for p in parts])


def export_dataset(path, ds: Dataset) -> None:
    """Write the directory layout: manifest.txt, imu.csv, gt_traj.tum,
    lidar/NNNN.bin, cam/NNNN.png, depth/NNNN.f32, cam_assoc/NNNN.csv."""
    from .io_formats import save_f32_grid, save_png

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for sub in ("lidar", "cam", "depth", "cam_assoc"):
        (root / sub).mkdir(exist_ok=True)

    (root / "manifest.txt").write_text("\n".join(_manifest_lines(ds)) + "\n")

    rows = [_IMU_HEADER]
    for s, g, a in zip(ds.imu.stamps, ds.imu.gyro, ds.imu.accel):
        rows.append(",".join([_g(s), _g(g[0]), _g(g[1]), _g(g[2]),
                              _g(a[0]), _g(a[1]), _g(a[2])]))
    (root / "imu.csv").write_text("\n".join(rows) + "\n")

    gt_rows = ["# t x y z qx qy qz qw"]
    for row in ds.gt:
        gt_rows.append(" ".join(f"{v:.9f}" for v in row))
    (root / "gt_traj.tum").write_text("\n".join(gt_rows) + "\n")

    for i, scan in enumerate(ds.scans):
        rec = np.empty((len(scan.ranges), 5), dtype="<f4")
        rec[:, 0] = scan.offsets
        rec[:, 1:4] = scan.dirs
        rec[:, 4] = scan.ranges
        with open(root / "lidar" / f"{i:04d}.bin", "wb") as f:
            f.write(_BIN_HEADER.pack(scan.stamp, len(scan.ranges)))
            f.write(rec.tobytes(order="C"))

    for i, frame in enumerate(ds.frames):
        save_png(root / "cam" / f"{i:04d}.png", frame.image)
        save_f32_grid(root / "depth" / f"{i:04d}.f32", frame.depth)

    for i, a in enumerate(ds.assoc):
        lines = [_ASSOC_HEADER]
        for p, q in zip(a.points, a.pixels):
            lines.append(",".join([_g(p[0]), _g(p[1]), _g(p[2]), _g(q[0]), _g(q[1])]))
        (root / "cam_assoc" / f"{i:04d}.csv").write_text("\n".join(lines) + "\n")


def _load_csv(path, header: str, n_cols: int) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0].strip() != header:
        raise DataError(f"{path}: expected header {header!r}")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != n_cols:
            raise DataError(f"{path}: row needs {n_cols} fields, got {len(parts)}")
        out.append([float(p) for p in parts])
    return np.array(out).reshape(-1, n_cols)


def _load_scan(path) -> LidarScan:
    raw = Path(path).read_bytes()
    if len(raw) < _BIN_HEADER.size:
        raise DataError(f"{path}: truncated scan header")
    stamp, n = _BIN_HEADER.unpack_from(raw)
    expect = _BIN_HEADER.size + 20 * n
    if len(raw) != expect:
        raise DataError(f"{path}: truncated scan ({len(raw)} != {expect} bytes)")
    rec = np.frombuffer(raw[_BIN_HEADER.size:], dtype="<f4").reshape(n, 5)
    return LidarScan(stamp, rec[:, 0].copy(), rec[:, 1:4].copy(), rec[:, 4].copy())


def load_dataset(path) -> Dataset:
    """Read a dataset directory back; inverse of :func:`export_dataset`.

    Strict: unknown or missing manifest keys, bad counts, truncated or
    malformed files all raise DataError.
    """
    from .io_formats import load_f32_grid, load_png

    root = Path(path)
    mpath = root / "manifest.txt"
    if not mpath.is_file():
        raise DataError(f"{mpath}: missing manifest")
    kv = _parse_manifest(mpath.read_text(), mpath)

    rig = SensorRig(
        imu_rate=float(kv["imu_rate"]), lidar_rate=float(kv["lidar_rate"]),
        cam_rate=float(kv["cam_rate"]), lidar_pattern=kv["lidar_pattern"],
        lidar_rows=int(kv["lidar_rows"]), lidar_cols=int(kv["lidar_cols"]),
        lidar_fov_az=float(kv["lidar_fov_az"]), lidar_fov_el=float(kv["lidar_fov_el"]),
        lidar_sweep=float(kv["lidar_sweep"]), range_sigma=float(kv["range_sigma"]),
        gyro_sigma=float(kv["gyro_sigma"]), accel_sigma=float(kv["accel_sigma"]),
        gyro_walk=float(kv["gyro_walk"]), accel_walk=float(kv["accel_walk"]),
        gyro_bias=_floats(kv["gyro_bias"], 3, mpath, "gyro_bias"),
        accel_bias=_floats(kv["accel_bias"], 3, mpath, "accel_bias"),
        cam_width=int(kv["cam_width"]), cam_height=int(kv["cam_height"]),
        fx=float(kv["fx"]), fy=float(kv["fy"]),
        cx=float(kv["cx"]), cy=float(kv["cy"]),
        pixel_sigma=float(kv["pixel_sigma"]), assoc_stride=int(kv["assoc_stride"]),
        rot_bl=_floats(kv["rot_bl"], 9, mpath, "rot_bl").reshape(3, 3),
        trans_bl=_floats(kv["trans_bl"], 3, mpath, "trans_bl"),
        rot_bc=_floats(kv["rot_bc"], 9, mpath, "rot_bc").reshape(3, 3),
        trans_bc=_floats(kv["trans_bc"], 3, mpath, "trans_bc"),
    )
    if float(kv["gravity"]) != GRAVITY:
        raise DataError(f"{mpath}: gravity {kv['gravity']} unsupported")
    degenerate = None
    if kv["degenerate"] != "none":
        d = _floats(kv["degenerate"], 2, mpath, "degenerate")
        degenerate = (float(d[0]), float(d[1]))

    n_imu, n_scans, n_frames = int(kv["n_imu"]), int(kv["n_scans"]), int(kv["n_frames"])

    table = _load_csv(root / "imu.csv", _IMU_HEADER, 7)
    if len(table) != n_imu:
        raise DataError(f"{root / 'imu.csv'}: {len(table)} rows, manifest says {n_imu}")
    imu = ImuStream(table[:, 0].copy(), table[:, 1:4].copy(), table[:, 4:7].copy())

    scans = [_load_scan(root / "lidar" / f"{i:04d}.bin") for i in range(n_scans)]

    frames = []
    for i in range(n_frames):
        try:
            image = load_png(root / "cam" / f"{i:04d}.png")
        except FileNotFoundError:
            raise DataError(f"{root / 'cam'}: missing frame {i:04d}.png")
        except OSError as e:
            raise DataError(f"{root / 'cam' / f'{i:04d}.png'}: {e}")
        depth = load_f32_grid(root / "depth" / f"{i:04d}.f32").astype(np.float32)
        if image.shape != (rig.cam_height, rig.cam_width, 3):
            raise DataError(f"{root / 'cam' / f'{i:04d}.png'}: shape {image.shape} "
                            f"does not match manifest intrinsics")
        frames.append(CameraFrame(float(i / rig.cam_rate), image, depth))

    assoc = []
    for i in range(n_frames):
        table = _load_csv(root / "cam_assoc" / f"{i:04d}.csv", _ASSOC_HEADER, 5)
        assoc.append(Association(table[:, 0:3].copy(), table[:, 3:5].copy()))

    gt_text = (root / "gt_traj.tum").read_text()
    gt_rows = []
    for line in gt_text.strip().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 8:
            raise DataError(f"{root / 'gt_traj.tum'}: row needs 8 fields, got {len(vals)}")
        gt_rows.append([float(v) for v in vals])
    gt = np.array(gt_rows).reshape(-1, 8)

    return Dataset(int(kv["seed"]), float(kv["duration"]), rig,
                   float(kv["t_static"]), degenerate, imu, scans, frames, assoc, gt)
