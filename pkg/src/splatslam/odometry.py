"""Sliding-window continuous-time odometry.

Each 0.1 s segment appends fresh control points to the trajectory spline and
solves a nonlinear least-squares problem over those new control points plus
the current bias pair; everything older is frozen (hard freezing in place of
a marginalization prior).  Factors: LiDAR point-to-plane, IMU rates, bias
random walk, and one of two camera factors (reprojection or a photometric
pose residual against a rendered-map alignment).

Conventions: body pose T_wb(t) from the spline; rotation control-point
perturbations are right-multiplicative (matching Trajectory.pose_jacobians);
the gravity vector points down, g_w = (0, 0, -9.81).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .gaussians import GaussianMap
from .geometry import (align_gravity, exp_so3, hat, jr_inv_so3, log_so3,
                       quat_from_rotvec, quat_mul)
from .lidar_map import LidarPointMap, fit_planes_batch
from .losses import photometric_loss
from .rasterizer import Camera, forward, pose_backward
from .spline import Trajectory

GRAVITY = 9.81


@dataclass
class Extrinsics:
    """Rigid mounts, sensor-to-body: p_body = rot @ p_sensor + trans."""

    rot_bl: np.ndarray = field(default_factory=lambda: np.eye(3))
    trans_bl: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot_bc: np.ndarray = field(default_factory=lambda: np.eye(3))
    trans_bc: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class OdometryConfig:
    window: float = 0.1
    ctrl_per_segment: int = 2
    sigma_lidar: float = 0.02
    sigma_gyro: float = 0.01
    sigma_accel: float = 0.05
    sigma_bg_walk: float = 1e-4
    sigma_ba_walk: float = 1e-3
    sigma_pixel: float = 1.0
    sigma_c2_rot: float = 1e-2
    sigma_c2_trans: float = 1e-2
    huber_delta: float = 0.1
    max_iters: int = 20
    rel_tol: float = 1e-6
    plane_gate: float = 0.05
    plane_rms_gate: float = 0.02   # rms cluster thickness bound
    corr_gate: float = 0.30        # predicted point-to-plane rejection
    max_lidar_factors: int = 800
    reassoc_rounds: int = 2  # plane association rebuilds per window
    camera_mode: str = "option1"  # option1 | option2 | none
    track_iters: int = 30
    track_lr: float = 2e-3


# ---------------------------------------------------------------------------
# factor containers


@dataclass
class LidarFactors:
    points_l: np.ndarray  # (N, 3) in the LiDAR frame
    stamps: np.ndarray
    normals: np.ndarray  # (N, 3) world plane normals
    ds: np.ndarray  # (N,) plane offsets

    def __len__(self):
        return len(self.stamps)


@dataclass
class ImuFactors:
    stamps: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __len__(self):
        return len(self.stamps)


@dataclass
class ReprojFactors:
    stamp: float
    world_points: np.ndarray  # (M, 3)
    pixels: np.ndarray  # (M, 2)

    def __len__(self):
        return len(self.pixels)


@dataclass
class PhotometricFactor:
    stamp: float
    rot_ref: np.ndarray  # refined camera-to-world rotation
    trans_ref: np.ndarray


# ---------------------------------------------------------------------------
# initialization


def init_static(stamps, gyro, accel, motion_gate: float = 0.1):
    """Bias and gravity-aligned orientation from a stationary IMU buffer.

    Returns (rot_wb0, b_g, b_a).  The accelerometer at rest measures
    R^T (0,0,+9.81); the recovered rotation maps that onto +z.
    """
    gyro = np.asarray(gyro, dtype=np.float64)
    accel = np.asarray(accel, dtype=np.float64)
    if len(gyro) < 10:
        raise DataError("static init needs at least 10 IMU samples")
    if (np.max(np.std(gyro, axis=0)) > motion_gate
            or np.max(np.std(accel, axis=0)) > 10 * motion_gate):
        raise DataError("IMU buffer not stationary")
    b_g = gyro.mean(axis=0)
    mean_a = accel.mean(axis=0)
    rot_wb0 = align_gravity(mean_a)
    b_a = mean_a - rot_wb0.T @ np.array([0.0, 0.0, GRAVITY])
    return rot_wb0, b_g, b_a


# ---------------------------------------------------------------------------
# residuals and Jacobians
#
# Parameter layout: for n active control points starting at index `first`,
# columns [3i, 3i+3) hold rotation control point first+i, columns
# [3n + 3i, ...) its translation, then b_g and b_a (3 each).


def _layout_dim(traj: Trajectory, first: int) -> int:
    return 6 * (len(traj.rot_ctrl) - first) + 6


def _place(jac3, mask, cols, block):
    """Accumulate (N, rp, 3) blocks into per-factor Jacobian rows."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return
    rp = jac3.shape[1]
    jac3[idx[:, None, None], np.arange(rp)[None, :, None],
         cols[idx][:, None, None] + np.arange(3)[None, None, :]] += block[idx]


def lidar_residuals(traj: Trajectory, extr: Extrinsics, f: LidarFactors,
                    first: int):
    """Point-to-plane residuals r = n . p_w + d with control-point Jacobians."""
    rot, trans = traj.query_pose(f.stamps)
    v = f.points_l @ extr.rot_bl.T + extr.trans_bl
    p_w = np.einsum("nij,nj->ni", rot, v) + trans
    r = np.einsum("ni,ni->n", f.normals, p_w) + f.ds

    n = len(f)
    dim = _layout_dim(traj, first)
    n_act = (dim - 6) // 6
    jac = np.zeros((n, 1, dim))
    ctrl0, d_rot, d_trans = traj.pose_jacobians(f.stamps)
    # d(R v)/d eps_j = -R [v]x Phi_j
    rhat = rot @ hat(v)  # (N, 3, 3) = R [v]x
    n_rhat = np.einsum("ni,nij->nj", f.normals, rhat)
    for j in range(4):
        idx = ctrl0 + j
        mask = idx >= first
        cols = 3 * (idx - first)
        block = -np.einsum("nj,njk->nk", n_rhat, d_rot[:, j])[:, None, :]
        _place(jac, mask, cols, block)
        tblock = (d_trans[:, j, None] * f.normals)[:, None, :]
        _place(jac, mask, 3 * n_act + cols, tblock)
    return r, jac.reshape(n, dim)


def imu_residuals(traj: Trajectory, f: ImuFactors, b_g, b_a, first: int):
    """Gyro and accelerometer residuals (each (N, 3)) and their Jacobians."""
    omega, _, acc = traj.query_body_rates(f.stamps)
    rot, _ = traj.query_pose(f.stamps)
    g_w = np.array([0.0, 0.0, -GRAVITY])
    a_body = np.einsum("nji,nj->ni", rot, acc - g_w)
    r_g = omega - f.gyro + b_g
    r_a = a_body + b_a - f.accel

    n = len(f)
    dim = _layout_dim(traj, first)
    n_act = (dim - 6) // 6
    jg = np.zeros((n, 3, dim))
    ja = np.zeros((n, 3, dim))
    ctrl0, d_omega, dd_basis = traj.rate_jacobians(f.stamps)
    _, d_rot, _ = traj.pose_jacobians(f.stamps)
    ahat = hat(a_body)
    rot_t = np.swapaxes(rot, 1, 2)
    for j in range(4):
        idx = ctrl0 + j
        mask = idx >= first
        cols = 3 * (idx - first)
        _place(jg, mask, cols, d_omega[:, j])
        # d(R^T u)/d eps_j = [R^T u]x Phi_j
        _place(ja, mask, cols, ahat @ d_rot[:, j])
        _place(ja, mask, 3 * n_act + cols, dd_basis[:, j, None, None] * rot_t)
    jg[:, :, dim - 6 : dim - 3] = np.eye(3)
    ja[:, :, dim - 3 : dim] = np.eye(3)
    return r_g, jg, r_a, ja


def bias_residuals(b_g, b_a, b_g_prev, b_a_prev, dim: int):
    """Random-walk residual against the (frozen) previous window's biases."""
    r = np.concatenate([b_g - b_g_prev, b_a - b_a_prev])
    jac = np.zeros((6, dim))
    jac[:, dim - 6 :] = np.eye(6)
    return r, jac


def reproj_residuals(traj: Trajectory, extr: Extrinsics, f: ReprojFactors,
                     intrinsics, first: int, with_depth: bool = False):
    """Pinhole reprojection residuals for known world-point associations.

    Points behind the camera are dropped (rows removed).  With
    ``with_depth`` the per-point camera depths are returned as well (the
    robust loss gates on metric displacement, pixels * depth / focal).
    """
    fx, fy, cx, cy = intrinsics
    ts = np.full(len(f), f.stamp)
    rot, trans = traj.query_pose(ts)
    y = np.einsum("nji,nj->ni", rot, f.world_points - trans)
    p_c = (y - extr.trans_bc) @ extr.rot_bc
    keep = p_c[:, 2] > 0.01
    y, p_c = y[keep], p_c[keep]
    pix = f.pixels[keep]
    ts = ts[keep]
    m = len(p_c)
    dim = _layout_dim(traj, first)
    n_act = (dim - 6) // 6
    if m == 0:
        if with_depth:
            return np.zeros(0), np.zeros((0, dim)), np.zeros(0)
        return np.zeros(0), np.zeros((0, dim))
    x, yc, z = p_c[:, 0], p_c[:, 1], p_c[:, 2]
    r = np.stack([fx * x / z + cx - pix[:, 0], fy * yc / z + cy - pix[:, 1]],
                 axis=1)
    jproj = np.zeros((m, 2, 3))
    jproj[:, 0, 0] = fx / z
    jproj[:, 0, 2] = -fx * x / z**2
    jproj[:, 1, 1] = fy / z
    jproj[:, 1, 2] = -fy * yc / z**2
    jp = jproj @ extr.rot_bc.T  # d r / d y

    jac = np.zeros((m, 2, dim))
    ctrl0, d_rot, d_trans = traj.pose_jacobians(ts)
    rot_t = np.swapaxes(rot[keep], 1, 2)
    yhat = hat(y)
    for j in range(4):
        idx = ctrl0 + j
        mask = idx >= first
        cols = 3 * (idx - first)
        _place(jac, mask, cols, jp @ yhat @ d_rot[:, j])
        _place(jac, mask, 3 * n_act + cols,
               -d_trans[:, j, None, None] * (jp @ rot_t))
    if with_depth:
        return r.reshape(-1), jac.reshape(2 * m, dim), z
    return r.reshape(-1), jac.reshape(2 * m, dim)


def photometric_residuals(traj: Trajectory, extr: Extrinsics,
                          f: PhotometricFactor, first: int):
    """SO(3) x R^3 discrepancy between the spline camera pose and a refined one."""
    ts = np.array([f.stamp])
    rot, trans = traj.query_pose(ts)
    rot_wc = rot[0] @ extr.rot_bc
    p_wc = rot[0] @ extr.trans_bc + trans[0]
    x = log_so3((rot_wc @ f.rot_ref.T)[None])[0]
    r = np.concatenate([x, p_wc - f.trans_ref])

    dim = _layout_dim(traj, first)
    n_act = (dim - 6) // 6
    jac = np.zeros((6, dim))
    ctrl0, d_rot, d_trans = traj.pose_jacobians(ts)
    jrot = jr_inv_so3(x[None])[0] @ f.rot_ref @ extr.rot_bc.T
    tc_hat = rot[0] @ hat(extr.trans_bc[None])[0]
    for j in range(4):
        idx = int(ctrl0[0]) + j
        if idx < first:
            continue
        col = 3 * (idx - first)
        jac[0:3, col : col + 3] += jrot @ d_rot[0, j]
        jac[3:6, col : col + 3] += -tc_hat @ d_rot[0, j]
        tcol = 3 * n_act + col
        jac[3:6, tcol : tcol + 3] += d_trans[0, j] * np.eye(3)
    return r, jac


# ---------------------------------------------------------------------------
# photometric pose refinement (camera factor option 2)


def photometric_refine(gmap: GaussianMap, image: np.ndarray, cam: Camera,
                       n_iters: int = 30, lr: float = 2e-3,
                       grad_gate: float = 1.0 / 255.0, opac_gate: float = 0.5):
    """Adam on the camera pose tangent against the map rendering.

    The loss is the tracking loss (L1 and D-SSIM equally weighted); pixels
    with low image gradient or low rendered opacity are masked out.  The map
    is read-only.  Returns (rot_cw, trans_cw, final_loss).
    """
    gray = image.mean(axis=2)
    gy, gx = np.gradient(gray)
    img_mask = np.hypot(gx, gy) > grad_gate

    rot_cw = cam.rot_cw.copy()
    trans_cw = cam.trans_cw.copy()
    m = np.zeros(6)
    v = np.zeros(6)
    loss_val = np.inf
    for it in range(1, n_iters + 1):
        out = forward(gmap, cam.with_pose(rot_cw, trans_cw))
        loss_val, g_color = photometric_loss(out.color, image, lam=0.5)
        mask = (img_mask & (out.opacity > opac_gate)).astype(np.float64)
        g_color = g_color * mask[:, :, None]
        g = pose_backward(gmap, out, g_color)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**it)
        vhat = v / (1 - 0.999**it)
        step = -lr * mhat / (np.sqrt(vhat) + 1e-15)
        rot_cw = exp_so3(step[3:]) @ rot_cw
        trans_cw = exp_so3(step[3:]) @ trans_cw + step[:3]
    return rot_cw, trans_cw, float(loss_val)


# ---------------------------------------------------------------------------
# window optimization


def _huber_rho(s: np.ndarray, delta: float) -> np.ndarray:
    return np.where(s <= delta, s * s, delta * (2.0 * s - delta))


def _huber_weight(s: np.ndarray, delta: float) -> np.ndarray:
    w = np.ones_like(s)
    big = s > delta
    w[big] = delta / s[big]
    return w


@dataclass
class WindowResult:
    b_g: np.ndarray
    b_a: np.ndarray
    cost0: float
    cost: float
    iters: int
    n_lidar: int
    n_imu: int
    n_cam: int
    condition: float


def optimize_window(traj: Trajectory, first: int, extr: Extrinsics,
                    cfg: OdometryConfig, b_g, b_a, b_g_prev, b_a_prev,
                    lidar: LidarFactors | None, imu: ImuFactors | None,
                    reproj: ReprojFactors | None = None,
                    photo: PhotometricFactor | None = None,
                    intrinsics=None) -> WindowResult:
    """Levenberg-Marquardt over the active control points and current biases.

    LiDAR and reprojection blocks get a Huber loss (delta on the raw block
    norm) via IRLS reweighting; acceptance uses the true robust cost, so the
    cost trace is non-increasing across accepted steps by construction.
    """
    b_g = np.asarray(b_g, dtype=np.float64).copy()
    b_a = np.asarray(b_a, dtype=np.float64).copy()
    dim = _layout_dim(traj, first)
    n_act = (dim - 6) // 6
    delta = cfg.huber_delta

    def assemble():
        rows_r, rows_j, cost = [], [], 0.0
        if lidar is not None and len(lidar):
            r, jac = lidar_residuals(traj, extr, lidar, first)
            s = np.abs(r)
            cost += float(np.sum(_huber_rho(s, delta))) / cfg.sigma_lidar**2
            w = np.sqrt(_huber_weight(s, delta)) / cfg.sigma_lidar
            rows_r.append(r * w)
            rows_j.append(jac * w[:, None])
        if imu is not None and len(imu):
            r_g, jg, r_a, ja = imu_residuals(traj, imu, b_g, b_a, first)
            cost += float(np.sum((r_g / cfg.sigma_gyro) ** 2))
            cost += float(np.sum((r_a / cfg.sigma_accel) ** 2))
            rows_r.append(r_g.reshape(-1) / cfg.sigma_gyro)
            rows_j.append(jg.reshape(-1, dim) / cfg.sigma_gyro)
            rows_r.append(r_a.reshape(-1) / cfg.sigma_accel)
            rows_j.append(ja.reshape(-1, dim) / cfg.sigma_accel)
        r, jac = bias_residuals(b_g, b_a, b_g_prev, b_a_prev, dim)
        wb = np.repeat([1.0 / cfg.sigma_bg_walk, 1.0 / cfg.sigma_ba_walk], 3)
        cost += float(np.sum((r * wb) ** 2))
        rows_r.append(r * wb)
        rows_j.append(jac * wb[:, None])
        if reproj is not None and len(reproj):
            r, jac, z = reproj_residuals(traj, extr, reproj, intrinsics, first,
                                         with_depth=True)
            if len(r):
                # The robust gate is metric, so the per-block pixel threshold
                # is delta scaled by focal/depth (matches the LiDAR delta's
                # units instead of an absurd 0.1 px gate).
                s = np.linalg.norm(r.reshape(-1, 2), axis=1)
                d_px = delta * intrinsics[0] / z
                rho = np.where(s <= d_px, s * s, d_px * (2.0 * s - d_px))
                cost += float(np.sum(rho)) / cfg.sigma_pixel**2
                w = np.repeat(np.sqrt(np.minimum(1.0, d_px / np.maximum(s, 1e-12))), 2)
                rows_r.append(r * w / cfg.sigma_pixel)
                rows_j.append(jac * (w / cfg.sigma_pixel)[:, None])
        if photo is not None:
            r, jac = photometric_residuals(traj, extr, photo, first)
            wc = np.repeat([1.0 / cfg.sigma_c2_rot, 1.0 / cfg.sigma_c2_trans], 3)
            cost += float(np.sum((r * wc) ** 2))
            rows_r.append(r * wc)
            rows_j.append(jac * wc[:, None])
        return np.concatenate(rows_r), np.vstack(rows_j), cost

    def snapshot():
        return (traj.rot_ctrl[first:].copy(), traj.trans_ctrl[first:].copy(),
                b_g.copy(), b_a.copy())

    def apply_step(dx):
        rot_new = quat_mul(traj.rot_ctrl[first:],
                           quat_from_rotvec(dx[: 3 * n_act].reshape(-1, 3)))
        trans_new = traj.trans_ctrl[first:] + dx[3 * n_act : 6 * n_act].reshape(-1, 3)
        traj.set_control_points(first, rot_new, trans_new)
        return b_g + dx[dim - 6 : dim - 3], b_a + dx[dim - 3 :]

    lam = 1e-4
    _, _, cost = assemble()
    cost0 = cost
    it = 0
    cond = 0.0
    for it in range(1, cfg.max_iters + 1):
        r, jac, cost = assemble()
        h = jac.T @ jac
        g = jac.T @ r
        accepted = False
        for _ in range(8):
            damped = h + lam * np.diag(np.maximum(np.diag(h), 1e-12))
            try:
                dx = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            saved = snapshot()
            b_g, b_a = apply_step(dx)
            _, _, new_cost = assemble()
            if new_cost < cost:
                lam = max(lam / 3.0, 1e-10)
                accepted = True
                break
            traj.set_control_points(first, saved[0], saved[1])
            b_g, b_a = saved[2], saved[3]
            lam *= 10.0
            if lam > 1e8:
                break
        if not accepted:
            cond = float(np.linalg.cond(h))
            break
        if abs(cost - new_cost) <= cfg.rel_tol * max(cost, 1e-300):
            cost = new_cost
            break
        cost = new_cost
    _, _, cost = assemble()
    return WindowResult(b_g, b_a, cost0, cost, it,
                        len(lidar) if lidar else 0,
                        len(imu) if imu else 0,
                        (len(reproj) if reproj else 0) + (1 if photo else 0),
                        cond)


# ---------------------------------------------------------------------------
# driver


def _snap_to_domain(traj: Trajectory, ts: np.ndarray, tol: float = 1e-9):
    """Clamp stamps within float dust of the valid interval onto it."""
    ts = np.asarray(ts, dtype=np.float64).copy()
    lo, hi = traj.t_start, traj.t_end
    ts[(ts > hi) & (ts <= hi + tol)] = hi
    ts[(ts < lo) & (ts >= lo - tol)] = lo
    return ts


def transform_scan(traj: Trajectory, extr: Extrinsics, stamps: np.ndarray,
                   points_l: np.ndarray) -> np.ndarray:
    """Per-point motion-undistorted world coordinates."""
    rot, trans = traj.query_pose(stamps)
    v = points_l @ extr.rot_bl.T + extr.trans_bl
    return np.einsum("nij,nj->ni", rot, v) + trans


@dataclass
class SegmentDiag:
    t_end: float
    cost0: float
    cost: float
    iters: int
    n_lidar: int
    n_imu: int
    n_cam: int
    map_points: int
    wall_time: float


class Odometry:
    """Sequential estimation loop: one process_segment call per 0.1 s window."""

    def __init__(self, t0: float, rot0: np.ndarray, b_g: np.ndarray,
                 b_a: np.ndarray, cfg: OdometryConfig, extr: Extrinsics,
                 intrinsics=None, trans0: np.ndarray | None = None):
        self.cfg = cfg
        self.extr = extr
        self.intrinsics = intrinsics
        dt = cfg.window / cfg.ctrl_per_segment
        self.traj = Trajectory.constant(
            rot0, np.zeros(3) if trans0 is None else np.asarray(trans0, float),
            t0 - cfg.window, t0, dt)
        self.b_g = np.asarray(b_g, dtype=np.float64).copy()
        self.b_a = np.asarray(b_a, dtype=np.float64).copy()
        self.b_g_prev = self.b_g.copy()
        self.b_a_prev = self.b_a.copy()
        self.lidar_map = LidarPointMap()
        self.t_cur = t0
        self.diags: list[SegmentDiag] = []
        self.frame_index = 0

    def bootstrap_map(self, stamps: np.ndarray, points_l: np.ndarray) -> int:
        """Insert the first scan at the initial pose (no optimization)."""
        return self.lidar_map.insert(
            transform_scan(self.traj, self.extr, stamps, points_l))

    def _build_lidar_factors(self, stamps, points_l):
        if len(self.lidar_map) < 50:
            return None
        n = len(stamps)
        if n > self.cfg.max_lidar_factors:
            sel = np.linspace(0, n - 1, self.cfg.max_lidar_factors).astype(int)
            stamps, points_l = stamps[sel], points_l[sel]
        guess = transform_scan(self.traj, self.extr, stamps, points_l)
        neighbors, counts = self.lidar_map.knn_batch(guess, k=5)
        normals, ds, valid = fit_planes_batch(neighbors, counts,
                                              self.cfg.plane_gate,
                                              self.cfg.plane_rms_gate)
        # a predicted point far off its plane is a wrong correspondence,
        # not a measurement to be explained
        off = np.abs(np.einsum("ni,ni->n", guess, normals) + ds)
        valid &= off <= self.cfg.corr_gate
        if not np.any(valid):
            return None
        return LidarFactors(points_l[valid], stamps[valid], normals[valid],
                            ds[valid])

    def process_segment(self, t_end: float, imu_stamps, imu_gyro, imu_accel,
                        scan_stamps, scan_points, assoc=None,
                        gmap: GaussianMap | None = None,
                        camera: Camera | None = None,
                        image: np.ndarray | None = None,
                        image_stamp: float | None = None) -> SegmentDiag:
        """Extend the spline to t_end, optimize the new window, update the map.

        ``assoc`` is (world_points, pixels, stamp) for camera option 1;
        option 2 needs ``gmap`` (a read-only snapshot), ``camera`` (intrinsics
        plus the image size; pose fields ignored) and the ``image`` itself.
        """
        start = time.perf_counter()
        cfg = self.cfg
        self.traj.extend(t_end, cfg.ctrl_per_segment)
        # Active set: every control point whose basis support intersects the
        # new window, i.e. the appended points plus the three carried over
        # from the previous segment (cubic support).  Control point 0 stays
        # frozen always, anchoring the gauge to the initial pose.
        first = max(1, len(self.traj.rot_ctrl) - (cfg.ctrl_per_segment + 3))

        scan_stamps = _snap_to_domain(self.traj, scan_stamps)
        scan_points = np.asarray(scan_points, dtype=np.float64)
        imu = ImuFactors(_snap_to_domain(self.traj, imu_stamps),
                         np.asarray(imu_gyro, dtype=np.float64),
                         np.asarray(imu_accel, dtype=np.float64))

        reproj = None
        photo = None
        mode = cfg.camera_mode
        if mode == "option2" and (gmap is None or len(gmap) == 0):
            mode = "option1" if assoc is not None else "none"
        if mode == "option1" and assoc is not None:
            world_pts, pixels, stamp = assoc
            stamp = float(_snap_to_domain(self.traj, np.array([stamp]))[0])
            reproj = ReprojFactors(stamp, np.asarray(world_pts, float),
                                   np.asarray(pixels, float))
        elif mode == "option2" and image is not None:
            stamp = float(t_end) if image_stamp is None else float(image_stamp)
            stamp = float(_snap_to_domain(self.traj, np.array([stamp]))[0])
            rot_wb, p_wb = self.traj.query_pose(np.array([stamp]))
            rot_wc = rot_wb[0] @ self.extr.rot_bc
            p_wc = rot_wb[0] @ self.extr.trans_bc + p_wb[0]
            cam0 = camera.with_pose(rot_wc.T, -rot_wc.T @ p_wc)
            rot_cw, trans_cw, _ = photometric_refine(
                gmap, image, cam0, cfg.track_iters, cfg.track_lr)
            photo = PhotometricFactor(stamp, rot_cw.T, -rot_cw.T @ trans_cw)

        # Inertial prediction first: with only the appended control points
        # free, the IMU (and camera, when present) carries the pose through
        # the new window, so plane correspondences are searched from a
        # motion-consistent guess instead of constant extrapolation.
        b_g_cur, b_a_cur = self.b_g, self.b_a
        res = None
        if len(self.lidar_map) >= 50:
            first_new = max(first,
                            len(self.traj.rot_ctrl) - cfg.ctrl_per_segment)
            res = optimize_window(self.traj, first_new, self.extr, cfg,
                                  b_g_cur, b_a_cur, self.b_g_prev,
                                  self.b_a_prev, None, imu, reproj, photo,
                                  self.intrinsics)
            b_g_cur, b_a_cur = res.b_g, res.b_a
        lidar = None
        for _ in range(max(cfg.reassoc_rounds, 1)):
            lidar = self._build_lidar_factors(scan_stamps, scan_points)
            res = optimize_window(self.traj, first, self.extr, cfg, b_g_cur,
                                  b_a_cur, self.b_g_prev, self.b_a_prev,
                                  lidar, imu, reproj, photo, self.intrinsics)
            b_g_cur, b_a_cur = res.b_g, res.b_a
            if lidar is None:
                break  # map still too small to associate against
        self.b_g, self.b_a = b_g_cur, b_a_cur
        self.b_g_prev, self.b_a_prev = self.b_g.copy(), self.b_a.copy()

        if len(scan_stamps):
            self.lidar_map.insert(
                transform_scan(self.traj, self.extr, scan_stamps, scan_points))
        self.t_cur = t_end
        self.frame_index += 1
        diag = SegmentDiag(t_end, res.cost0, res.cost, res.iters, res.n_lidar,
                           res.n_imu, res.n_cam, len(self.lidar_map),
                           time.perf_counter() - start)
        self.diags.append(diag)
        return diag

    def camera_pose(self, t: float):
        ts = _snap_to_domain(self.traj, np.array([float(t)]))
        rot, trans = self.traj.query_sensor_pose(
            ts, self.extr.rot_bc, self.extr.trans_bc)
        return rot[0], trans[0]

    def diagnostics_csv(self) -> str:
        lines = ["t_end,cost0,cost,iters,n_lidar,n_imu,n_cam,map_points,wall_time"]
        for d in self.diags:
            lines.append(f"{d.t_end:.6f},{d.cost0:.6g},{d.cost:.6g},{d.iters},"
                         f"{d.n_lidar},{d.n_imu},{d.n_cam},{d.map_points},"
                         f"{d.wall_time:.4f}")
        return "\n".join(lines) + "\n"
