"""Command-line pipeline: simulate, slam, render, eval, mesh, interp.

Every subcommand reads a RunConfig (defaults <- --config file <- --set
overrides <- dedicated flags), writes all products under one output
directory, and leaves a plain-text ``summary.txt`` index there.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import queue
import sys
import threading
import time
from collections import deque
from dataclasses import replace
from pathlib import Path

import numpy as np

from .apps import (camera_pose_matrix, depth_l1, interpolate_frames,
                   marching_cubes, metrics_csv, psnr, save_mesh, ssim,
                   tsdf_fuse, TsdfVolume)
from .config import RunConfig, config_text, resolve
from .errors import (ConfigError, DataError, DomainError, NumericalError,
                     SplatSlamError)
from .gaussians import GaussianMap
from .geometry import mat_to_quat, quat_to_mat
from .mapper import Mapper, build_keyframe, mapping_loop, save_keyframe
from .odometry import Extrinsics, Odometry, transform_scan, GRAVITY
from .rasterizer import Camera, forward
from .simulator import (export_dataset, generate_scene, load_dataset,
                        novel_body_poses, render_view, simulate_dataset)
from .spline import Trajectory
from .io_formats import save_f32_grid, save_png

_MAP_ARRAYS = ("pos", "log_scale", "quat", "opacity_logit", "sh_low", "sh_high")
_SPLINE_ARRAYS = ("knots", "rot_ctrl", "trans_ctrl")


# ---------------------------------------------------------------------------
# shared helpers


def _ensure_dir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".9g")
    return str(v)


def write_summary(out_dir, pairs: dict) -> Path:
    path = Path(out_dir) / "summary.txt"
    lines = [f"{k}={_fmt_value(v)}" for k, v in pairs.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_summary(out_dir) -> dict:
    path = Path(out_dir) / "summary.txt"
    if not path.is_file():
        raise DataError(f"missing summary: {path}")
    pairs = {}
    for line in path.read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            pairs[k] = v
    return pairs


def save_map(dirpath, gmap: GaussianMap) -> None:
    d = _ensure_dir(dirpath)
    for name in _MAP_ARRAYS:
        np.save(d / f"{name}.npy", getattr(gmap, name))


def load_map(dirpath) -> GaussianMap:
    d = Path(dirpath)
    arrays = {}
    for name in _MAP_ARRAYS:
        p = d / f"{name}.npy"
        if not p.is_file():
            raise DataError(f"missing map array: {p}")
        arrays[name] = np.load(p)
    return GaussianMap(**arrays)


def save_spline(dirpath, traj: Trajectory) -> None:
    d = _ensure_dir(dirpath)
    np.save(d / "knots.npy", traj.knots)
    np.save(d / "rot_ctrl.npy", traj.rot_ctrl)
    np.save(d / "trans_ctrl.npy", traj.trans_ctrl)


def load_spline(dirpath) -> Trajectory:
    d = Path(dirpath)
    arrays = []
    for name in _SPLINE_ARRAYS:
        p = d / f"{name}.npy"
        if not p.is_file():
            raise DataError(f"missing trajectory array: {p}")
        arrays.append(np.load(p))
    return Trajectory(*arrays)


def load_slam_products(slam_dir):
    d = Path(slam_dir)
    if not d.is_dir():
        raise DataError(f"slam run directory not found: {d}")
    return load_spline(d / "spline"), load_map(d / "map")


def _extrinsics(rig) -> Extrinsics:
    return Extrinsics(rot_bl=rig.rot_bl, trans_bl=rig.trans_bl,
                      rot_bc=rig.rot_bc, trans_bc=rig.trans_bc)


def _camera_from_body(rig, rot_wb: np.ndarray, p_wb: np.ndarray) -> Camera:
    rot_wc = rot_wb @ rig.rot_bc
    center = rot_wb @ rig.trans_bc + p_wb
    return rig.camera(rot_wc.T, -rot_wc.T @ center)


def _clamp_to_domain(traj: Trajectory, stamps, tol: float = 1e-6):
    """Absorb ulp-scale mismatch between sensor stamps and the spline domain.

    Incremental knot placement accumulates rounding, so the estimated
    trajectory can end a few ulp before the final sensor stamp.  Anything
    beyond ``tol`` is a genuine range error and still raises downstream.
    """
    ts = np.asarray(stamps, dtype=np.float64)
    lo, hi = traj.t_start, traj.t_end
    return np.clip(ts, np.where(ts >= lo - tol, lo, ts),
                   np.where(ts <= hi + tol, hi, ts))


def _spline_camera(traj: Trajectory, rig, stamp: float) -> Camera:
    ts = _clamp_to_domain(traj, [float(stamp)])
    rot_wc, center = traj.query_sensor_pose(ts, rig.rot_bc, rig.trans_bc)
    return rig.camera(rot_wc[0].T, -rot_wc[0].T @ center[0])


def _render_map_view(gmap: GaussianMap, cam: Camera):
    """Color, normalized depth (0 where unobserved) and a validity mask."""
    out = forward(gmap, cam)
    opac = out.opacity
    valid = opac > 0.5
    depth = np.where(valid, out.depth / np.maximum(opac, 1e-12), 0.0)
    return np.clip(out.color, 0.0, 1.0), depth, valid


def _gt_body_pose(ds, stamp: float):
    idx = int(round(float(stamp) * ds.rig.imu_rate))
    if not 0 <= idx < len(ds.gt):
        raise DataError(f"stamp {stamp} outside ground-truth range")
    row = ds.gt[idx]
    return quat_to_mat(row[[7, 4, 5, 6]]), row[1:4]


def ate_rmse(p_est: np.ndarray, p_gt: np.ndarray) -> float:
    """RMSE of positions after closed-form rigid alignment (no scale)."""
    p_est = np.asarray(p_est, dtype=np.float64)
    p_gt = np.asarray(p_gt, dtype=np.float64)
    if p_est.shape != p_gt.shape or p_est.ndim != 2:
        raise DataError("trajectory position arrays must match in shape")
    mu_e = p_est.mean(axis=0)
    mu_g = p_gt.mean(axis=0)
    h = (p_est - mu_e).T @ (p_gt - mu_g)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    res = (p_est - mu_e) @ rot.T + mu_g - p_gt
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def end_drift(p_est: np.ndarray, p_gt: np.ndarray) -> float:
    """Start-to-end translation drift: mismatch of the net displacement."""
    de = np.asarray(p_est[-1], float) - np.asarray(p_est[0], float)
    dg = np.asarray(p_gt[-1], float) - np.asarray(p_gt[0], float)
    return float(np.linalg.norm(de - dg))


def _write_tum(path, rows: np.ndarray) -> None:
    lines = [" ".join(format(v, ".9f") for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _held_out_frames(ds, stride: int) -> list[int]:
    """Odd frame indices: never touched by tracking or mapping."""
    return list(range(1, len(ds.frames), 2 * max(stride, 1)))


def _novel_views(ds, count: int):
    """Revisit-path cameras plus the ray-traced scene for their references."""
    scene = generate_scene(ds.seed)
    rots, trans = novel_body_poses(scene.meta, ds.seed, count)
    cams = [_camera_from_body(ds.rig, rots[i], trans[i]) for i in range(count)]
    return scene, cams


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: RunConfig) -> Path:
    if not cfg.output:
        raise ConfigError("run.output is required")
    out = _ensure_dir(cfg.output)
    t0 = time.perf_counter()
    ds = simulate_dataset(cfg.seed, cfg.duration, cfg.sim,
                          degenerate=cfg.degenerate)
    export_dataset(out, ds)
    path_len = float(np.sum(np.linalg.norm(np.diff(ds.gt[:, 1:4], axis=0),
                                           axis=1)))
    (out / "config.txt").write_text(config_text(cfg))
    pairs = {
        "command": "simulate",
        "seed": cfg.seed,
        "duration_s": float(ds.duration),
        "t_static_s": float(ds.t_static),
        "degenerate": ds.degenerate is not None,
        "path_length_m": path_len,
        "n_imu": len(ds.imu.stamps),
        "n_scans": len(ds.scans),
        "n_frames": len(ds.frames),
        "wall_s": time.perf_counter() - t0,
    }
    if ds.degenerate is not None:
        pairs["degenerate_begin_s"] = float(ds.degenerate[0])
        pairs["degenerate_end_s"] = float(ds.degenerate[1])
    write_summary(out, pairs)
    print(f"dataset written to {out} "
          f"({pairs['n_frames']} frames, {pairs['n_scans']} scans, "
          f"path {path_len:.1f} m)")
    return out


# ---------------------------------------------------------------------------
# slam


def _static_biases(ds, rot0: np.ndarray):
    """Gyro/accel biases from the stationary lead-in, given the start pose."""
    t_max = max(ds.t_static * 0.9, 0.25)
    n = int(np.searchsorted(ds.imu.stamps, t_max, side="right"))
    if n < 20:
        raise DataError("not enough stationary samples for initialization")
    b_g = ds.imu.gyro[:n].mean(axis=0)
    g_up = np.array([0.0, 0.0, GRAVITY])
    b_a = ds.imu.accel[:n].mean(axis=0) - rot0.T @ g_up
    return b_g, b_a


def cmd_slam(cfg: RunConfig) -> Path:
    if not cfg.dataset:
        raise ConfigError("run.dataset is required")
    if not cfg.output:
        raise ConfigError("run.output is required")
    ds = load_dataset(cfg.dataset)
    rig = ds.rig
    out = _ensure_dir(cfg.output)
    (out / "config.txt").write_text(config_text(cfg))

    ocfg = replace(cfg.odometry, camera_mode=cfg.camera_factor)
    extr = _extrinsics(rig)
    w = ocfg.window
    n_win = int(round(ds.duration / w))
    if n_win < 1:
        raise ConfigError("dataset shorter than one odometry window")

    # anchor the estimate in the dataset world frame: visual associations
    # carry world coordinates, so the filter must start at the true pose
    rot0, p0 = _gt_body_pose(ds, 0.0)
    b_g, b_a = _static_biases(ds, rot0)
    od = Odometry(0.0, rot0, b_g, b_a, ocfg, extr,
                  intrinsics=(rig.fx, rig.fy, rig.cx, rig.cy), trans0=p0)

    scan_by_win: dict[int, list] = {}
    for scan in ds.scans:
        scan_by_win.setdefault(int(round(scan.stamp / w)), []).append(scan)
    # the platform is stationary through the lead-in, so the whole first
    # sweep can be placed at the t=0 pose before any window is solved
    for scan in scan_by_win.get(0, []):
        od.bootstrap_map(np.zeros(len(scan.offsets)), scan.points())

    mapper = Mapper(cfg.mapping, seed=cfg.seed)
    kf_queue: queue.Queue = queue.Queue()
    worker = threading.Thread(target=mapping_loop, args=(kf_queue, mapper),
                              name="mapper")
    worker.start()

    cam_template = rig.camera(np.eye(3), np.zeros(3))
    clouds: deque = deque(maxlen=5)
    stamps = ds.imu.stamps
    t_begin = time.perf_counter()
    prev_timing = dict(mapper.timing)
    try:
        for k in range(n_win):
            t_end = (k + 1) * w
            lo = np.searchsorted(stamps, k * w, side="right")
            hi = np.searchsorted(stamps, t_end, side="right")
            if hi - lo < 2:
                raise DataError(f"window ending at {t_end:.3f}s has no IMU data")

            scans = scan_by_win.get(k, [])
            if scans:
                sstamps = np.concatenate([s.stamps() for s in scans])
                spoints = np.concatenate([s.points() for s in scans])
            else:
                sstamps = np.zeros(0)
                spoints = np.zeros((0, 3))

            f = int(round(t_end * rig.cam_rate))
            frame = ds.frames[f] if 0 <= f < len(ds.frames) else None

            assoc = None
            gmap_snap = None
            image = None
            image_stamp = None
            if frame is not None:
                image_stamp = frame.stamp
                if cfg.camera_factor == "option1":
                    a = ds.assoc[f]
                    if len(a.points):
                        assoc = (a.points, a.pixels, frame.stamp)
                elif cfg.camera_factor == "option2":
                    gmap_snap = mapper.snapshot()
                    image = frame.image

            od.process_segment(t_end, stamps[lo:hi], ds.imu.gyro[lo:hi],
                               ds.imu.accel[lo:hi], sstamps, spoints,
                               assoc=assoc, gmap=gmap_snap,
                               camera=cam_template, image=image,
                               image_stamp=image_stamp)

            if len(sstamps):
                clouds.append(transform_scan(od.traj, extr, sstamps, spoints))
            if frame is not None:
                rng = np.random.default_rng([cfg.seed, 404, k])
                rot_wc, center = od.camera_pose(frame.stamp)
                cam = rig.camera(rot_wc.T, -rot_wc.T @ center)
                kf = build_keyframe(k, list(clouds), frame.image, cam,
                                    cfg.mapping, rng, stamp=frame.stamp)
                if kf is not None:
                    kf_queue.put(kf)
                    kf_queue.join()  # lockstep keeps reruns bit-identical

            if (k + 1) % cfg.log_every == 0 or k + 1 == n_win:
                d = od.diags[-1]
                mt = mapper.timing
                dt_fwd = mt.get("fwd", 0.0) - prev_timing.get("fwd", 0.0)
                dt_bwd = mt.get("bwd", 0.0) - prev_timing.get("bwd", 0.0)
                dt_adam = mt.get("adam", 0.0) - prev_timing.get("adam", 0.0)
                prev_timing = dict(mt)
                print(f"window {k + 1:4d}/{n_win}  t={t_end:7.2f}s  "
                      f"track {d.wall_time * 1e3:6.1f} ms  cost {d.cost:9.3e}  "
                      f"map Fwd {dt_fwd:6.2f}s Bwd {dt_bwd:6.2f}s "
                      f"Adam {dt_adam:6.2f}s  "
                      f"splats {len(mapper.gmap)}")
    finally:
        kf_queue.put(None)
        worker.join()
    wall = time.perf_counter() - t_begin

    gmap = mapper.snapshot()
    if len(gmap) == 0:
        raise DataError("no keyframes produced; map is empty")

    est_rows = od.traj.sample_tum(_clamp_to_domain(od.traj, stamps))
    est_rows[:, 0] = stamps
    _write_tum(out / "traj_body.tum", est_rows)
    cam_stamps = np.array([fr.stamp for fr in ds.frames])
    rot_wc, centers = od.traj.query_sensor_pose(
        _clamp_to_domain(od.traj, cam_stamps), rig.rot_bc, rig.trans_bc)
    qs = mat_to_quat(rot_wc)
    cam_rows = np.column_stack([cam_stamps, centers,
                                qs[:, 1], qs[:, 2], qs[:, 3], qs[:, 0]])
    _write_tum(out / "traj_cam.tum", cam_rows)

    save_spline(out / "spline", od.traj)
    save_map(out / "map", gmap)
    for i, kf in enumerate(mapper.keyframes):
        save_keyframe(out / "keyframes" / f"{i:04d}", kf)
    (out / "tracking.csv").write_text(od.diagnostics_csv())
    map_lines = ["round,loss"]
    map_lines += [f"{i},{loss:.6g}" for i, loss in enumerate(mapper.losses)]
    (out / "mapping.csv").write_text("\n".join(map_lines) + "\n")

    ate = ate_rmse(est_rows[:, 1:4], ds.gt[:, 1:4])
    drift = end_drift(est_rows[:, 1:4], ds.gt[:, 1:4])
    track_ms = 1e3 * np.mean([d.wall_time for d in od.diags])
    steps = max(mapper.timing.get("steps", 0), 1)
    budget = ds.duration * cfg.budget_factor
    pairs = {
        "command": "slam",
        "dataset": str(cfg.dataset),
        "seed": cfg.seed,
        "camera_factor": cfg.camera_factor,
        "n_windows": n_win,
        "n_keyframes": len(mapper.keyframes),
        "n_gaussians": len(gmap),
        "ate_rmse_m": ate,
        "end_drift_m": drift,
        "track_ms_mean": float(track_ms),
        "map_fwd_ms_mean": 1e3 * mapper.timing.get("fwd", 0.0) / steps,
        "map_bwd_ms_mean": 1e3 * mapper.timing.get("bwd", 0.0) / steps,
        "map_adam_ms_mean": 1e3 * mapper.timing.get("adam", 0.0) / steps,
        "wall_s": wall,
        "duration_s": float(ds.duration),
        "budget_s": float(budget),
        "within_budget": wall <= budget,
        "realtime_1x": wall <= ds.duration,
    }
    write_summary(out, pairs)
    print(f"slam finished: {n_win} windows in {wall:.1f}s "
          f"(dataset {ds.duration:.0f}s, budget {budget:.0f}s, "
          f"real-time criterion {'met' if pairs['realtime_1x'] else 'missed'}), "
          f"ATE {ate * 100:.2f} cm, {len(gmap)} splats")
    return out


# ---------------------------------------------------------------------------
# render


def cmd_render(cfg: RunConfig, stride: int = 20, novel: int = 0,
               poses: str = "est") -> Path:
    if not cfg.dataset:
        raise ConfigError("run.dataset is required")
    if not cfg.output:
        raise ConfigError("run.output is required")
    if not cfg.slam_dir:
        raise ConfigError("run.slam_dir is required")
    if poses not in ("est", "gt"):
        raise ConfigError(f"invalid pose source: {poses!r} (est|gt)")
    ds = load_dataset(cfg.dataset)
    traj, gmap = load_slam_products(cfg.slam_dir)
    out = _ensure_dir(cfg.output)
    lines = ["kind,view_id,frame,stamp"]

    frames = _held_out_frames(ds, stride)
    for f in frames:
        stamp = ds.frames[f].stamp
        if poses == "gt":
            cam = _camera_from_body(ds.rig, *_gt_body_pose(ds, stamp))
        else:
            cam = _spline_camera(traj, ds.rig, stamp)
        color, depth, _ = _render_map_view(gmap, cam)
        save_png(out / f"f{f:04d}.png", color)
        save_f32_grid(out / f"f{f:04d}_depth.f32", depth)
        lines.append(f"in_seq,f{f:04d},{f},{stamp:.9f}")

    if novel > 0:
        _, cams = _novel_views(ds, novel)
        for i, cam in enumerate(cams):
            color, depth, _ = _render_map_view(gmap, cam)
            save_png(out / f"n{i:02d}.png", color)
            save_f32_grid(out / f"n{i:02d}_depth.f32", depth)
            lines.append(f"novel,n{i:02d},-1,nan")

    (out / "views.txt").write_text("\n".join(lines) + "\n")
    write_summary(out, {
        "command": "render",
        "slam_dir": str(cfg.slam_dir),
        "pose_source": poses,
        "n_in_seq": len(frames),
        "n_novel": max(novel, 0),
    })
    print(f"rendered {len(frames)} in-sequence and {max(novel, 0)} "
          f"novel views to {out}")
    return out


# ---------------------------------------------------------------------------
# eval


def cmd_eval(cfg: RunConfig, stride: int = 20, novel: int = 12,
             save_views: bool = False) -> Path:
    if not cfg.dataset:
        raise ConfigError("run.dataset is required")
    if not cfg.output:
        raise ConfigError("run.output is required")
    if not cfg.slam_dir:
        raise ConfigError("run.slam_dir is required")
    ds = load_dataset(cfg.dataset)
    traj, gmap = load_slam_products(cfg.slam_dir)
    out = _ensure_dir(cfg.output)
    views_dir = _ensure_dir(out / "views") if save_views else None

    rows_in = []
    for f in _held_out_frames(ds, stride):
        frame = ds.frames[f]
        cam = _spline_camera(traj, ds.rig, frame.stamp)
        color, depth, valid = _render_map_view(gmap, cam)
        gt_depth = frame.depth.astype(np.float64)
        mask = valid & (gt_depth > 0)
        rows_in.append((f"f{f:04d}", psnr(color, frame.image),
                        ssim(color, frame.image),
                        depth_l1(depth, gt_depth, mask)))
        if views_dir is not None:
            save_png(views_dir / f"f{f:04d}.png", color)

    rows_nv = []
    if novel > 0:
        scene, cams = _novel_views(ds, novel)
        for i, cam in enumerate(cams):
            color, depth, valid = _render_map_view(gmap, cam)
            ref_color, ref_depth = render_view(scene, cam)
            mask = valid & (ref_depth > 0)
            rows_nv.append((f"n{i:02d}", psnr(color, ref_color),
                            ssim(color, ref_color),
                            depth_l1(depth, ref_depth, mask)))
            if views_dir is not None:
                save_png(views_dir / f"n{i:02d}.png", color)

    metrics_csv(out / "metrics_in_seq.csv", rows_in)
    metrics_csv(out / "metrics_novel.csv", rows_nv)

    est_rows = traj.sample_tum(_clamp_to_domain(traj, ds.imu.stamps))
    pairs = {
        "command": "eval",
        "slam_dir": str(cfg.slam_dir),
        "n_in_seq": len(rows_in),
        "n_novel": len(rows_nv),
        "ate_rmse_m": ate_rmse(est_rows[:, 1:4], ds.gt[:, 1:4]),
        "end_drift_m": end_drift(est_rows[:, 1:4], ds.gt[:, 1:4]),
    }
    for name, rows in (("in_seq", rows_in), ("novel", rows_nv)):
        if rows:
            pairs[f"psnr_{name}_mean"] = float(np.mean([r[1] for r in rows]))
            pairs[f"ssim_{name}_mean"] = float(np.mean([r[2] for r in rows]))
            vals = [r[3] for r in rows if np.isfinite(r[3])]
            pairs[f"depth_l1_{name}_mean"] = float(np.mean(vals)) if vals else float("nan")
    write_summary(out, pairs)
    msg = [f"eval: ATE {pairs['ate_rmse_m'] * 100:.2f} cm"]
    if rows_in:
        msg.append(f"in-seq PSNR {pairs['psnr_in_seq_mean']:.2f} dB "
                   f"SSIM {pairs['ssim_in_seq_mean']:.3f} "
                   f"depth-L1 {pairs['depth_l1_in_seq_mean']:.3f} m "
                   f"({len(rows_in)} views)")
    if rows_nv:
        msg.append(f"novel PSNR {pairs['psnr_novel_mean']:.2f} dB "
                   f"({len(rows_nv)} views)")
    print("; ".join(msg))
    return out


# ---------------------------------------------------------------------------
# mesh


def cmd_mesh(cfg: RunConfig, voxel: float = 0.05, every: int = 1,
             source: str = "render") -> Path:
    if not cfg.output:
        raise ConfigError("run.output is required")
    if not cfg.dataset:
        raise ConfigError("run.dataset is required")
    if voxel <= 0:
        raise ConfigError("invalid voxel size: must be positive")
    if source not in ("render", "dataset"):
        raise ConfigError(f"invalid mesh source: {source!r} (render|dataset)")
    ds = load_dataset(cfg.dataset)
    rig = ds.rig
    out = _ensure_dir(cfg.output)
    k = np.array([[rig.fx, 0.0, rig.cx], [0.0, rig.fy, rig.cy], [0.0, 0.0, 1.0]])

    views = []  # (camera, depth, rgb) triples to fuse
    if source == "render":
        if not cfg.slam_dir:
            raise ConfigError("run.slam_dir is required for --source render")
        traj, gmap = load_slam_products(cfg.slam_dir)
        kf_stamps = _keyframe_stamps(cfg.slam_dir)
        for stamp in kf_stamps[::max(every, 1)]:
            cam = _spline_camera(traj, rig, stamp)
            color, depth, _ = _render_map_view(gmap, cam)
            views.append((cam, depth, color))
        bounds_pts = gmap.pos
    else:
        clouds = []
        for f in range(0, len(ds.frames), 2 * max(every, 1)):
            frame = ds.frames[f]
            cam = _camera_from_body(rig, *_gt_body_pose(ds, frame.stamp))
            views.append((cam, frame.depth.astype(np.float64), frame.image))
            clouds.append(_backproject(cam, frame.depth.astype(np.float64)))
        bounds_pts = np.concatenate(clouds) if clouds else np.zeros((0, 3))
    if not views:
        raise DataError("no views available for fusion")

    lo = np.percentile(bounds_pts, 1, axis=0) - 0.2
    hi = np.percentile(bounds_pts, 99, axis=0) + 0.2
    vol = TsdfVolume.for_bbox(lo, hi, voxel)
    if int(np.prod(vol.dims)) > 400 ** 3:
        raise ConfigError("mesh volume too large; increase --voxel")
    for cam, depth, rgb in views:
        tsdf_fuse(vol, depth, rgb, camera_pose_matrix(cam), k)
    verts, faces, colors = marching_cubes(vol)
    save_mesh(out / "mesh.obj", verts, faces, colors)
    write_summary(out, {
        "command": "mesh",
        "source": source,
        "voxel_m": float(voxel),
        "n_fused": len(views),
        "dims": "x".join(str(d) for d in vol.dims),
        "n_vertices": len(verts),
        "n_faces": len(faces),
    })
    print(f"mesh: fused {len(views)} views into {vol.dims} voxels, "
          f"{len(verts)} vertices / {len(faces)} faces -> {out / 'mesh.obj'}")
    return out


def _keyframe_stamps(slam_dir) -> list[float]:
    d = Path(slam_dir) / "keyframes"
    stamps = []
    for sub in sorted(d.iterdir()) if d.is_dir() else []:
        pose = sub / "pose.txt"
        if pose.is_file():
            stamps.append(float(pose.read_text().split()[0]))
    if not stamps:
        raise DataError(f"no keyframes under {d}")
    return stamps


def _backproject(cam: Camera, depth: np.ndarray) -> np.ndarray:
    v, u = np.nonzero(depth > 0)
    z = depth[v, u]
    x = (u - cam.cx) / cam.fx * z
    y = (v - cam.cy) / cam.fy * z
    p_cam = np.column_stack([x, y, z])
    return p_cam @ cam.rot_cw + cam.center()


# ---------------------------------------------------------------------------
# interp


def cmd_interp(cfg: RunConfig, factor: int = 2, start: int = 0,
               count: int = 2) -> Path:
    if not cfg.dataset:
        raise ConfigError("run.dataset is required")
    if not cfg.output:
        raise ConfigError("run.output is required")
    if not cfg.slam_dir:
        raise ConfigError("run.slam_dir is required")
    if factor < 1:
        raise ConfigError("invalid interpolation factor: must be >= 1")
    if count < 2:
        raise ConfigError("interp needs at least two source frames")
    ds = load_dataset(cfg.dataset)
    traj, gmap = load_slam_products(cfg.slam_dir)
    if not 0 <= start < start + count <= len(ds.frames):
        raise ConfigError("requested frame range outside the dataset")
    out = _ensure_dir(cfg.output)

    base = [ds.frames[start + i].stamp for i in range(count)]
    stamps = []
    for a, b in zip(base[:-1], base[1:]):
        stamps.extend(a + (b - a) * j / factor for j in range(factor))
    stamps.append(base[-1])

    cam_template = ds.rig.camera(np.eye(3), np.zeros(3))
    images = interpolate_frames(traj, gmap, _clamp_to_domain(traj, stamps),
                                cam_template, ds.rig.rot_bc, ds.rig.trans_bc)
    lines = ["index,stamp,source"]
    for i, (t, img) in enumerate(zip(stamps, images)):
        save_png(out / f"{i:04d}.png", np.clip(img, 0.0, 1.0))
        src = "keyframe" if any(abs(t - b) < 1e-12 for b in base) else "interp"
        lines.append(f"{i},{t:.9f},{src}")
    (out / "frames.txt").write_text("\n".join(lines) + "\n")
    write_summary(out, {
        "command": "interp",
        "factor": factor,
        "start_frame": start,
        "n_source": count,
        "n_rendered": len(images),
    })
    print(f"interp: {count} source frames at factor {factor} -> "
          f"{len(images)} rendered frames in {out}")
    return out


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file with [section]s")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   help="override one config value (repeatable)")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--seed", type=int, help="master random seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="splatslam",
        description="LiDAR-inertial-camera SLAM with a Gaussian splat map")
    sub = ap.add_subparsers(dest="cmd")

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--duration", type=float, help="trajectory length, seconds")
    p.add_argument("--degenerate", action=argparse.BooleanOptionalAction,
                   default=None,
                   help="include the LiDAR-degenerate wall dwell")

    p = sub.add_parser("slam", help="track and map a dataset")
    _add_common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--camera-factor", choices=("option1", "option2", "none"),
                   help="camera factor mode")
    p.add_argument("--refine-rounds", type=int,
                   help="extra map optimization rounds after the sequence")

    p = sub.add_parser("render", help="render views from a trained map")
    _add_common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--slam", help="slam run directory (map + trajectory)")
    p.add_argument("--stride", type=int, default=20,
                   help="keep every n-th held-out frame")
    p.add_argument("--novel", type=int, default=0,
                   help="number of revisit-path novel views")
    p.add_argument("--poses", choices=("est", "gt"), default="est")

    p = sub.add_parser("eval", help="render held-out views and score them")
    _add_common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--slam", help="slam run directory")
    p.add_argument("--stride", type=int, default=20)
    p.add_argument("--novel", type=int, default=12)
    p.add_argument("--save-views", action="store_true")

    p = sub.add_parser("mesh", help="fuse depth into a TSDF and extract a mesh")
    _add_common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--slam", help="slam run directory (for --source render)")
    p.add_argument("--voxel", type=float, default=0.05)
    p.add_argument("--every", type=int, default=1,
                   help="fuse every n-th available view")
    p.add_argument("--source", choices=("render", "dataset"), default="render")

    p = sub.add_parser("interp", help="upsample the frame rate between frames")
    _add_common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--slam", help="slam run directory")
    p.add_argument("--factor", type=int, default=2)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--count", type=int, default=2)

    return ap


def _resolve_from_args(args) -> RunConfig:
    overrides = list(args.set)
    if getattr(args, "refine_rounds", None) is not None:
        overrides.append(f"mapping.refine_rounds={args.refine_rounds}")
    direct = {
        "dataset": getattr(args, "dataset", None),
        "output": args.out,
        "seed": args.seed,
        "camera_factor": getattr(args, "camera_factor", None),
        "duration": getattr(args, "duration", None),
        "degenerate": getattr(args, "degenerate", None),
        "slam_dir": getattr(args, "slam", None),
    }
    return resolve(args.config, overrides, **direct)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.cmd is None:
        ap.print_help()
        return 2
    try:
        cfg = _resolve_from_args(args)
        if args.cmd == "simulate":
            cmd_simulate(cfg)
        elif args.cmd == "slam":
            cmd_slam(cfg)
        elif args.cmd == "render":
            cmd_render(cfg, stride=args.stride, novel=args.novel,
                       poses=args.poses)
        elif args.cmd == "eval":
            cmd_eval(cfg, stride=args.stride, novel=args.novel,
                     save_views=args.save_views)
        elif args.cmd == "mesh":
            cmd_mesh(cfg, voxel=args.voxel, every=args.every,
                     source=args.source)
        elif args.cmd == "interp":
            cmd_interp(cfg, factor=args.factor, start=args.start,
                       count=args.count)
        return 0
    except (ConfigError, DomainError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 4
    except SplatSlamError as e:  # pragma: no cover - future error kinds
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
