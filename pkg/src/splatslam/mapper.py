"""Incremental photo-realistic mapping back-end.

Consumes posed hybrid frames from the tracker, builds keyframes (sparse
depth map + colorized points, supplemented in camera regions the LiDAR
never saw), and grows and trains the Gaussian map against them.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .depth_completion import complete_depth
from .errors import DataError
from .gaussians import GaussianMap, init_from_points
from .io_formats import (load_f32_grid, load_png, load_point_ply, parse_tum,
                         save_f32_grid, save_png, save_point_ply, tum_row)
from .losses import mapping_loss
from .rasterizer import AdamState, Camera, backward, default_lrs, forward, \
    sparse_adam_step

NEAR_CLIP = 0.01


@dataclass
class MappingConfig:
    lam: float = 0.2          # DSSIM weight inside the color loss
    xi: float = 0.005         # depth-regularizer weight
    k_keyframes: int = 100    # keyframes sampled per optimization round
    tau: float = 0.99         # opacity threshold gating map expansion
    n_p: int = 10             # point-cloud decimation keeps 1 in n_p
    eps1: float = 0.1         # completion sanity bound (m, mean change)
    eps2: float = 50.0        # max depth for supplemented points (m)
    keyframe_stride: int = 5  # every stride-th hybrid frame is a keyframe
    grad_thresh: float = 1.0  # depth-gradient filter (m per pixel)
    patch: int = 30           # supplement patch size (pixels)
    refine_rounds: int = 0    # extra optimization rounds after the sequence

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.xi < 0:  # zero switches depth supervision off
            raise ValueError("xi must be non-negative")
        for name in ("lam", "k_keyframes", "n_p", "eps1", "eps2",
                     "keyframe_stride", "grad_thresh", "patch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Keyframe:
    """A posed image plus the depth evidence gathered around it.

    points/colors hold the decimated colorized LiDAR cloud merged with the
    supplemented visual points; every point projects inside the image with
    positive depth at construction time.
    """
    cam: Camera
    image: np.ndarray
    sparse_depth: np.ndarray
    points: np.ndarray
    colors: np.ndarray
    stamp: float = 0.0


def project_points(points_w: np.ndarray, cam: Camera):
    """Pixel coordinates, camera depths and an inside-image mask."""
    p_cam = points_w @ cam.rot_cw.T + cam.trans_cw
    z = p_cam[:, 2]
    front = z > NEAR_CLIP
    zs = np.where(front, z, 1.0)
    u = cam.fx * p_cam[:, 0] / zs + cam.cx
    v = cam.fy * p_cam[:, 1] / zs + cam.cy
    # pixel centers sit at integer coordinates
    ui = np.round(u).astype(np.int64)
    vi = np.round(v).astype(np.int64)
    inside = front & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
    return u, v, ui, vi, z, inside


def bilinear_color(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    x = np.clip(u, 0.0, w - 1.0)
    y = np.clip(v, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(u), np.int64)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(v), np.int64)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    c00 = image[y0, x0]
    c01 = image[y0, np.minimum(x0 + 1, w - 1)]
    c10 = image[np.minimum(y0 + 1, h - 1), x0]
    c11 = image[np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)]
    top = c00 * (1 - fx) + c01 * fx
    bot = c10 * (1 - fx) + c11 * fx
    return top * (1 - fy) + bot * fy


def zbuffer_project(points_w: np.ndarray, cam: Camera) -> np.ndarray:
    """Sparse depth map from a world cloud; nearest point wins per pixel."""
    depth = np.full((cam.height, cam.width), np.inf)
    _, _, ui, vi, z, inside = project_points(points_w, cam)
    np.minimum.at(depth, (vi[inside], ui[inside]), z[inside])
    depth[~np.isfinite(depth)] = 0.0
    return depth


def group_mapping_data(frame_index: int, clouds, image: np.ndarray,
                       cam: Camera, cfg: MappingConfig, rng) -> Keyframe | None:
    """Keyframe from the most recent hybrid frames, or None off-stride.

    clouds: world-frame point arrays of the latest frames (up to five);
    their merge is z-buffered into the sparse depth map, then decimated
    (1 in n_p kept, random) and colorized by bilinear image lookup.
    """
    if frame_index % cfg.keyframe_stride != 0:
        return None
    merged = np.concatenate([np.asarray(c, dtype=np.float64).reshape(-1, 3)
                             for c in clouds]) if clouds else np.zeros((0, 3))
    sparse = zbuffer_project(merged, cam)

    n = len(merged)
    keep = rng.permutation(n)[:max(n // cfg.n_p, 1 if n else 0)]
    dec = merged[keep]
    u, v, _, _, z, inside = project_points(dec, cam)
    dec = dec[inside]
    colors = bilinear_color(image, u[inside], v[inside])
    return Keyframe(cam=cam, image=np.asarray(image, dtype=np.float64),
                    sparse_depth=sparse, points=dec, colors=colors)


def select_blind_pixels(sparse_depth: np.ndarray, dense_depth: np.ndarray,
                        cfg: MappingConfig):
    """Pixels chosen to supplement patches the LiDAR never hit.

    Aborts (returns empty) when the completed map disagrees with the
    measured pixels by eps1 or more on average.  Within each LiDAR-empty
    patch the minimum-depth surviving pixel is chosen; pixels with
    non-positive depth or a steep depth gradient never qualify, and
    selections at eps2 or deeper are dropped.  Returns (rows, cols).
    """
    none = np.zeros(0, np.int64), np.zeros(0, np.int64)
    valid = sparse_depth > 0
    if not valid.any():
        return none
    delta = float(np.abs(dense_depth - sparse_depth)[valid].mean())
    if delta >= cfg.eps1:
        return none

    gy, gx = np.gradient(dense_depth)
    keep = (dense_depth > 0) & (np.hypot(gx, gy) <= cfg.grad_thresh)

    h, w = sparse_depth.shape
    rows, cols = [], []
    for r0 in range(0, h, cfg.patch):
        for c0 in range(0, w, cfg.patch):
            r1, c1 = min(r0 + cfg.patch, h), min(c0 + cfg.patch, w)
            if valid[r0:r1, c0:c1].any():
                continue
            tile = np.where(keep[r0:r1, c0:c1], dense_depth[r0:r1, c0:c1], np.inf)
            flat = int(np.argmin(tile))
            best = tile.reshape(-1)[flat]
            if best < cfg.eps2:
                rows.append(r0 + flat // (c1 - c0))
                cols.append(c0 + flat % (c1 - c0))
    if not rows:
        return none
    return np.array(rows, np.int64), np.array(cols, np.int64)


def blind_area_compensate(sparse_depth: np.ndarray, image: np.ndarray,
                          dense_depth: np.ndarray, cam: Camera,
                          cfg: MappingConfig):
    """Back-projected colored points for LiDAR-blind image patches."""
    rows, cols = select_blind_pixels(sparse_depth, dense_depth, cfg)
    if len(rows) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    z = dense_depth[rows, cols]
    x = (cols - cam.cx) * z / cam.fx
    y = (rows - cam.cy) * z / cam.fy
    p_cam = np.stack([x, y, z], axis=1)
    points = (p_cam - cam.trans_cw) @ cam.rot_cw
    return points, image[rows, cols]


def build_keyframe(frame_index: int, clouds, image: np.ndarray, cam: Camera,
                   cfg: MappingConfig, rng, stamp: float = 0.0) -> Keyframe | None:
    """Full keyframe pipeline: group, complete depth, supplement blind areas."""
    kf = group_mapping_data(frame_index, clouds, image, cam, cfg, rng)
    if kf is None:
        return None
    kf.stamp = stamp
    dense = complete_depth(kf.sparse_depth, kf.image)
    if dense is not None:
        pts, cols = blind_area_compensate(kf.sparse_depth, kf.image, dense,
                                          cam, cfg)
        if len(pts):
            kf.points = np.concatenate([kf.points, pts])
            kf.colors = np.concatenate([kf.colors, cols])
    return kf


def _point_depths(points_w: np.ndarray, cam: Camera) -> np.ndarray:
    return points_w @ cam.rot_cw.T[:, 2] + cam.trans_cw[2]


def init_map(gmap: GaussianMap, kf: Keyframe) -> int:
    """Seed an empty map with one Gaussian per keyframe point."""
    if len(gmap):
        raise DataError("map already initialized")
    depths = _point_depths(kf.points, kf.cam)
    gmap.append(init_from_points(kf.points, kf.colors, depths, kf.cam.fx))
    return len(kf.points)


def expand_map(gmap: GaussianMap, kf: Keyframe, tau: float) -> int:
    """Add Gaussians only where the rendered opacity is still below tau."""
    if len(gmap) == 0:
        raise DataError("map not initialized")
    opac = forward(gmap, kf.cam).opacity
    _, _, ui, vi, z, inside = project_points(kf.points, kf.cam)
    fresh = inside.copy()
    fresh[inside] = opac[vi[inside], ui[inside]] < tau
    if not fresh.any():
        return 0
    gmap.append(init_from_points(kf.points[fresh], kf.colors[fresh],
                                 z[fresh], kf.cam.fx))
    return int(fresh.sum())


def optimize_map(gmap: GaussianMap, keyframes, cfg: MappingConfig, rng,
                 adam: AdamState, lrs: dict, timing: dict | None = None) -> float:
    """One training round: sample keyframes, one descent step on each.

    ``timing`` (optional) accumulates wall seconds under the keys
    "fwd", "bwd", "adam" and the step count under "steps".
    """
    if len(gmap) == 0:
        raise DataError("map not initialized")
    m = min(cfg.k_keyframes, len(keyframes))
    order = rng.choice(len(keyframes), size=m, replace=False)
    rng.shuffle(order)
    total = 0.0
    for i in order:
        kf = keyframes[i]
        t0 = time.perf_counter()
        out = forward(gmap, kf.cam)
        t1 = time.perf_counter()
        loss, g_c, g_d, g_o = mapping_loss(out.color, out.depth, out.opacity,
                                           kf.image, kf.sparse_depth,
                                           cfg.lam, cfg.xi)
        grads, touched, _ = backward(gmap, out, g_c, g_d, g_o)
        t2 = time.perf_counter()
        sparse_adam_step(gmap, grads, touched, adam, lrs)
        t3 = time.perf_counter()
        if timing is not None:
            timing["fwd"] = timing.get("fwd", 0.0) + (t1 - t0)
            timing["bwd"] = timing.get("bwd", 0.0) + (t2 - t1)
            timing["adam"] = timing.get("adam", 0.0) + (t3 - t2)
            timing["steps"] = timing.get("steps", 0) + 1
        total += loss
    return total / max(m, 1)


class Mapper:
    """Keyframe-driven map owner; safe to share with a tracking thread.

    submit() mutates the training map and then publishes an independent
    snapshot; snapshot() hands the latest published copy to readers, so a
    render never observes a half-updated state.
    """

    def __init__(self, cfg: MappingConfig | None = None, seed: int = 0):
        self.cfg = cfg or MappingConfig()
        self.seed = seed
        self.gmap = GaussianMap()
        self.keyframes: list[Keyframe] = []
        self.adam = AdamState()
        self.lrs: dict | None = None
        self.losses: list[float] = []
        self.timing: dict = {}
        self._lock = threading.Lock()
        self._published = self.gmap.snapshot()

    def submit(self, kf: Keyframe) -> int:
        """Init or expand with the keyframe, then run one training round."""
        if len(self.gmap) == 0:
            added = init_map(self.gmap, kf)
            extent = float(np.linalg.norm(
                kf.points - kf.points.mean(axis=0), axis=1).max()) if len(kf.points) else 1.0
            self.lrs = default_lrs(max(extent, 1e-6))
        else:
            added = expand_map(self.gmap, kf, self.cfg.tau)
        self.keyframes.append(kf)
        # per-keyframe RNG stream keeps training schedule-independent
        rng = np.random.default_rng([self.seed, len(self.keyframes)])
        self.losses.append(optimize_map(self.gmap, self.keyframes, self.cfg,
                                        rng, self.adam, self.lrs, self.timing))
        with self._lock:
            self._published = self.gmap.snapshot()
        return added

    def refine(self, rounds: int) -> None:
        for k in range(rounds):
            rng = np.random.default_rng([self.seed, 1 << 20, k])
            self.losses.append(optimize_map(self.gmap, self.keyframes,
                                            self.cfg, rng, self.adam,
                                            self.lrs, self.timing))
        with self._lock:
            self._published = self.gmap.snapshot()

    def snapshot(self) -> GaussianMap:
        with self._lock:
            return self._published


def mapping_loop(keyframe_queue, mapper: Mapper) -> None:
    """Drain a queue of keyframes; None closes it and triggers refinement.

    Calls task_done after each item when the queue supports it, so a
    producer can rendezvous on queue.join() for deterministic interleaving.
    """
    done = getattr(keyframe_queue, "task_done", lambda: None)
    while True:
        kf = keyframe_queue.get()
        if kf is None:
            done()
            break
        mapper.submit(kf)
        done()
    if mapper.keyframes:
        mapper.refine(max(mapper.cfg.refine_rounds, 1))


# ---------------------------------------------------------------------------
# keyframe archive


def save_keyframe(dirpath, kf: Keyframe) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    rot_wc = kf.cam.rot_cw.T
    center = -rot_wc @ kf.cam.trans_cw
    (d / "pose.txt").write_text(tum_row(kf.stamp, rot_wc, center) + "\n")
    save_png(d / "image.png", kf.image)
    save_f32_grid(d / "sparse_depth.f32", kf.sparse_depth)
    save_point_ply(d / "points.ply", kf.points, kf.colors)


def load_keyframe(dirpath, intrinsics) -> Keyframe:
    """intrinsics: (fx, fy, cx, cy); image size comes from the files."""
    d = Path(dirpath)
    stamps, rots, transs = parse_tum((d / "pose.txt").read_text())
    image = load_png(d / "image.png")
    sparse = load_f32_grid(d / "sparse_depth.f32")
    points, colors = load_point_ply(d / "points.ply")
    rot_wc, center = rots[0], transs[0]
    fx, fy, cx, cy = intrinsics
    cam = Camera(image.shape[1], image.shape[0], fx, fy, cx, cy,
                 rot_wc.T, -rot_wc.T @ center)
    return Keyframe(cam=cam, image=image, sparse_depth=sparse,
                    points=points, colors=colors, stamp=float(stamps[0]))
