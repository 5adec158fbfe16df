"""Tile-based forward/backward splat rasterizer (CPU, numba kernels).

Forward: splats are projected, assigned to the 16x16 pixel tiles they can
influence, culled per (splat, tile) by the exact maximum blending weight over
the tile's pixel grid (drop if below 1/255), depth-sorted per tile with splat
id as tiebreak, and alpha-blended front to back per pixel with early
termination once transmittance falls below 1e-4.  Rendered channels: color,
alpha-weighted mean-depth, accumulated opacity.  Background is black / zero
depth / zero opacity.

Backward: per tile, entries are grouped into buckets of 32; the forward pass
checkpoints per-pixel transmittance and channel prefixes at every bucket
boundary, and the backward pass replays each bucket over the 256 tile pixels
in a staggered (256 + 31)-step lane schedule.  Each lane owns one entry, so
per-entry gradient slots are written without conflicts, and the final
per-splat reduction runs in a fixed global entry order; results are exactly
reproducible run to run.

Camera pose gradients live on the SE(3) tangent of the world-to-camera
transform with *left* perturbation: T' = (I + [theta]x, rho) * T_cw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .gaussians import (
    ALPHA_CLAMP,
    GaussianMap,
    eval_sh,
    project,
    quat_rotmats,
    sh_basis,
    sh_basis_grad,
    sigmoid,
)

TILE = 16
CULL_ALPHA = 1.0 / 255.0
EARLY_STOP_T = 1e-4
BUCKET = 32


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rot_cw: np.ndarray
    trans_cw: np.ndarray

    @property
    def intrinsics(self):
        return (self.fx, self.fy, self.cx, self.cy)

    def center(self) -> np.ndarray:
        return -self.rot_cw.T @ self.trans_cw

    def with_pose(self, rot_cw: np.ndarray, trans_cw: np.ndarray) -> "Camera":
        return Camera(self.width, self.height, self.fx, self.fy, self.cx, self.cy,
                      np.asarray(rot_cw, float), np.asarray(trans_cw, float))


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    transmittance: np.ndarray
    n_contrib: np.ndarray
    ctx: dict


# ---------------------------------------------------------------------------
# tile assignment and exact culling


def _max_eigenvalue(cov2d: np.ndarray) -> np.ndarray:
    half_tr = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    disc = np.sqrt(np.maximum(0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2
                              + cov2d[:, 0, 1] ** 2, 0.0))
    return half_tr + disc


def influence_radius(opacity: np.ndarray, cov2d: np.ndarray) -> np.ndarray:
    """Euclidean radius beyond which alpha < 1/255 is guaranteed.

    q >= |d|^2 / lambda_max, so alpha = o exp(-q/2) < 1/255 whenever
    |d| > sqrt(2 lambda_max ln(255 o)).  Splats with o <= 1/255 can never
    pass the cull threshold anywhere (radius -1).
    """
    lam = _max_eigenvalue(cov2d)
    r = np.full(len(opacity), -1.0)
    vis = opacity * np.exp(0.0) > CULL_ALPHA  # o > 1/255
    r[vis] = np.sqrt(2.0 * np.log(255.0 * opacity[vis]) * lam[vis]) + 1e-6
    return r


@njit(cache=True)
def _count_pairs(ids, tx0, tx1, ty0, ty1):
    total = 0
    for k in range(ids.size):
        total += (tx1[k] - tx0[k] + 1) * (ty1[k] - ty0[k] + 1)
    return total


@njit(cache=True)
def _fill_pairs(ids, tx0, tx1, ty0, ty1, tiles_x, pair_splat, pair_tile):
    pos = 0
    for k in range(ids.size):
        g = ids[k]
        for ty in range(ty0[k], ty1[k] + 1):
            for tx in range(tx0[k], tx1[k] + 1):
                pair_splat[pos] = g
                pair_tile[pos] = ty * tiles_x + tx
                pos += 1


@njit(cache=True)
def _exact_tile_max_q(mx, my, ca, cb, cc, x0, x1, y0, y1):
    """Min of the quadratic form over the integer pixel grid of a tile.

    Per pixel row the 1-D quadratic in x is minimized in closed form and the
    floor/ceil integer neighbors are evaluated after clamping, which makes the
    result exactly equal to brute force over every pixel of the tile.
    """
    qmin = 1e300
    for py in range(y0, y1 + 1):
        dy = py - my
        x_star = mx - cb * dy / ca
        xf = int(np.floor(x_star))
        for xc in (xf, xf + 1):
            if xc < x0:
                xc = x0
            elif xc > x1:
                xc = x1
            dx = xc - mx
            q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
            if q < qmin:
                qmin = q
    return qmin


@njit(cache=True, parallel=True)
def _cull_pairs(pair_splat, pair_tile, mean2d, conic, opacity,
                tiles_x, width, height, thresh, keep):
    for k in prange(pair_splat.size):
        g = pair_splat[k]
        t = pair_tile[k]
        x0 = (t % tiles_x) * TILE
        y0 = (t // tiles_x) * TILE
        x1 = min(x0 + TILE - 1, width - 1)
        y1 = min(y0 + TILE - 1, height - 1)
        qmin = _exact_tile_max_q(mean2d[g, 0], mean2d[g, 1],
                                 conic[g, 0], conic[g, 1], conic[g, 2],
                                 x0, x1, y0, y1)
        alpha = opacity[g] * np.exp(-0.5 * qmin)
        if alpha > ALPHA_CLAMP:
            alpha = ALPHA_CLAMP
        keep[k] = alpha >= thresh


def cull_tiles(mean2d, conic, cov2d, opacity, depth, valid, width, height, cull=True):
    """Build per-tile, depth-sorted splat entry lists.

    Returns (entry_splat, tile_offsets, tiles_x, tiles_y).  With ``cull``
    False every valid splat lands in every tile (the no-approximation
    reference configuration); otherwise a pair is kept iff its exact maximum
    alpha over the tile's pixels reaches 1/255.
    """
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y
    ids = np.flatnonzero(valid).astype(np.int64)

    if cull:
        radius = influence_radius(opacity, cov2d)
        r = radius[ids]
        ids = ids[r > 0]
        r = r[r > 0]
        mx, my = mean2d[ids, 0], mean2d[ids, 1]
        tx0 = np.clip(np.floor((mx - r) / TILE).astype(np.int64), 0, tiles_x - 1)
        tx1 = np.clip(np.floor((mx + r) / TILE).astype(np.int64), 0, tiles_x - 1)
        ty0 = np.clip(np.floor((my - r) / TILE).astype(np.int64), 0, tiles_y - 1)
        ty1 = np.clip(np.floor((my + r) / TILE).astype(np.int64), 0, tiles_y - 1)
        off_image = (mx + r < 0) | (mx - r > width - 1) | (my + r < 0) | (my - r > height - 1)
        keep0 = ~off_image
        ids, tx0, tx1, ty0, ty1 = ids[keep0], tx0[keep0], tx1[keep0], ty0[keep0], ty1[keep0]
    else:
        tx0 = np.zeros(len(ids), np.int64)
        tx1 = np.full(len(ids), tiles_x - 1, np.int64)
        ty0 = np.zeros(len(ids), np.int64)
        ty1 = np.full(len(ids), tiles_y - 1, np.int64)

    total = _count_pairs(ids, tx0, tx1, ty0, ty1)
    pair_splat = np.empty(total, np.int64)
    pair_tile = np.empty(total, np.int64)
    _fill_pairs(ids, tx0, tx1, ty0, ty1, tiles_x, pair_splat, pair_tile)

    if cull and total:
        keep = np.zeros(total, np.bool_)
        _cull_pairs(pair_splat, pair_tile, mean2d, conic, opacity,
                    tiles_x, width, height, CULL_ALPHA, keep)
        pair_splat = pair_splat[keep]
        pair_tile = pair_tile[keep]

    order = np.lexsort((pair_splat, depth[pair_splat], pair_tile))
    entry_splat = pair_splat[order]
    entry_tile = pair_tile[order]
    tile_offsets = np.zeros(n_tiles + 1, np.int64)
    np.add.at(tile_offsets[1:], entry_tile, 1)
    tile_offsets = np.cumsum(tile_offsets)
    return entry_splat, tile_offsets, tiles_x, tiles_y


# ---------------------------------------------------------------------------
# forward / backward kernels


@njit(cache=True, parallel=True)
def _forward_kernel(entry_splat, tile_offsets, bucket_offsets,
                    mean2d, conic, opacity, color, depth,
                    width, height, tiles_x, early_stop,
                    out_color, out_depth, out_opac, out_trans, n_contrib,
                    ckpt_t, ckpt_rgb, ckpt_d):
    n_px = TILE * TILE
    for t in prange(tile_offsets.size - 1):
        x0 = (t % tiles_x) * TILE
        y0 = (t // tiles_x) * TILE
        tw = min(TILE, width - x0)
        th = min(TILE, height - y0)
        trans = np.ones(n_px)
        acc_rgb = np.zeros((n_px, 3))
        acc_d = np.zeros(n_px)
        cnt = np.zeros(n_px, np.int32)
        done = np.zeros(n_px, np.uint8)
        start = tile_offsets[t]
        stop = tile_offsets[t + 1]
        for e in range(start, stop):
            le = e - start
            if le % BUCKET == 0:
                b = bucket_offsets[t] + le // BUCKET
                for p in range(n_px):
                    ckpt_t[b, p] = trans[p]
                    ckpt_rgb[b, p, 0] = acc_rgb[p, 0]
                    ckpt_rgb[b, p, 1] = acc_rgb[p, 1]
                    ckpt_rgb[b, p, 2] = acc_rgb[p, 2]
                    ckpt_d[b, p] = acc_d[p]
            g = entry_splat[e]
            ca, cb, cc = conic[g, 0], conic[g, 1], conic[g, 2]
            mx, my = mean2d[g, 0], mean2d[g, 1]
            op = opacity[g]
            c0, c1, c2 = color[g, 0], color[g, 1], color[g, 2]
            dep = depth[g]
            for py in range(th):
                dy = (y0 + py) - my
                row = py * TILE
                for px in range(tw):
                    p = row + px
                    if done[p]:
                        continue
                    dx = (x0 + px) - mx
                    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    alpha = op * np.exp(-0.5 * q)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    w = alpha * trans[p]
                    acc_rgb[p, 0] += c0 * w
                    acc_rgb[p, 1] += c1 * w
                    acc_rgb[p, 2] += c2 * w
                    acc_d[p] += dep * w
                    trans[p] *= 1.0 - alpha
                    cnt[p] = le + 1
                    if early_stop and trans[p] < EARLY_STOP_T:
                        done[p] = 1
        for py in range(th):
            yy = y0 + py
            for px in range(tw):
                p = py * TILE + px
                xx = x0 + px
                out_color[yy, xx, 0] = acc_rgb[p, 0]
                out_color[yy, xx, 1] = acc_rgb[p, 1]
                out_color[yy, xx, 2] = acc_rgb[p, 2]
                out_depth[yy, xx] = acc_d[p]
                out_opac[yy, xx] = 1.0 - trans[p]
                out_trans[yy, xx] = trans[p]
                n_contrib[yy, xx] = cnt[p]


@njit(cache=True, parallel=True)
def _backward_kernel(entry_splat, tile_offsets, bucket_offsets,
                     mean2d, conic, opacity, color, depth,
                     width, height, tiles_x,
                     g_color_img, g_depth_img, g_opac_img,
                     total_rgb, total_d, final_t, n_contrib,
                     ckpt_t, ckpt_rgb, ckpt_d,
                     ge_mean2d, ge_conic, ge_op, ge_color, ge_depth):
    n_px = TILE * TILE
    for t in prange(tile_offsets.size - 1):
        x0 = (t % tiles_x) * TILE
        y0 = (t // tiles_x) * TILE
        tw = min(TILE, width - x0)
        th = min(TILE, height - y0)
        start = tile_offsets[t]
        stop = tile_offsets[t + 1]
        if stop == start:
            continue
        cnt = np.zeros(n_px, np.int32)
        tot_rgb = np.zeros((n_px, 3))
        tot_d = np.zeros(n_px)
        fin_t = np.ones(n_px)
        gc = np.zeros((n_px, 3))
        gd = np.zeros(n_px)
        go = np.zeros(n_px)
        for py in range(th):
            yy = y0 + py
            for px in range(tw):
                p = py * TILE + px
                xx = x0 + px
                cnt[p] = n_contrib[yy, xx]
                tot_rgb[p, 0] = total_rgb[yy, xx, 0]
                tot_rgb[p, 1] = total_rgb[yy, xx, 1]
                tot_rgb[p, 2] = total_rgb[yy, xx, 2]
                tot_d[p] = total_d[yy, xx]
                fin_t[p] = final_t[yy, xx]
                gc[p, 0] = g_color_img[yy, xx, 0]
                gc[p, 1] = g_color_img[yy, xx, 1]
                gc[p, 2] = g_color_img[yy, xx, 2]
                gd[p] = g_depth_img[yy, xx]
                go[p] = g_opac_img[yy, xx]

        n_buckets = (stop - start + BUCKET - 1) // BUCKET
        trans = np.empty(n_px)
        pre_rgb = np.empty((n_px, 3))
        pre_d = np.empty(n_px)
        for b in range(n_buckets):
            bidx = bucket_offsets[t] + b
            base = start + b * BUCKET
            lanes = min(BUCKET, stop - base)
            for p in range(n_px):
                trans[p] = ckpt_t[bidx, p]
                pre_rgb[p, 0] = ckpt_rgb[bidx, p, 0]
                pre_rgb[p, 1] = ckpt_rgb[bidx, p, 1]
                pre_rgb[p, 2] = ckpt_rgb[bidx, p, 2]
                pre_d[p] = ckpt_d[bidx, p]
            # Staggered lane schedule: at step s lane l touches pixel s - l,
            # so a pixel's running state visits entries strictly in order and
            # every lane accumulates into its own entry slot.
            for step in range(n_px + BUCKET - 1):
                lane_lo = max(0, step - n_px + 1)
                lane_hi = min(lanes - 1, step)
                for lane in range(lane_lo, lane_hi + 1):
                    p = step - lane
                    e = base + lane
                    le = e - start
                    if le >= cnt[p]:
                        continue
                    g = entry_splat[e]
                    mx, my = mean2d[g, 0], mean2d[g, 1]
                    dx = (x0 + (p % TILE)) - mx
                    dy = (y0 + (p // TILE)) - my
                    ca, cb, cc = conic[g, 0], conic[g, 1], conic[g, 2]
                    op = opacity[g]
                    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    alpha_raw = op * np.exp(-0.5 * q)
                    alpha = alpha_raw if alpha_raw <= ALPHA_CLAMP else ALPHA_CLAMP
                    tcur = trans[p]
                    w = alpha * tcur
                    c0, c1, c2 = color[g, 0], color[g, 1], color[g, 2]
                    dep = depth[g]

                    # Channel gradients for this entry at this pixel.
                    ge_color[e, 0] += w * gc[p, 0]
                    ge_color[e, 1] += w * gc[p, 1]
                    ge_color[e, 2] += w * gc[p, 2]
                    ge_depth[e] += w * gd[p]

                    # State after this entry; suffix sums exclude it.
                    tnext = tcur * (1.0 - alpha)
                    s_rgb0 = tot_rgb[p, 0] - (pre_rgb[p, 0] + c0 * w)
                    s_rgb1 = tot_rgb[p, 1] - (pre_rgb[p, 1] + c1 * w)
                    s_rgb2 = tot_rgb[p, 2] - (pre_rgb[p, 2] + c2 * w)
                    s_d = tot_d[p] - (pre_d[p] + dep * w)
                    s_o = tnext - fin_t[p]

                    dl_dalpha = (tcur * (c0 * gc[p, 0] + c1 * gc[p, 1] + c2 * gc[p, 2]
                                         + dep * gd[p] + go[p])
                                 - (s_rgb0 * gc[p, 0] + s_rgb1 * gc[p, 1]
                                    + s_rgb2 * gc[p, 2] + s_d * gd[p]
                                    + s_o * go[p]) / (1.0 - alpha))
                    if alpha_raw <= ALPHA_CLAMP:
                        gq = dl_dalpha * (-0.5 * alpha)
                        ge_op[e] += dl_dalpha * (alpha / op)
                        ge_conic[e, 0] += gq * dx * dx
                        ge_conic[e, 1] += gq * 2.0 * dx * dy
                        ge_conic[e, 2] += gq * dy * dy
                        ge_mean2d[e, 0] += gq * (-2.0 * (ca * dx + cb * dy))
                        ge_mean2d[e, 1] += gq * (-2.0 * (cb * dx + cc * dy))

                    pre_rgb[p, 0] += c0 * w
                    pre_rgb[p, 1] += c1 * w
                    pre_rgb[p, 2] += c2 * w
                    pre_d[p] += dep * w
                    trans[p] = tnext


@njit(cache=True)
def _reduce_entries(entry_splat, ge_mean2d, ge_conic, ge_op, ge_color, ge_depth,
                    n_splats):
    g_mean2d = np.zeros((n_splats, 2))
    g_conic = np.zeros((n_splats, 3))
    g_op = np.zeros(n_splats)
    g_color = np.zeros((n_splats, 3))
    g_depth = np.zeros(n_splats)
    touched = np.zeros(n_splats, np.bool_)
    for e in range(entry_splat.size):
        g = entry_splat[e]
        touched[g] = True
        g_mean2d[g, 0] += ge_mean2d[e, 0]
        g_mean2d[g, 1] += ge_mean2d[e, 1]
        g_conic[g, 0] += ge_conic[e, 0]
        g_conic[g, 1] += ge_conic[e, 1]
        g_conic[g, 2] += ge_conic[e, 2]
        g_op[g] += ge_op[e]
        g_color[g, 0] += ge_color[e, 0]
        g_color[g, 1] += ge_color[e, 1]
        g_color[g, 2] += ge_color[e, 2]
        g_depth[g] += ge_depth[e]
    return g_mean2d, g_conic, g_op, g_color, g_depth, touched


# ---------------------------------------------------------------------------
# public API


def forward(gmap: GaussianMap, cam: Camera, cull: bool = True,
            early_stop: bool = True) -> RenderOutput:
    """Render the map; keeps every record the backward pass needs."""
    proj = project(gmap, cam.rot_cw, cam.trans_cw, cam.intrinsics)
    opac = sigmoid(gmap.opacity_logit)
    center = cam.center()
    u = gmap.pos - center
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    norm = np.where(norm < 1e-12, 1.0, norm)
    dirs = u / norm
    colors, preclamp = eval_sh(gmap.sh_low, gmap.sh_high, dirs)

    entry_splat, tile_offsets, tiles_x, tiles_y = cull_tiles(
        proj["mean2d"], proj["conic"], proj["cov2d"], opac, proj["depth"],
        proj["valid"], cam.width, cam.height, cull=cull)

    counts = np.diff(tile_offsets)
    buckets = (counts + BUCKET - 1) // BUCKET
    bucket_offsets = np.concatenate([[0], np.cumsum(buckets)]).astype(np.int64)
    n_buckets = int(bucket_offsets[-1])

    h, w = cam.height, cam.width
    out_color = np.zeros((h, w, 3))
    out_depth = np.zeros((h, w))
    out_opac = np.zeros((h, w))
    out_trans = np.ones((h, w))
    n_contrib = np.zeros((h, w), np.int32)
    ckpt_t = np.empty((max(n_buckets, 1), TILE * TILE))
    ckpt_rgb = np.empty((max(n_buckets, 1), TILE * TILE, 3))
    ckpt_d = np.empty((max(n_buckets, 1), TILE * TILE))

    _forward_kernel(entry_splat, tile_offsets, bucket_offsets,
                    proj["mean2d"], proj["conic"], opac, colors, proj["depth"],
                    w, h, tiles_x, early_stop,
                    out_color, out_depth, out_opac, out_trans, n_contrib,
                    ckpt_t, ckpt_rgb, ckpt_d)

    ctx = {"proj": proj, "opac": opac, "colors": colors, "preclamp": preclamp,
           "dirs": dirs, "u_norm": norm, "entry_splat": entry_splat,
           "tile_offsets": tile_offsets, "bucket_offsets": bucket_offsets,
           "tiles_x": tiles_x, "cam": cam,
           "ckpt_t": ckpt_t, "ckpt_rgb": ckpt_rgb, "ckpt_d": ckpt_d}
    return RenderOutput(out_color, out_depth, out_opac, out_trans, n_contrib, ctx)


_QUAT_DR = None


def _quat_partials(quat: np.ndarray) -> np.ndarray:
    """dR/dq for unit-normalized quaternions: (N, 4, 3, 3)."""
    q = quat / np.linalg.norm(quat, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1).reshape(-1, 3, 3)
    dx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1).reshape(-1, 3, 3)
    dy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1).reshape(-1, 3, 3)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1).reshape(-1, 3, 3)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1)


def backward_2d(out: RenderOutput, g_color_img: np.ndarray,
                g_depth_img: np.ndarray | None = None,
                g_opac_img: np.ndarray | None = None):
    """Per-splat gradients in screen space.

    Returns ``(g_mean2d, g_conic, g_opacity, g_color, g_depth, touched)``
    where g_opacity is w.r.t. the post-sigmoid opacity and g_depth w.r.t. the
    per-splat depth value blended into the depth channel.
    """
    ctx = out.ctx
    cam: Camera = ctx["cam"]
    proj = ctx["proj"]
    h, w = cam.height, cam.width
    if g_depth_img is None:
        g_depth_img = np.zeros((h, w))
    if g_opac_img is None:
        g_opac_img = np.zeros((h, w))

    entry_splat = ctx["entry_splat"]
    n = proj["mean2d"].shape[0]
    n_e = entry_splat.size
    ge_mean2d = np.zeros((max(n_e, 1), 2))
    ge_conic = np.zeros((max(n_e, 1), 3))
    ge_op = np.zeros(max(n_e, 1))
    ge_color = np.zeros((max(n_e, 1), 3))
    ge_depth = np.zeros(max(n_e, 1))

    _backward_kernel(entry_splat, ctx["tile_offsets"], ctx["bucket_offsets"],
                     proj["mean2d"], proj["conic"], ctx["opac"], ctx["colors"],
                     proj["depth"], w, h, ctx["tiles_x"],
                     np.ascontiguousarray(g_color_img, dtype=np.float64),
                     np.ascontiguousarray(g_depth_img, dtype=np.float64),
                     np.ascontiguousarray(g_opac_img, dtype=np.float64),
                     out.color, out.depth, out.transmittance, out.n_contrib,
                     ctx["ckpt_t"], ctx["ckpt_rgb"], ctx["ckpt_d"],
                     ge_mean2d, ge_conic, ge_op, ge_color, ge_depth)

    return _reduce_entries(entry_splat, ge_mean2d, ge_conic, ge_op,
                           ge_color, ge_depth, n)


def backward(gmap: GaussianMap, out: RenderOutput,
             g_color_img: np.ndarray, g_depth_img: np.ndarray | None = None,
             g_opac_img: np.ndarray | None = None, with_pose: bool = False):
    """Gradients of a scalar loss w.r.t. all splat attributes (and the pose).

    Inputs are the loss gradients w.r.t. the rendered color / depth / opacity
    images.  Returns ``(grads, touched, pose_grad)`` where grads mirrors
    ``gmap.parameters()`` and pose_grad is the 6-vector ``(rho, theta)`` on
    the left tangent of T_cw (None unless requested).
    """
    g_mean2d, g_conic, g_op_sig, g_color, g_depthval, touched = backward_2d(
        out, g_color_img, g_depth_img, g_opac_img)
    return _chain_to_attributes(gmap, out.ctx, g_mean2d, g_conic, g_op_sig,
                                g_color, g_depthval, touched, with_pose)


def _chain_to_attributes(gmap, ctx, g_mean2d, g_conic, g_op_sig, g_color,
                         g_depthval, touched, with_pose):
    cam: Camera = ctx["cam"]
    proj = ctx["proj"]
    opac = ctx["opac"]
    rot_cw = cam.rot_cw
    fx, fy = cam.fx, cam.fy

    idx = np.flatnonzero(touched)
    n = len(gmap)
    grads = {"pos": np.zeros((n, 3)), "log_scale": np.zeros((n, 3)),
             "quat": np.zeros((n, 4)), "opacity_logit": np.zeros(n),
             "sh_low": np.zeros((n, 3)), "sh_high": np.zeros((n, 15, 3))}
    pose = np.zeros(6) if with_pose else None
    if idx.size == 0:
        return grads, touched, pose

    mu_cam = proj["mu_cam"][idx]
    z = mu_cam[:, 2]
    m = proj["m"][idx]
    jproj = proj["jproj"][idx]
    cov3d = proj["cov3d"][idx]
    conic = proj["conic"][idx]

    # conic -> 2x2 covariance.
    cmat = np.empty((idx.size, 2, 2))
    cmat[:, 0, 0] = conic[:, 0]
    cmat[:, 0, 1] = cmat[:, 1, 0] = conic[:, 1]
    cmat[:, 1, 1] = conic[:, 2]
    gc_mat = np.empty_like(cmat)
    gc_mat[:, 0, 0] = g_conic[idx, 0]
    gc_mat[:, 0, 1] = gc_mat[:, 1, 0] = 0.5 * g_conic[idx, 1]
    gc_mat[:, 1, 1] = g_conic[idx, 2]
    g_cov2d = -cmat @ gc_mat @ cmat

    # cov2d = M cov3d M^T (+ dilation).
    g_sigma = np.swapaxes(m, 1, 2) @ g_cov2d @ m
    g_m = 2.0 * g_cov2d @ m @ cov3d
    g_j = g_m @ rot_cw.T

    # J and mean2d depend on the camera-frame mean.
    gx = g_j[:, 0, 2] * (-fx / z**2)
    gy = g_j[:, 1, 2] * (-fy / z**2)
    gz = (g_j[:, 0, 0] * (-fx / z**2) + g_j[:, 1, 1] * (-fy / z**2)
          + g_j[:, 0, 2] * (2.0 * fx * mu_cam[:, 0] / z**3)
          + g_j[:, 1, 2] * (2.0 * fy * mu_cam[:, 1] / z**3))
    gx += g_mean2d[idx, 0] * fx / z
    gy += g_mean2d[idx, 1] * fy / z
    gz += (-g_mean2d[idx, 0] * fx * mu_cam[:, 0] / z**2
           - g_mean2d[idx, 1] * fy * mu_cam[:, 1] / z**2)
    gz += g_depthval[idx]
    g_mu_cam = np.stack([gx, gy, gz], axis=1)
    grads["pos"][idx] += g_mu_cam @ rot_cw

    # Covariance factors: Sigma = (R S)(R S)^T.
    quat = gmap.quat[idx]
    rotm = quat_rotmats(quat)
    s = np.exp(gmap.log_scale[idx])
    n_mat = rotm * s[:, None, :]
    g_n = 2.0 * g_sigma @ n_mat
    ds = np.einsum("nij,nij->nj", rotm, g_n)
    grads["log_scale"][idx] += ds * s
    g_rotm = g_n * s[:, None, :]
    dr_dq = _quat_partials(quat)
    gq_unit = np.einsum("nij,nkij->nk", g_rotm, dr_dq)
    qn = np.linalg.norm(quat, axis=1, keepdims=True)
    qhat = quat / qn
    grads["quat"][idx] += (gq_unit - qhat * np.sum(gq_unit * qhat, axis=1, keepdims=True)) / qn

    # Opacity logit.
    o = opac[idx]
    grads["opacity_logit"][idx] += g_op_sig[idx] * o * (1.0 - o)

    # SH color, including the view-direction dependence.
    dirs = ctx["dirs"][idx]
    preclamp = ctx["preclamp"][idx]
    gcol = g_color[idx] * (preclamp > 0.0)
    basis = sh_basis(dirs)
    grads["sh_low"][idx] += basis[:, :1] * gcol
    grads["sh_high"][idx] += basis[:, 1:, None] * gcol[:, None, :]
    sh_all = np.concatenate([gmap.sh_low[idx][:, None, :], gmap.sh_high[idx]], axis=1)
    bgrad = sh_basis_grad(dirs)
    gdir = np.einsum("nkd,nkc,nc->nd", bgrad, sh_all, gcol)
    u_norm = ctx["u_norm"][idx]
    gu = (gdir - dirs * np.sum(gdir * dirs, axis=1, keepdims=True)) / u_norm
    grads["pos"][idx] += gu

    if with_pose:
        pose = np.zeros(6)
        pose[:3] += g_mu_cam.sum(axis=0)
        pose[3:] += np.cross(mu_cam, g_mu_cam).sum(axis=0)
        # Covariance rotation path: M = J R_cw, left-perturbed R_cw.
        g_rcw = np.einsum("nji,njk->nik", jproj, g_m)  # J^T gM per splat
        x_mat = np.einsum("nij,kj->nik", g_rcw, rot_cw).sum(axis=0)  # sum g_rcw R_cw^T
        pose[3] += x_mat[2, 1] - x_mat[1, 2]
        pose[4] += x_mat[0, 2] - x_mat[2, 0]
        pose[5] += x_mat[1, 0] - x_mat[0, 1]
        # View-direction path: camera center moves with rho only.
        pose[:3] += rot_cw @ gu.sum(axis=0)
    return grads, touched, pose


def pose_backward(gmap: GaussianMap, out: RenderOutput, g_color_img: np.ndarray,
                  g_depth_img: np.ndarray | None = None,
                  g_opac_img: np.ndarray | None = None) -> np.ndarray:
    """Loss gradient w.r.t. the camera pose only (6-vector, left tangent)."""
    _, _, pose = backward(gmap, out, g_color_img, g_depth_img, g_opac_img,
                          with_pose=True)
    return pose


# ---------------------------------------------------------------------------
# sparse Adam


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


def default_lrs(scene_extent: float) -> dict:
    return {"pos": 1.6e-4 * scene_extent, "sh_low": 2.5e-3, "sh_high": 1.25e-4,
            "opacity_logit": 0.05, "log_scale": 5e-3, "quat": 1e-3}


class AdamState:
    """First/second moments plus a per-splat step counter (sparse semantics)."""

    def __init__(self) -> None:
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = np.zeros(0, np.int64)

    def ensure(self, gmap: GaussianMap) -> None:
        n = len(gmap)
        if self.t.size < n:
            grow = n - self.t.size
            self.t = np.concatenate([self.t, np.zeros(grow, np.int64)])
            for name, arr in gmap.parameters().items():
                pad = np.zeros((grow,) + arr.shape[1:])
                if name in self.m:
                    self.m[name] = np.concatenate([self.m[name], pad])
                    self.v[name] = np.concatenate([self.v[name], pad.copy()])
                else:
                    self.m[name] = np.zeros_like(arr)
                    self.v[name] = np.zeros_like(arr)


def sparse_adam_step(gmap: GaussianMap, grads: dict, touched: np.ndarray,
                     state: AdamState, lrs: dict) -> None:
    """Adam update restricted to splats touched by the last backward pass."""
    state.ensure(gmap)
    idx = np.flatnonzero(touched)
    if idx.size == 0:
        return
    state.t[idx] += 1
    t = state.t[idx]
    for name, param in gmap.parameters().items():
        g = grads[name][idx]
        extra = (1,) * (param.ndim - 1)
        m = state.m[name][idx] * ADAM_BETA1 + (1 - ADAM_BETA1) * g
        v = state.v[name][idx] * ADAM_BETA2 + (1 - ADAM_BETA2) * g * g
        state.m[name][idx] = m
        state.v[name][idx] = v
        mhat = m / (1.0 - ADAM_BETA1 ** t).reshape((-1,) + extra)
        vhat = v / (1.0 - ADAM_BETA2 ** t).reshape((-1,) + extra)
        param[idx] -= lrs[name] * mhat / (np.sqrt(vhat) + ADAM_EPS)
