"""Dense depth from a sparse projected-LiDAR map plus the RGB image.

Classical stand-in for a learned completer, kept behind the same
call signature (image, sparse_depth, valid_mask) so one can be swapped in.
The recipe: a coarse-to-fine nearest-valid fill seeds every pixel, then a
few image-guided joint-bilateral iterations sharpen the fill along
intensity edges.  Valid sparse pixels are exact in the output.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange
from scipy import ndimage

MIN_VALID = 50
SPATIAL_SIGMA = 8.0
RANGE_SIGMA = 0.1
REFINE_ITERS = 3
MIN_DEPTH = 1e-3


def _halve(depth: np.ndarray, valid: np.ndarray):
    """One pyramid octave: per-2x2-block mean over valid pixels."""
    h, w = depth.shape
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    pad_d = np.zeros((h2 * 2, w2 * 2))
    pad_v = np.zeros((h2 * 2, w2 * 2), dtype=bool)
    pad_d[:h, :w] = np.where(valid, depth, 0.0)
    pad_v[:h, :w] = valid
    blocks_d = pad_d.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    blocks_n = pad_v.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    out_v = blocks_n > 0
    out_d = np.where(out_v, blocks_d / np.maximum(blocks_n, 1), 0.0)
    return out_d, out_v


def _nearest_fill(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    if valid.all():
        return depth
    idx = ndimage.distance_transform_edt(~valid, return_distances=False,
                                         return_indices=True)
    return depth[idx[0], idx[1]]


def _upsample(coarse: np.ndarray, shape) -> np.ndarray:
    """Bilinear 2x upsample onto an (h, w) grid (block-center alignment)."""
    h, w = shape
    ys = (np.arange(h) + 0.5) / 2.0 - 0.5
    xs = (np.arange(w) + 0.5) / 2.0 - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(coarse, grid, order=1, mode="nearest")


def multiscale_fill(sparse_depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Every pixel gets a depth from the nearest valid sample, coarse first.

    Builds a valid-mean pyramid, fills the coarsest level exactly by
    nearest-valid lookup, and walks back down letting measured pixels
    overwrite the interpolated estimate at every scale.
    """
    levels = [(sparse_depth, valid)]
    while min(levels[-1][0].shape) > 4 and not levels[-1][1].all():
        levels.append(_halve(*levels[-1]))
    est = _nearest_fill(*levels[-1])
    for depth, mask in reversed(levels[:-1]):
        est = _upsample(est, depth.shape)
        est = np.where(mask, depth, est)
    return est


@njit(cache=True, parallel=True)
def _joint_bilateral(depth, gray, sigma_s, sigma_r, radius, out):
    h, w = depth.shape
    inv2s = 1.0 / (2.0 * sigma_s * sigma_s)
    inv2r = 1.0 / (2.0 * sigma_r * sigma_r)
    for y in prange(h):
        for x in range(w):
            g0 = gray[y, x]
            acc = 0.0
            norm = 0.0
            y0 = max(0, y - radius)
            y1 = min(h - 1, y + radius)
            x0 = max(0, x - radius)
            x1 = min(w - 1, x + radius)
            for ny in range(y0, y1 + 1):
                dy = ny - y
                for nx in range(x0, x1 + 1):
                    dx = nx - x
                    dg = gray[ny, nx] - g0
                    wgt = np.exp(-(dx * dx + dy * dy) * inv2s - dg * dg * inv2r)
                    acc += wgt * depth[ny, nx]
                    norm += wgt
            out[y, x] = acc / norm


def classical_complete(image: np.ndarray, sparse_depth: np.ndarray,
                       valid_mask: np.ndarray) -> np.ndarray:
    """The (image, sparse, mask) completer interface, classical backend."""
    sparse_depth = np.asarray(sparse_depth, dtype=np.float64)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    gray = np.asarray(image, dtype=np.float64).mean(axis=2)
    est = multiscale_fill(sparse_depth, valid_mask)
    radius = int(round(2.0 * SPATIAL_SIGMA))
    out = np.empty_like(est)
    for _ in range(REFINE_ITERS):
        _joint_bilateral(est, gray, SPATIAL_SIGMA, RANGE_SIGMA, radius, out)
        # measured pixels stay exact through every refinement pass
        est = np.where(valid_mask, sparse_depth, out)
    return np.maximum(est, MIN_DEPTH)


def complete_depth(sparse_depth: np.ndarray, image: np.ndarray,
                   completer=classical_complete):
    """Dense positive depth, or None when the sparse map is too thin."""
    sparse_depth = np.asarray(sparse_depth, dtype=np.float64)
    valid = sparse_depth > 0
    if int(valid.sum()) < MIN_VALID:
        return None
    return completer(image, sparse_depth, valid)
