"""Photometric and depth losses with analytic gradients.

Structural similarity follows the standard 11x11 Gaussian-window formulation
(sigma 1.5, C1 = 0.01^2, C2 = 0.03^2 at unit data range), computed with
separable convolutions over reflect-padded images.  The gradient implements
the exact adjoint of that operator chain, including the reflect-padding fold,
so finite differences agree at border pixels too.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
_PAD = WINDOW // 2


def _kernel() -> np.ndarray:
    x = np.arange(WINDOW) - _PAD
    k = np.exp(-(x ** 2) / (2.0 * SIGMA ** 2))
    return k / k.sum()


_K = _kernel()


def _reflect_indices(n: int) -> np.ndarray:
    """Source index for every position of a reflect-padded axis (no edge repeat).

    Triangle-wave reflection, valid even when the pad exceeds the axis length
    (windows larger than the image keep bouncing between the borders).
    """
    if n == 1:
        return np.zeros(1 + 2 * _PAD, dtype=np.intp)
    idx = np.arange(-_PAD, n + _PAD)
    period = 2 * n - 2
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _blur(img: np.ndarray) -> np.ndarray:
    """Gaussian filter with reflect padding; works on (H, W) or (H, W, C)."""
    ih = _reflect_indices(img.shape[0])
    iw = _reflect_indices(img.shape[1])
    padded = img[ih][:, iw]
    out = convolve1d(padded, _K, axis=0, mode="constant")
    out = convolve1d(out, _K, axis=1, mode="constant")
    return out[_PAD:-_PAD, _PAD:-_PAD]


def _blur_adjoint(grad: np.ndarray, shape) -> np.ndarray:
    """Exact adjoint of :func:`_blur` (zero-embed, correlate, fold reflections)."""
    h, w = shape[0], shape[1]
    padded = np.zeros((h + 2 * _PAD, w + 2 * _PAD) + grad.shape[2:], dtype=np.float64)
    padded[_PAD:-_PAD, _PAD:-_PAD] = grad
    padded = convolve1d(padded, _K[::-1], axis=0, mode="constant")
    padded = convolve1d(padded, _K[::-1], axis=1, mode="constant")
    ih = _reflect_indices(h)
    iw = _reflect_indices(w)
    folded_rows = np.zeros((h,) + padded.shape[1:], dtype=np.float64)
    np.add.at(folded_rows, ih, padded)
    out = np.zeros((h, w) + grad.shape[2:], dtype=np.float64)
    np.add.at(out.transpose(1, 0, *range(2, out.ndim)), iw,
              folded_rows.transpose(1, 0, *range(2, folded_rows.ndim)))
    return out


def ssim(img_a: np.ndarray, img_b: np.ndarray):
    """Mean SSIM and the per-pixel map (same shape as the inputs)."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    ua, ub = _blur(a), _blur(b)
    uaa, ubb, uab = _blur(a * a), _blur(b * b), _blur(a * b)
    va = uaa - ua * ua
    vb = ubb - ub * ub
    vab = uab - ua * ub
    a1 = 2.0 * ua * ub + C1
    a2 = 2.0 * vab + C2
    b1 = ua * ua + ub * ub + C1
    b2 = va + vb + C2
    smap = (a1 * a2) / (b1 * b2)
    return float(np.mean(smap)), smap


def dssim_and_grad(rendered: np.ndarray, target: np.ndarray):
    """``(1 - SSIM)/2`` and its exact gradient w.r.t. the rendered image."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    ua, ub = _blur(a), _blur(b)
    uaa, uab = _blur(a * a), _blur(a * b)
    ubb = _blur(b * b)
    va = uaa - ua * ua
    vb = ubb - ub * ub
    vab = uab - ua * ub
    a1 = 2.0 * ua * ub + C1
    a2 = 2.0 * vab + C2
    b1 = ua * ua + ub * ub + C1
    b2 = va + vb + C2
    denom = b1 * b2
    smap = (a1 * a2) / denom

    n = a.size
    # Pointwise partials of mean(S) w.r.t. the blurred intermediates.
    g_ua = (2.0 * ub * a2 - 2.0 * a1 * ub) / denom - smap * (2.0 * ua / b1) + smap * (2.0 * ua / b2)
    g_uaa = -smap / b2
    g_uab = 2.0 * a1 / denom
    g_ua = g_ua / n
    g_uaa = g_uaa / n
    g_uab = g_uab / n

    grad_mean_ssim = (_blur_adjoint(g_ua, a.shape)
                      + 2.0 * a * _blur_adjoint(g_uaa, a.shape)
                      + b * _blur_adjoint(g_uab, a.shape))
    value = 0.5 * (1.0 - float(np.mean(smap)))
    return value, -0.5 * grad_mean_ssim


def photometric_loss(rendered: np.ndarray, target: np.ndarray, lam: float):
    """(1-lam) L1 + lam DSSIM with gradient w.r.t. the rendered image."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    diff = a - b
    l1 = float(np.mean(np.abs(diff)))
    g_l1 = np.sign(diff) / diff.size
    d_val, d_grad = dssim_and_grad(a, b)
    return (1.0 - lam) * l1 + lam * d_val, (1.0 - lam) * g_l1 + lam * d_grad


def depth_ratio_loss(depth: np.ndarray, opac: np.ndarray, sparse_depth: np.ndarray,
                     guard: float = 1e-6):
    """L1 between alpha-normalized rendered depth and sparse LiDAR depth.

    Valid pixels are where ``sparse_depth > 0``; the rendered ratio is
    ``depth / max(opac, guard)`` (quotient-rule gradients, guard region has
    zero opacity gradient).  Returns (value, d/d depth, d/d opac).
    """
    mask = sparse_depth > 0
    nv = int(np.count_nonzero(mask))
    gd = np.zeros_like(depth)
    go = np.zeros_like(opac)
    if nv == 0:
        return 0.0, gd, go
    safe_o = np.maximum(opac, guard)
    ratio = depth / safe_o
    r = np.where(mask, ratio - sparse_depth, 0.0)
    value = float(np.abs(r).sum() / nv)
    s = np.sign(r) / nv
    gd[mask] = (s / safe_o)[mask]
    go[mask] = (-s * depth / safe_o**2 * (opac >= guard))[mask]
    return value, gd, go


def mapping_loss(color, depth, opac, target_color, sparse_depth, lam: float, xi: float):
    """Full mapping objective L = Lc + xi * Ld; returns value and gradients."""
    lc, g_color = photometric_loss(color, target_color, lam)
    ld, g_depth, g_opac = depth_ratio_loss(depth, opac, sparse_depth)
    return lc + xi * ld, g_color, xi * g_depth, xi * g_opac
