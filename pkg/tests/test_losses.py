"""SSIM / photometric / depth loss checks against skimage and finite differences."""

import numpy as np
import pytest
from scipy import ndimage
from skimage.metrics import structural_similarity

from splatslam import losses as L
from oracles import rel_err


def pair(seed, h=24, w=32):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (h, w, 3))
    b = np.clip(a + 0.15 * rng.standard_normal((h, w, 3)), 0, 1)
    return a, b


class TestSsim:
    def test_identical_images(self):
        a, _ = pair(0)
        mean, smap = L.ssim(a, a)
        assert np.isclose(mean, 1.0, atol=1e-12)
        assert np.allclose(smap, 1.0, atol=1e-12)
        val, grad = L.dssim_and_grad(a, a)
        assert np.isclose(val, 0.0, atol=1e-12)

    def test_interior_matches_skimage(self):
        a, b = pair(1, h=32, w=40)
        _, smap = L.ssim(a, b)
        for c in range(3):
            _, ref = structural_similarity(
                a[..., c], b[..., c], win_size=11, gaussian_weights=True,
                sigma=1.5, use_sample_covariance=False, data_range=1.0,
                full=True)
            got = smap[5:-5, 5:-5, c]
            assert np.max(np.abs(got - ref[5:-5, 5:-5])) < 1e-10

    def test_separable_blur_matches_dense_conv(self):
        a, _ = pair(2)
        k1 = L._kernel()
        k2 = np.outer(k1, k1)
        for c in range(3):
            dense = ndimage.convolve(a[..., c], k2, mode="mirror")
            assert np.max(np.abs(L._blur(a[..., c : c + 1])[..., 0] - dense)) < 1e-10

    def test_dssim_gradient_fd(self):
        a, b = pair(3, h=20, w=26)
        _, grad = L.dssim_and_grad(a, b)
        rng = np.random.default_rng(4)
        # include corners and edges on purpose: the adjoint must handle padding
        probes = [(0, 0, 0), (19, 25, 2), (0, 13, 1), (10, 0, 2)]
        probes += [tuple(x) for x in zip(rng.integers(0, 20, 46),
                                         rng.integers(0, 26, 46),
                                         rng.integers(0, 3, 46))]
        step = 1e-5
        for py, px, ch in probes:
            ap = a.copy()
            ap[py, px, ch] += step
            am = a.copy()
            am[py, px, ch] -= step
            fd = (L.dssim_and_grad(ap, b)[0] - L.dssim_and_grad(am, b)[0]) / (2 * step)
            assert rel_err(grad[py, px, ch], fd, floor=1e-6) < 1e-5

    def test_symmetry_range(self):
        a, b = pair(5)
        val, _ = L.dssim_and_grad(a, b)
        val_t, _ = L.dssim_and_grad(b, a)
        assert 0.0 <= val <= 1.0
        # SSIM itself is symmetric; the gradient is w.r.t. the first argument
        assert np.isclose(val, val_t, atol=1e-12)


class TestPhotometric:
    def test_zero_at_equality(self):
        a, _ = pair(6)
        val, grad = L.photometric_loss(a, a, lam=0.2)
        assert np.isclose(val, 0.0, atol=1e-12)

    def test_lambda_zero_is_l1(self):
        a, b = pair(7)
        val, grad = L.photometric_loss(a, b, lam=0.0)
        assert np.isclose(val, np.mean(np.abs(a - b)), atol=1e-13)
        assert np.allclose(grad, np.sign(a - b) / a.size, atol=1e-13)

    def test_gradient_fd(self):
        a, b = pair(8, h=18, w=22)
        _, grad = L.photometric_loss(a, b, lam=0.2)
        rng = np.random.default_rng(9)
        step = 1e-6
        for _ in range(20):
            py, px, ch = rng.integers(0, 18), rng.integers(0, 22), rng.integers(0, 3)
            if abs(a[py, px, ch] - b[py, px, ch]) < 1e-4:
                continue  # keep clear of the L1 kink
            ap = a.copy()
            ap[py, px, ch] += step
            am = a.copy()
            am[py, px, ch] -= step
            fd = (L.photometric_loss(ap, b, 0.2)[0]
                  - L.photometric_loss(am, b, 0.2)[0]) / (2 * step)
            assert rel_err(grad[py, px, ch], fd, floor=1e-6) < 1e-4


class TestDepthRatio:
    def test_single_pixel_example(self):
        depth = np.zeros((4, 4))
        opac = np.zeros((4, 4))
        sparse = np.zeros((4, 4))
        depth[1, 2] = 1.5
        opac[1, 2] = 0.5  # ratio 3.0
        sparse[1, 2] = 2.0
        val, gd, go = L.depth_ratio_loss(depth, opac, sparse)
        assert np.isclose(val, 1.0, atol=1e-14)
        # only the valid pixel carries gradient
        mask = np.zeros((4, 4), bool)
        mask[1, 2] = True
        assert not gd[~mask].any() and not go[~mask].any()

    def test_mapping_loss_example(self):
        a, _ = pair(10, h=4, w=4)
        depth = np.full((4, 4), 1.5)
        opac = np.full((4, 4), 0.5)
        sparse = np.zeros((4, 4))
        sparse[1, 2] = 2.0
        val, gc, gd, go = L.mapping_loss(a, depth, opac, a, sparse,
                                         lam=0.2, xi=1.0)
        assert np.isclose(val, 1.0, atol=1e-12)

    def test_zero_when_consistent(self):
        rng = np.random.default_rng(11)
        opac = rng.uniform(0.5, 1.0, (6, 6))
        sparse = rng.uniform(1.0, 5.0, (6, 6)) * (rng.uniform(size=(6, 6)) > 0.4)
        depth = sparse * opac
        val, gd, go = L.depth_ratio_loss(depth, opac, sparse)
        assert np.isclose(val, 0.0, atol=1e-14)

    def test_gradient_fd(self):
        rng = np.random.default_rng(12)
        depth = rng.uniform(1.0, 4.0, (8, 8))
        opac = rng.uniform(0.3, 0.9, (8, 8))
        sparse = rng.uniform(1.0, 5.0, (8, 8)) * (rng.uniform(size=(8, 8)) > 0.5)
        _, gd, go = L.depth_ratio_loss(depth, opac, sparse)
        step = 1e-6
        for arr, grad in ((depth, gd), (opac, go)):
            for _ in range(12):
                py, px = rng.integers(0, 8), rng.integers(0, 8)
                if sparse[py, px] == 0:
                    assert grad[py, px] == 0.0
                    continue
                orig = arr[py, px]
                arr[py, px] = orig + step
                lp = L.depth_ratio_loss(depth, opac, sparse)[0]
                arr[py, px] = orig - step
                lm = L.depth_ratio_loss(depth, opac, sparse)[0]
                arr[py, px] = orig
                assert rel_err(grad[py, px], (lp - lm) / (2 * step),
                               floor=1e-6) < 1e-4

    def test_zero_opacity_guarded(self):
        depth = np.ones((3, 3))
        opac = np.zeros((3, 3))
        sparse = np.ones((3, 3))
        val, gd, go = L.depth_ratio_loss(depth, opac, sparse)
        assert np.isfinite(val)
        assert not go.any()  # gradient gated off inside the guard region
        assert np.all(np.isfinite(gd))
