"""Anisotropic 3D Gaussian splat primitives stored as structure-of-arrays.

Attributes per splat: world position, log of per-axis scale, unit rotation
quaternion (wxyz), opacity as a logit, and real spherical-harmonic color
coefficients split into a degree-0 block (``sh_low``, 3 floats) and a
degree-1..3 block (``sh_high``, 15 x 3 floats).

World covariance is ``R diag(exp(ls))^2 R^T``.  Projection into a pinhole
camera linearizes at the mean: ``cov2d = J R_cw Sigma R_cw^T J^T + 0.3 I``
(the 0.3-pixel dilation guarantees an invertible, well-conditioned 2x2).
Pixel centers sit at integer coordinates, so a point on the optical axis of a
camera with principal point (cx, cy) projects exactly to pixel (cx, cy).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

N_SH = 16  # degree 0..3
DILATION = 0.3
NEAR_CLIP = 0.01
ALPHA_CLAMP = 0.99
INIT_OPACITY = 0.1


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Real SH basis values, degrees 0..3, for unit directions (N, 3) -> (N, 16)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    b = np.empty(d.shape[:-1] + (N_SH,), dtype=np.float64)
    b[..., 0] = SH_C0
    b[..., 1] = -SH_C1 * y
    b[..., 2] = SH_C1 * z
    b[..., 3] = -SH_C1 * x
    b[..., 4] = SH_C2[0] * xy
    b[..., 5] = SH_C2[1] * yz
    b[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    b[..., 7] = SH_C2[3] * xz
    b[..., 8] = SH_C2[4] * (xx - yy)
    b[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    b[..., 10] = SH_C3[1] * xy * z
    b[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    b[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    b[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    b[..., 14] = SH_C3[5] * z * (xx - yy)
    b[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return b


def sh_basis_grad(dirs: np.ndarray) -> np.ndarray:
    """Partial derivatives of each basis value w.r.t. the (unnormalized-safe)
    direction components: (N, 3) -> (N, 16, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(d.shape[:-1] + (N_SH, 3), dtype=np.float64)
    g[..., 1, 1] = -SH_C1
    g[..., 2, 2] = SH_C1
    g[..., 3, 0] = -SH_C1
    g[..., 4, :] = SH_C2[0] * np.stack([y, x, zero], axis=-1)
    g[..., 5, :] = SH_C2[1] * np.stack([zero, z, y], axis=-1)
    g[..., 6, :] = SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=-1)
    g[..., 7, :] = SH_C2[3] * np.stack([z, zero, x], axis=-1)
    g[..., 8, :] = SH_C2[4] * np.stack([2 * x, -2 * y, zero], axis=-1)
    g[..., 9, :] = SH_C3[0] * np.stack([6 * x * y, 3 * x * x - 3 * y * y, zero], axis=-1)
    g[..., 10, :] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=-1)
    g[..., 11, :] = SH_C3[2] * np.stack([-2 * x * y, 4 * z * z - x * x - 3 * y * y, 8 * y * z], axis=-1)
    g[..., 12, :] = SH_C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * z * z - 3 * x * x - 3 * y * y], axis=-1)
    g[..., 13, :] = SH_C3[4] * np.stack([4 * z * z - 3 * x * x - y * y, -2 * x * y, 8 * x * z], axis=-1)
    g[..., 14, :] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, x * x - y * y], axis=-1)
    g[..., 15, :] = SH_C3[6] * np.stack([3 * x * x - 3 * y * y, -6 * x * y, zero], axis=-1)
    return g


def eval_sh(sh_low: np.ndarray, sh_high: np.ndarray, dirs: np.ndarray):
    """Colors from SH coefficients along unit view directions.

    Returns (colors, preclamp): colors are ``max(basis . sh + 0.5, 0)``;
    preclamp is kept so gradients can be zeroed where the clamp is active.
    """
    basis = sh_basis(dirs)
    pre = (basis[..., :1] * sh_low
           + np.einsum("...k,...kc->...c", basis[..., 1:], sh_high) + 0.5)
    return np.maximum(pre, 0.0), pre


# ---------------------------------------------------------------------------
# map container


@dataclass
class GaussianMap:
    """Structure-of-arrays container; rows are individual splats."""

    pos: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    quat: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    opacity_logit: np.ndarray = field(default_factory=lambda: np.zeros((0,)))
    sh_low: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sh_high: np.ndarray = field(default_factory=lambda: np.zeros((0, 15, 3)))

    def __len__(self) -> int:
        return len(self.pos)

    def append(self, other: "GaussianMap") -> None:
        for name in ("pos", "log_scale", "quat", "opacity_logit", "sh_low", "sh_high"):
            setattr(self, name, np.concatenate([getattr(self, name), getattr(other, name)]))

    def snapshot(self) -> "GaussianMap":
        """Independent copy safe to render from while the original trains."""
        return GaussianMap(self.pos.copy(), self.log_scale.copy(), self.quat.copy(),
                           self.opacity_logit.copy(), self.sh_low.copy(), self.sh_high.copy())

    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def covariance(self) -> np.ndarray:
        return covariance_from(self.quat, self.log_scale)

    def parameters(self):
        return {"pos": self.pos, "log_scale": self.log_scale, "quat": self.quat,
                "opacity_logit": self.opacity_logit, "sh_low": self.sh_low,
                "sh_high": self.sh_high}


def quat_rotmats(quat: np.ndarray) -> np.ndarray:
    q = np.asarray(quat, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = (q[..., i] for i in range(4))
    rot = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def covariance_from(quat: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World covariance R diag(s)^2 R^T; symmetric PSD by construction."""
    rot = quat_rotmats(quat)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return np.einsum("...ij,...j,...kj->...ik", rot, s2, rot)


def project(gmap: GaussianMap, rot_cw: np.ndarray, trans_cw: np.ndarray, intrinsics):
    """Project all splats into a pinhole camera.

    intrinsics: (fx, fy, cx, cy).  Returns a dict with camera-frame means,
    pixel means, 2x2 covariances (dilated), conics, depths and a validity
    mask (in front of the near plane at 0.01 m with invertible covariance).
    """
    fx, fy, cx, cy = intrinsics
    mu_cam = gmap.pos @ rot_cw.T + trans_cw
    z = mu_cam[:, 2]
    valid = z > NEAR_CLIP
    zs = np.where(valid, z, 1.0)

    mean2d = np.stack([fx * mu_cam[:, 0] / zs + cx, fy * mu_cam[:, 1] / zs + cy], axis=1)

    jproj = np.zeros((len(gmap), 2, 3))
    jproj[:, 0, 0] = fx / zs
    jproj[:, 0, 2] = -fx * mu_cam[:, 0] / zs**2
    jproj[:, 1, 1] = fy / zs
    jproj[:, 1, 2] = -fy * mu_cam[:, 1] / zs**2
    m = jproj @ rot_cw
    cov3d = gmap.covariance()
    cov2d = m @ cov3d @ np.swapaxes(m, 1, 2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    valid &= det > 1e-12
    valid &= np.isfinite(det)
    dets = np.where(valid, det, 1.0)
    conic = np.stack([cov2d[:, 1, 1] / dets, -cov2d[:, 0, 1] / dets,
                      cov2d[:, 0, 0] / dets], axis=1)
    return {
        "mu_cam": mu_cam, "mean2d": mean2d, "cov2d": cov2d, "conic": conic,
        "depth": z, "valid": valid, "jproj": jproj, "m": m, "cov3d": cov3d,
    }


def weight_at(mean2d: np.ndarray, conic: np.ndarray, opacity: np.ndarray,
              pixel: np.ndarray) -> np.ndarray:
    """Blending weight alpha of splats at a pixel; always <= min(opacity, 0.99)."""
    d = np.asarray(pixel, dtype=np.float64) - mean2d
    q = (conic[..., 0] * d[..., 0] ** 2 + 2.0 * conic[..., 1] * d[..., 0] * d[..., 1]
         + conic[..., 2] * d[..., 1] ** 2)
    return np.minimum(opacity * np.exp(-0.5 * q), ALPHA_CLAMP)


def init_from_points(points: np.ndarray, colors: np.ndarray, depths: np.ndarray,
                     focal: float) -> GaussianMap:
    """New splats from colorized depth points observed by one camera.

    Isotropic scale of one projected-pixel footprint (depth/focal), identity
    rotation, opacity 0.1, degree-0 SH matching the observed color exactly.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    n = len(points)
    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0
    log_scale = np.log(np.maximum(depths / focal, 1e-9))[:, None] * np.ones((1, 3))
    return GaussianMap(
        pos=points.copy(),
        log_scale=log_scale,
        quat=quat,
        opacity_logit=np.full(n, logit(INIT_OPACITY)),
        sh_low=(colors - 0.5) / SH_C0,
        sh_high=np.zeros((n, 15, 3)),
    )


# ---------------------------------------------------------------------------
# serialization

_PLY_VERSION = 1
_FIELDS = ["x", "y", "z", "sx", "sy", "sz", "qw", "qx", "qy", "qz", "op"] + \
    [f"sl{i}" for i in range(3)] + [f"sh{i}" for i in range(45)]


def save_gaussian_ply(gmap: GaussianMap, path) -> None:
    """Binary little-endian PLY, one vertex per splat, versioned header."""
    n = len(gmap)
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0",
         f"comment splatmap_version {_PLY_VERSION}",
         f"element vertex {n}"]
        + [f"property float {name}" for name in _FIELDS]
        + ["end_header", ""])
    data = np.hstack([
        gmap.pos, gmap.log_scale, gmap.quat, gmap.opacity_logit[:, None],
        gmap.sh_low, gmap.sh_high.reshape(n, 45),
    ]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def load_gaussian_ply(path) -> GaussianMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if end < 0:
        raise DataError(f"{path}: not a PLY file (missing end_header)")
    header = blob[:end].decode("ascii", "replace").splitlines()
    if not header or header[0] != "ply":
        raise DataError(f"{path}: not a PLY file")
    n = None
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line.startswith("comment splatmap_version"):
            version = int(line.split()[-1])
            if version > _PLY_VERSION:
                raise DataError(f"{path}: unsupported splatmap version {version}")
    if n is None:
        raise DataError(f"{path}: missing vertex element")
    body = blob[end + len(b"end_header\n"):]
    expect = n * len(_FIELDS) * 4
    if len(body) < expect:
        raise DataError(f"{path}: truncated payload ({len(body)} < {expect} bytes)")
    arr = np.frombuffer(body[:expect], dtype="<f4").reshape(n, len(_FIELDS)).astype(np.float64)
    return GaussianMap(
        pos=arr[:, 0:3], log_scale=arr[:, 3:6], quat=arr[:, 6:10],
        opacity_logit=arr[:, 10], sh_low=arr[:, 11:14],
        sh_high=arr[:, 14:59].reshape(n, 15, 3),
    )
