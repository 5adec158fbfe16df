"""Batched rotation / rigid-transform primitives.

Conventions used throughout the package:

* quaternions are ``(w, x, y, z)``, unit norm, array shape ``(..., 4)``;
* rotation matrices are world-from-body unless a name says otherwise;
* rotation-vector (axis-angle) tangents live in ``R^3`` with
  ``Exp``/``Log`` the matrix exponential/logarithm on SO(3);
* perturbations of a rotation are right-multiplicative,
  ``R_perturbed = R @ Exp(eps)``, so Jacobians map body-frame tangents.

Everything is vectorized over leading dimensions; scalars work too.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix (or batch thereof) with ``hat(v) @ u = v x u``."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat` for exactly skew-symmetric input."""
    m = np.asarray(m, dtype=np.float64)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def exp_so3(phi: np.ndarray) -> np.ndarray:
    """Matrix exponential of a rotation vector, Rodrigues form.

    Small angles use the quadratic Taylor expansion of the two trig
    coefficients so the result stays exact to machine precision.
    """
    phi = np.asarray(phi, dtype=np.float64)
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-8

    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))

    k = hat(phi)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def quat_from_rotvec(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi, axis=-1)
    half = 0.5 * theta
    small = theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    w = np.cos(half)
    xyz = phi * scale[..., None]
    return np.concatenate([w[..., None], xyz], axis=-1)


def log_so3(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix; robust near 0 and pi via quaternion."""
    return quat_to_rotvec(mat_to_quat(rot))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    # Canonical hemisphere: w >= 0 keeps the angle in [0, pi].
    q = np.where(q[..., :1] < 0.0, -q, q)
    n = np.linalg.norm(q[..., 1:], axis=-1)
    angle = 2.0 * np.arctan2(n, q[..., 0])
    small = n < 1e-9
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(small, 2.0 / np.where(np.abs(q[..., 0]) < _EPS, 1.0, q[..., 0]),
                         angle / np.where(small, 1.0, n))
    return q[..., 1:] * scale[..., None]


def quat_mul(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    w1, x1, y1, z1 = (q1[..., i] for i in range(4))
    w2, x2, y2, z2 = (q2[..., i] for i in range(4))
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    w, x, y, z = (q[..., i] for i in range(4))
    out = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def mat_to_quat(rot: np.ndarray) -> np.ndarray:
    """Shepperd's method, branch chosen per element for numerical safety."""
    rot = np.asarray(rot, dtype=np.float64)
    batch = rot.shape[:-2]
    m = rot.reshape((-1, 3, 3))
    q = np.empty((m.shape[0], 4), dtype=np.float64)

    t = np.einsum("nii->n", m)
    # Four candidate pivots; pick the largest for stability.
    cand = np.stack([t, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    choice = np.argmax(cand, axis=1)

    for idx in range(m.shape[0]):
        a = m[idx]
        c = choice[idx]
        if c == 0:
            r = np.sqrt(1.0 + t[idx])
            s = 0.5 / r
            q[idx] = [0.5 * r, (a[2, 1] - a[1, 2]) * s, (a[0, 2] - a[2, 0]) * s, (a[1, 0] - a[0, 1]) * s]
        elif c == 1:
            r = np.sqrt(1.0 + a[0, 0] - a[1, 1] - a[2, 2])
            s = 0.5 / r
            q[idx] = [(a[2, 1] - a[1, 2]) * s, 0.5 * r, (a[0, 1] + a[1, 0]) * s, (a[0, 2] + a[2, 0]) * s]
        elif c == 2:
            r = np.sqrt(1.0 - a[0, 0] + a[1, 1] - a[2, 2])
            s = 0.5 / r
            q[idx] = [(a[0, 2] - a[2, 0]) * s, (a[0, 1] + a[1, 0]) * s, 0.5 * r, (a[1, 2] + a[2, 1]) * s]
        else:
            r = np.sqrt(1.0 - a[0, 0] - a[1, 1] + a[2, 2])
            s = 0.5 / r
            q[idx] = [(a[1, 0] - a[0, 1]) * s, (a[0, 2] + a[2, 0]) * s, (a[1, 2] + a[2, 1]) * s, 0.5 * r]

    q = np.where(q[:, :1] < 0.0, -q, q)
    return quat_normalize(q).reshape(batch + (4,))


def _trig_coeffs(theta: np.ndarray):
    """Shared small-angle-safe coefficients for the SO(3) Jacobians.

    Returns (c1, c2) with c1 = (1 - cos t)/t^2 and c2 = (t - sin t)/t^3.
    """
    theta = np.asarray(theta, dtype=np.float64)
    t2 = theta * theta
    small = theta < 1e-6
    safe2 = np.where(small, 1.0, t2)
    safe3 = np.where(small, 1.0, t2 * theta)
    c1 = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta)) / safe2)
    c2 = np.where(small, 1.0 / 6.0 - t2 / 120.0, (theta - np.sin(theta)) / safe3)
    return c1, c2


def jr_so3(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian: Exp(phi + d) ~= Exp(phi) Exp(jr_so3(phi) @ d)."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi, axis=-1)
    c1, c2 = _trig_coeffs(theta)
    k = hat(phi)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye - c1[..., None, None] * k + c2[..., None, None] * (k @ k)


def jl_so3(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian: Exp(phi + d) ~= Exp(jl_so3(phi) @ d) Exp(phi)."""
    return jr_so3(-np.asarray(phi, dtype=np.float64))


def jr_inv_so3(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: Log(Exp(phi) Exp(d)) ~= phi + jr_inv_so3(phi) @ d."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi, axis=-1)
    t2 = theta * theta
    small = theta < 1e-6
    safe = np.where(small, 1.0, t2)
    with np.errstate(invalid="ignore", divide="ignore"):
        cot_term = np.where(
            small,
            1.0 / 12.0 + t2 / 720.0,
            1.0 / safe - (1.0 + np.cos(theta)) / np.where(small, 1.0, 2.0 * theta * np.sin(theta)),
        )
    k = hat(phi)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + 0.5 * k + cot_term[..., None, None] * (k @ k)


def jl_inv_so3(phi: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian: Log(Exp(d) Exp(phi)) ~= phi + jl_inv_so3(phi) @ d."""
    return jr_inv_so3(-np.asarray(phi, dtype=np.float64))


def align_gravity(mean_accel: np.ndarray, gravity_mag: float = 9.81) -> np.ndarray:
    """World-from-body rotation that maps the measured specific force to +z.

    A stationary accelerometer reads ``f = R^T (0,0,g)`` in the body frame, so
    the minimal rotation taking ``f`` onto ``(0,0,1)`` gravity-aligns the world
    frame while leaving yaw free (chosen zero).
    """
    f = np.asarray(mean_accel, dtype=np.float64)
    fn = f / np.linalg.norm(f)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(fn, z)
    s = np.linalg.norm(axis)
    c = float(fn @ z)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # Antiparallel: rotate pi about x.
        return exp_so3(np.array([np.pi, 0.0, 0.0]))
    angle = np.arctan2(s, c)
    return exp_so3(axis / s * angle)


def se3_product_log(rot_rel: np.ndarray, trans_rel: np.ndarray) -> np.ndarray:
    """Log map on the SO(3) x R^3 product group: [Log(R_rel); t_rel]."""
    return np.concatenate([log_so3(rot_rel), np.asarray(trans_rel, dtype=np.float64)], axis=-1)
