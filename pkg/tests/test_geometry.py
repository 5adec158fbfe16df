import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splatslam.geometry import (
    align_gravity,
    exp_so3,
    hat,
    jl_inv_so3,
    jl_so3,
    jr_inv_so3,
    jr_so3,
    log_so3,
    mat_to_quat,
    quat_mul,
    quat_to_mat,
    quat_to_rotvec,
    vee,
)

from oracles import central_diff, rel_err


def random_rotvecs(seed, n, max_angle=3.1):
    rng = np.random.default_rng(seed)
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(0, max_angle, size=n)
    return axes * angles[:, None]


def test_exp_matches_scipy():
    v = random_rotvecs(0, 64)
    assert rel_err(exp_so3(v), Rotation.from_rotvec(v).as_matrix()) < 1e-12


def test_exp_log_roundtrip_including_small_and_near_pi():
    v = np.vstack([
        random_rotvecs(1, 32),
        random_rotvecs(2, 8, max_angle=1e-9),
        random_rotvecs(3, 8) * 0 + np.array([np.pi - 1e-7, 0, 0]),
    ])
    assert np.max(np.abs(log_so3(exp_so3(v)) - v)) < 1e-7


def test_quat_mat_consistency():
    v = random_rotvecs(4, 32)
    r = exp_so3(v)
    q = mat_to_quat(r)
    assert rel_err(quat_to_mat(q), r) < 1e-12
    assert np.max(np.abs(quat_to_rotvec(q) - v)) < 1e-9


def test_quat_mul_matches_matrix_product():
    va, vb = random_rotvecs(5, 16), random_rotvecs(6, 16)
    qa, qb = mat_to_quat(exp_so3(va)), mat_to_quat(exp_so3(vb))
    assert rel_err(quat_to_mat(quat_mul(qa, qb)), exp_so3(va) @ exp_so3(vb)) < 1e-12


def test_right_jacobian_first_order():
    for phi in random_rotvecs(7, 8):
        jac = central_diff(lambda p: log_so3(exp_so3(phi).T @ exp_so3(p)), phi)
        assert rel_err(jac, jr_so3(phi)) < 1e-5


def test_jacobian_inverses():
    v = random_rotvecs(8, 16)
    eye = np.broadcast_to(np.eye(3), (16, 3, 3))
    assert np.allclose(jr_so3(v) @ jr_inv_so3(v), eye, atol=1e-12)
    assert np.allclose(jl_so3(v) @ jl_inv_so3(v), eye, atol=1e-12)


def test_hat_vee_roundtrip():
    v = np.random.default_rng(9).normal(size=(10, 3))
    assert np.array_equal(vee(hat(v)), v)
    u = np.random.default_rng(10).normal(size=(10, 3))
    cross = np.einsum("nij,nj->ni", hat(v), u)
    assert rel_err(cross, np.cross(v, u)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_align_gravity_property(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=3)
    if np.linalg.norm(f) < 1e-3:
        f = np.array([0.0, 0.0, 9.81])
    rot = align_gravity(f)
    mapped = rot @ (f / np.linalg.norm(f))
    assert np.allclose(mapped, [0, 0, 1], atol=1e-9)
    assert abs(np.linalg.det(rot) - 1) < 1e-9


def test_align_gravity_level_case():
    rot = align_gravity(np.array([0.0, 0.0, 9.81]))
    assert np.allclose(rot, np.eye(3))
