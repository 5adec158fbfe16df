import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatslam.errors import DomainError
from splatslam.geometry import exp_so3, log_so3, mat_to_quat, quat_to_mat
from splatslam.spline import Trajectory, segment_blending

from oracles import central_diff, cumulative_rotation, deboor_position, rel_err


def random_knots(rng, n_seg, lo=0.0, uniform=False):
    steps = np.full(n_seg + 7, 0.2) if uniform else rng.uniform(0.05, 0.5, size=n_seg + 7)
    return lo - steps[:4].sum() + np.concatenate([[0.0], np.cumsum(steps)]) + steps[:4].sum() * 0


def make_traj(seed, n_seg=12, uniform=False, rot_step=0.4):
    rng = np.random.default_rng(seed)
    knots = np.concatenate([[0.0], np.cumsum(
        np.full(n_seg + 7, 0.25) if uniform else rng.uniform(0.05, 0.5, size=n_seg + 7))])
    n = len(knots) - 4
    rotvecs = np.cumsum(rng.normal(scale=rot_step, size=(n, 3)), axis=0)
    quats = mat_to_quat(exp_so3(rotvecs))
    trans = np.cumsum(rng.normal(scale=0.5, size=(n, 3)), axis=0)
    return Trajectory(knots, quats, trans)


def interior_times(traj, rng, n):
    return rng.uniform(traj.t_start + 1e-6, traj.t_end - 1e-6, size=n)


# -- basis ---------------------------------------------------------------


def test_partition_of_unity_random_nonuniform_knots():
    rng = np.random.default_rng(0)
    for _ in range(50):
        knots = np.concatenate([[0.0], np.cumsum(rng.uniform(0.02, 1.0, size=15))])
        i = int(rng.integers(3, len(knots) - 4))
        coeffs = segment_blending(knots, i)
        for x in rng.uniform(0, knots[i + 1] - knots[i], size=8):
            vals = coeffs @ x ** np.arange(4)
            assert abs(vals.sum() - 1.0) < 1e-12
            assert np.all(vals > -1e-12)


def test_basis_matches_deboor():
    rng = np.random.default_rng(1)
    for seed in range(10):
        traj = make_traj(seed)
        ts = interior_times(traj, rng, 40)
        _, trans = traj.query_pose(ts)
        ref = deboor_position(traj.knots, traj.trans_ctrl, ts)
        assert rel_err(trans, ref) < 1e-10


def test_collinear_control_points_reproduce_line():
    # Uniform knots, control values 0..3 on x: mid-segment query returns the
    # linear interpolant through the Greville abscissae, here exactly t.
    knots = np.arange(-2.0, 6.0)
    ctrl = np.zeros((4, 3))
    ctrl[:, 0] = np.arange(4.0)
    quats = np.tile([1.0, 0, 0, 0], (4, 1))
    traj = Trajectory(knots, quats, ctrl)
    _, p = traj.query_pose(np.array([1.5]))
    assert abs(p[0, 0] - 1.5) < 1e-12
    assert rel_err(p[:, 0], deboor_position(knots, ctrl[:, 0], [1.5])) < 1e-12


def test_derivatives_match_deboor_and_fd():
    rng = np.random.default_rng(2)
    traj = make_traj(3)
    ts = interior_times(traj, rng, 25)
    _, vel, acc = traj.query_body_rates(ts)
    assert rel_err(vel, deboor_position(traj.knots, traj.trans_ctrl, ts, order=1)) < 1e-9
    assert rel_err(acc, deboor_position(traj.knots, traj.trans_ctrl, ts, order=2)) < 1e-9
    for t in ts[:5]:
        fd = central_diff(lambda tt: traj.query_pose(tt)[1][0], np.array([t]), step=1e-5)
        assert rel_err(fd[:, 0], vel[ts.tolist().index(t)]) < 1e-5


# -- rotation ------------------------------------------------------------


def test_rotation_matches_cumulative_oracle():
    rng = np.random.default_rng(4)
    for seed in range(8):
        traj = make_traj(seed + 100)
        for t in interior_times(traj, rng, 10):
            rot, _ = traj.query_pose(np.array([t]))
            ref = cumulative_rotation(traj.knots, quat_to_mat(traj.rot_ctrl), t)
            assert rel_err(rot[0], ref) < 1e-10


def test_angular_velocity_matches_fd():
    traj = make_traj(7)
    rng = np.random.default_rng(5)
    ts = interior_times(traj, rng, 12)
    omega, _, _ = traj.query_body_rates(ts)
    for k, t in enumerate(ts):
        def rotvec_local(tt):
            rot0, _ = traj.query_pose(np.array([t]))
            rot, _ = traj.query_pose(tt)
            return log_so3(rot0[0].T @ rot[0])
        fd = central_diff(rotvec_local, np.array([t]), step=1e-6)
        assert rel_err(fd[:, 0], omega[k], floor=1e-5) < 1e-5


def test_constant_rate_spin():
    # Control points sampled from a fixed-axis spin at rate w give constant
    # angular velocity w about that axis.
    knots = np.arange(-3.0, 12.0) * 0.5
    n = len(knots) - 4
    w = np.array([0.0, 0.0, 0.7])
    quats = mat_to_quat(exp_so3(np.outer(knots[:n] * 0 + np.arange(n) * 0.5, w)))
    traj = Trajectory(knots, quats, np.zeros((n, 3)))
    ts = np.linspace(traj.t_start + 0.01, traj.t_end - 0.01, 9)
    omega, _, _ = traj.query_body_rates(ts)
    assert rel_err(omega, np.tile(w, (9, 1))) < 1e-9


def test_continuity_across_knots():
    traj = make_traj(11)
    for i in range(5, len(traj.knots) - 6):
        tk = traj.knots[i]
        eps = 1e-7
        for fn in (lambda t: traj.query_pose(t)[1], lambda t: traj.query_body_rates(t)[1],
                   lambda t: traj.query_body_rates(t)[2]):
            left = fn(np.array([tk - eps]))
            right = fn(np.array([tk + eps]))
            assert np.max(np.abs(left - right)) < 1e-4
        rl, _ = traj.query_pose(np.array([tk - eps]))
        rr, _ = traj.query_pose(np.array([tk + eps]))
        assert np.max(np.abs(rl - rr)) < 1e-5


# -- domain --------------------------------------------------------------


def test_domain_checks():
    traj = make_traj(13)
    with pytest.raises(DomainError):
        traj.query_pose(np.array([traj.t_start - 0.01]))
    with pytest.raises(DomainError):
        traj.query_pose(np.array([traj.t_end + 0.01]))
    # Right endpoint = left limit.
    r_end, p_end = traj.query_pose(np.array([traj.t_end]))
    r_in, p_in = traj.query_pose(np.array([traj.t_end - 1e-9]))
    assert np.max(np.abs(p_end - p_in)) < 1e-7


def test_sensor_pose_composition():
    traj = make_traj(17)
    rot_bs = exp_so3(np.array([0.1, -0.2, 0.3]))
    trans_bs = np.array([0.05, 0.0, -0.02])
    ts = np.array([traj.t_start + 0.3])
    rot_s, trans_s = traj.query_sensor_pose(ts, rot_bs, trans_bs)
    rot_b, trans_b = traj.query_pose(ts)
    assert rel_err(rot_s[0], rot_b[0] @ rot_bs) < 1e-12
    assert rel_err(trans_s[0], rot_b[0] @ trans_bs + trans_b[0]) < 1e-12


# -- jacobians -----------------------------------------------------------


def pose_jac_fd(traj, t, n):
    """FD Jacobians of (rotation tangent, translation) w.r.t. ctrl n tangent."""
    rot0, trans0 = traj.query_pose(np.array([t]))
    base_q = traj.rot_ctrl[n].copy()
    base_p = traj.trans_ctrl[n].copy()

    def rot_f(eps):
        q = mat_to_quat(quat_to_mat(base_q) @ exp_so3(eps))
        traj.set_control_points(n, q[None], None)
        rot, _ = traj.query_pose(np.array([t]))
        traj.set_control_points(n, base_q[None], None)
        return log_so3(rot0[0].T @ rot[0])

    def trans_f(eps):
        traj.set_control_points(n, None, (base_p + eps)[None])
        _, tr = traj.query_pose(np.array([t]))
        traj.set_control_points(n, None, base_p[None])
        return tr[0] - trans0[0]

    return central_diff(rot_f, np.zeros(3)), central_diff(trans_f, np.zeros(3))


def test_pose_jacobians_match_fd():
    traj = make_traj(19)
    rng = np.random.default_rng(6)
    for t in interior_times(traj, rng, 6):
        c0, d_rot, d_trans = traj.pose_jacobians(np.array([t]))
        for j in range(4):
            fd_rot, fd_trans = pose_jac_fd(traj, t, int(c0[0]) + j)
            assert rel_err(fd_rot, d_rot[0, j], floor=1e-4) < 1e-5
            assert rel_err(fd_trans, d_trans[0, j] * np.eye(3), floor=1e-4) < 1e-5


def test_pose_jacobian_outside_window_is_zero():
    traj = make_traj(23)
    t = traj.t_start + 0.05
    c0, d_rot, _ = traj.pose_jacobians(np.array([t]))
    outside = int(c0[0]) + 5
    if outside < len(traj.rot_ctrl):
        fd_rot, fd_trans = pose_jac_fd(traj, t, outside)
        assert np.max(np.abs(fd_rot)) < 1e-9
        assert np.max(np.abs(fd_trans)) < 1e-9


def test_translation_jacobians_partition_of_unity():
    traj = make_traj(29)
    ts = np.linspace(traj.t_start, traj.t_end, 17)
    _, _, d_trans = traj.pose_jacobians(ts)
    assert np.max(np.abs(d_trans.sum(axis=1) - 1.0)) < 1e-12


def test_rate_jacobians_match_fd():
    traj = make_traj(31)
    rng = np.random.default_rng(8)
    for t in interior_times(traj, rng, 4):
        c0, d_omega, dd_basis = traj.rate_jacobians(np.array([t]))
        omega0 = traj.query_body_rates(np.array([t]))[0][0]
        for j in range(4):
            n = int(c0[0]) + j
            base_q = traj.rot_ctrl[n].copy()

            def omega_f(eps):
                q = mat_to_quat(quat_to_mat(base_q) @ exp_so3(eps))
                traj.set_control_points(n, q[None], None)
                om = traj.query_body_rates(np.array([t]))[0][0]
                traj.set_control_points(n, base_q[None], None)
                return om

            fd = central_diff(omega_f, np.zeros(3))
            assert rel_err(fd, d_omega[0, j], floor=1e-3) < 1e-5

            base_p = traj.trans_ctrl[n].copy()

            def acc_f(eps):
                traj.set_control_points(n, None, (base_p + eps)[None])
                acc = traj.query_body_rates(np.array([t]))[2][0]
                traj.set_control_points(n, None, base_p[None])
                return acc

            fd_acc = central_diff(acc_f, np.zeros(3))
            assert rel_err(fd_acc, dd_basis[0, j] * np.eye(3), floor=1e-3) < 1e-5


# -- extension -----------------------------------------------------------


def test_extend_preserves_old_interval_and_advances_validity():
    traj = Trajectory.constant(np.eye(3), np.zeros(3), 0.0, 0.1, dt=0.05)
    rng = np.random.default_rng(9)
    # Perturb ctrl so the old interval is nontrivial.
    n = len(traj.trans_ctrl)
    traj.set_control_points(0, None, rng.normal(size=(n, 3)))
    ts = np.linspace(traj.t_start, traj.t_end - 1e-9, 13)
    before = traj.query_pose(ts)[1].copy()
    old_end = traj.t_end
    end_before = traj.query_pose(np.array([old_end]))[1].copy()

    traj.extend(old_end + 0.1, n_ctrl=2)
    assert abs(traj.t_end - (old_end + 0.1)) < 1e-12
    after = traj.query_pose(ts)[1]
    # Strictly inside the old interval the evaluation path is untouched.
    assert np.array_equal(before, after)
    # At the old endpoint the left-limit clamp becomes a real segment; values
    # agree by continuity.
    end_after = traj.query_pose(np.array([old_end]))[1]
    assert np.max(np.abs(end_before - end_after)) < 1e-12
    # Constant extrapolation: new ctrl repeat the last one.
    assert np.array_equal(traj.trans_ctrl[-1], traj.trans_ctrl[-3])
    assert np.array_equal(traj.rot_ctrl[-1], traj.rot_ctrl[-3])


def test_extend_then_query_new_interval():
    traj = Trajectory.constant(np.eye(3), np.ones(3), 0.0, 0.1, dt=0.05)
    traj.extend(0.2, 2)
    traj.extend(0.3, 2)
    _, p = traj.query_pose(np.array([0.25]))
    assert np.allclose(p[0], np.ones(3))


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_hemisphere_alignment_property(seed):
    rng = np.random.default_rng(seed)
    n_seg = int(rng.integers(1, 8))
    knots = np.concatenate([[0.0], np.cumsum(rng.uniform(0.05, 0.5, size=n_seg + 7))])
    n = len(knots) - 4
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    traj = Trajectory(knots, quats, np.zeros((n, 3)))
    dots = np.sum(traj.rot_ctrl[:-1] * traj.rot_ctrl[1:], axis=1)
    assert np.all(dots >= -1e-12)


def test_tum_rows():
    traj = make_traj(37)
    ts = np.linspace(traj.t_start, traj.t_end, 5)
    rows = traj.sample_tum(ts)
    assert rows.shape == (5, 8)
    assert np.allclose(np.linalg.norm(rows[:, 4:], axis=1), 1.0)
