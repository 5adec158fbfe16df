"""Simulator oracles: ray casting, scene texture, trajectory closure,
generative consistency of the sensor streams, and dataset round-trips."""

import dataclasses
import shutil

import numpy as np
import pytest

import splatslam.odometry as od
import splatslam.simulator as sim
from splatslam.errors import DataError
from splatslam.geometry import log_so3
from splatslam.rasterizer import Camera


def zero_noise_rig(**overrides) -> sim.SensorRig:
    base = dict(
        range_sigma=0.0, gyro_sigma=0.0, accel_sigma=0.0,
        gyro_walk=0.0, accel_walk=0.0,
        gyro_bias=np.zeros(3), accel_bias=np.zeros(3),
        pixel_sigma=0.0,
    )
    base.update(overrides)
    return sim.SensorRig(**base)


# ---------------------------------------------------------------------------
# ray casting against a slow reference implementation


def _ray_tri(o, d, tri):
    v0, v1, v2 = tri
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(d, e2)
    det = e1 @ p
    if abs(det) < 1e-12:
        return None
    inv = 1.0 / det
    tv = o - v0
    u = (tv @ p) * inv
    if u < -1e-9 or u > 1.0 + 1e-9:
        return None
    q = np.cross(tv, e1)
    v = (d @ q) * inv
    if v < -1e-9 or u + v > 1.0 + 1e-9:
        return None
    t = (e2 @ q) * inv
    return t if t > 1e-9 else None


def _cast_oracle(o, d, tris):
    best, hit = np.inf, -1
    for k, tri in enumerate(tris):
        t = _ray_tri(o, d, tri)
        if t is not None and t < best:
            best, hit = t, k
    return best, hit


class TestRayCasting:
    def test_matches_reference_on_random_geometry(self):
        rng = np.random.default_rng(3)
        tris = rng.uniform(-3.0, 3.0, size=(25, 3, 3))
        scene = sim.SyntheticScene(tris, np.full((25, 3), 0.5), np.ones(25),
                                   np.zeros(25), np.zeros(25))
        orig = rng.uniform(-4.0, 4.0, size=(200, 3))
        dirs = rng.standard_normal((200, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t, tri = sim.cast_rays(scene, orig, dirs)
        for i in range(200):
            t_ref, k_ref = _cast_oracle(orig[i], dirs[i], tris)
            assert tri[i] == k_ref
            if k_ref >= 0:
                assert t[i] == pytest.approx(t_ref, rel=1e-9)

    def test_unnormalized_direction_scales_parameter(self):
        tris = np.array([[[5.0, -2.0, -2.0], [5.0, 2.0, -2.0], [5.0, 0.0, 3.0]]])
        scene = sim.SyntheticScene(tris, np.full((1, 3), 0.5), np.ones(1),
                                   np.zeros(1), np.zeros(1))
        t1, _ = sim.cast_rays(scene, np.zeros(3), np.array([1.0, 0.0, 0.0]))
        t2, _ = sim.cast_rays(scene, np.zeros(3), np.array([2.0, 0.0, 0.0]))
        assert t1[0] == pytest.approx(5.0, abs=1e-12)
        assert t2[0] == pytest.approx(2.5, abs=1e-12)


# ---------------------------------------------------------------------------
# scene generation


class TestScene:
    def test_deterministic(self):
        a = sim.generate_scene(4)
        b = sim.generate_scene(4)
        assert np.array_equal(a.tris, b.tris)
        assert np.array_equal(a.base_color, b.base_color)
        assert a.meta == b.meta

    def test_seeds_differ(self):
        a = sim.generate_scene(1)
        b = sim.generate_scene(2)
        assert a.tris.shape != b.tris.shape or not np.array_equal(a.tris, b.tris)

    def test_bbox_bounded(self):
        for seed in range(5):
            lo, hi = sim.generate_scene(seed).bbox()
            assert np.all(hi - lo <= 30.0)

    def test_center_axis_rays_match_room_dims(self):
        scene = sim.generate_scene(0)
        m = scene.meta
        center = np.array([0.0, 0.0, m["height"] / 2.0])
        dirs = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0],
                         [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64)
        t, tri = sim.cast_rays(scene, center, dirs)
        assert np.all(tri >= 0)
        expect = [m["hx"], m["hx"], m["hy"], m["hy"], m["height"] / 2, m["height"] / 2]
        assert np.allclose(t, expect, atol=1e-9)

    def test_watertight_no_ray_escapes(self):
        scene = sim.generate_scene(2)
        rng = np.random.default_rng(0)
        m = scene.meta
        orig = rng.uniform(-1.0, 1.0, size=(500, 3)) * [m["hx"] * 0.4, m["hy"] * 0.4, 0.5]
        orig[:, 2] += m["height"] / 2.0
        dirs = rng.standard_normal((500, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t, tri = sim.cast_rays(scene, orig, dirs)
        assert np.all(tri >= 0)
        assert np.all(np.isfinite(t))

    def test_textureless_wall_is_flat(self):
        scene = sim.generate_scene(3)
        rng = np.random.default_rng(1)
        m = scene.meta
        pts = np.column_stack([
            np.full(100, m["hx"]),
            rng.uniform(-1.5, 1.5, 100),
            rng.uniform(0.5, 2.5, 100),
        ])
        col = scene.albedo(np.zeros(100, dtype=np.int64), pts)
        assert np.all(col == col[0])

    def test_textured_coverage_from_loop_view(self):
        scene = sim.generate_scene(0)
        traj, info = sim.make_gt_trajectory(0, 30.0, meta=scene.meta)
        rig = sim.SensorRig()
        t_mid = info["t_static"] + 2.0  # on the circle, facing the room
        color, _ = sim.render_view(scene, sim._camera_at(traj, rig, t_mid))
        gray = color.mean(axis=2)
        contrast = np.zeros_like(gray, dtype=bool)
        contrast[:, :-1] |= np.abs(np.diff(gray, axis=1)) > 0.02
        contrast[:-1, :] |= np.abs(np.diff(gray, axis=0)) > 0.02
        assert contrast.mean() >= 0.30


# ---------------------------------------------------------------------------
# ground-truth trajectory


class TestGtTrajectory:
    def test_exact_loop_closure(self):
        for seed in range(3):
            traj, _ = sim.make_gt_trajectory(seed, 25.0)
            rot, trans = traj.query_pose(np.array([traj.t_start, traj.t_end]))
            assert np.linalg.norm(trans[1] - trans[0]) <= 1e-9
            assert np.linalg.norm(log_so3(rot[0].T @ rot[1])) <= 1e-9

    def test_domain_covers_duration(self):
        traj, _ = sim.make_gt_trajectory(0, 12.0)
        assert traj.t_start == 0.0
        assert traj.t_end == 12.0

    def test_static_lead_in(self):
        traj, info = sim.make_gt_trajectory(1, 20.0)
        assert info["t_static"] >= 1.5
        ts = np.linspace(0.0, info["t_static"], 40)
        rot, trans = traj.query_pose(ts)
        assert np.allclose(trans, trans[0], atol=1e-12)
        assert np.allclose(rot, rot[0], atol=1e-12)

    def test_speed_bounded(self):
        for seed in range(3):
            traj, _ = sim.make_gt_trajectory(seed, 30.0)
            ts = np.linspace(traj.t_start, traj.t_end, 1500)
            _, vel, _ = traj.query_body_rates(ts)
            assert np.max(np.linalg.norm(vel, axis=1)) <= 2.0

    def test_degenerate_window_sees_one_textureless_plane(self):
        scene = sim.generate_scene(0)
        traj, info = sim.make_gt_trajectory(0, 20.0, meta=scene.meta)
        assert info["degenerate"] is not None
        t0, t1 = info["degenerate"]
        assert t1 > t0
        rig = sim.SensorRig()
        flat = set(scene.meta["textureless"])
        for t in np.linspace(t0, t1, 4):
            cam = sim._camera_at(traj, rig, float(t))
            _, depth = sim.render_view(scene, cam)
            h, w = depth.shape
            px, py = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
            d_cam = np.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy,
                              np.ones_like(px)], -1).reshape(-1, 3)
            _, tri = sim.cast_rays(scene, cam.center(), d_cam @ cam.rot_cw)
            assert set(np.unique(tri)) <= flat
            dirs_l, _ = sim.lidar_pattern(rig)
            rot, trans = traj.query_sensor_pose(np.array([float(t)]),
                                                rig.rot_bl, rig.trans_bl)
            _, tri_l = sim.cast_rays(scene, trans[0], dirs_l @ rot[0].T)
            assert set(np.unique(tri_l)) <= flat

    def test_no_degenerate_when_disabled(self):
        _, info = sim.make_gt_trajectory(0, 20.0, degenerate=False)
        assert info["degenerate"] is None

    def test_novel_poses_off_loop(self):
        meta = sim.generate_scene(0).meta
        rots, trans = sim.novel_body_poses(meta, 0, 8)
        assert rots.shape == (8, 3, 3)
        assert np.allclose(np.einsum("nij,nik->njk", rots, rots),
                           np.eye(3), atol=1e-12)
        radii = np.linalg.norm(trans[:, :2], axis=1)
        assert np.allclose(radii, meta["loop_radius"] + 0.35, atol=1e-9)


# ---------------------------------------------------------------------------
# IMU stream


class TestImu:
    def test_stamps_on_exact_grid(self):
        traj, _ = sim.make_gt_trajectory(0, 12.0)
        imu = sim.simulate_imu(traj, sim.SensorRig(), 0)
        n = len(imu.stamps)
        assert np.array_equal(imu.stamps, np.arange(n) / 200.0)
        assert imu.stamps[-1] <= traj.t_end

    def test_zero_noise_is_generatively_consistent(self):
        # the estimator's IMU residual must vanish on noiseless measurements
        traj, _ = sim.make_gt_trajectory(3, 14.0)
        imu = sim.simulate_imu(traj, zero_noise_rig(), 3)
        f = od.ImuFactors(imu.stamps[::7], imu.gyro[::7], imu.accel[::7])
        r_g, _, r_a, _ = od.imu_residuals(traj, f, np.zeros(3), np.zeros(3), first=0)
        assert np.max(np.abs(r_g)) < 1e-9
        assert np.max(np.abs(r_a)) < 1e-9

    def test_constant_bias_shows_in_measurements(self):
        traj, _ = sim.make_gt_trajectory(0, 10.0)
        rig = zero_noise_rig(gyro_bias=np.array([0.01, -0.02, 0.03]),
                             accel_bias=np.array([0.1, 0.0, -0.05]))
        imu = sim.simulate_imu(traj, rig, 0)
        f = od.ImuFactors(imu.stamps[::10], imu.gyro[::10], imu.accel[::10])
        r_g, _, r_a, _ = od.imu_residuals(traj, f, rig.gyro_bias, rig.accel_bias,
                                          first=0)
        assert np.max(np.abs(r_g)) < 1e-9
        assert np.max(np.abs(r_a)) < 1e-9

    def test_static_stream_measures_gravity(self):
        from splatslam.spline import Trajectory
        traj = Trajectory.constant(np.eye(3), np.zeros(3), 0.0, 5.0, 0.5)
        imu = sim.simulate_imu(traj, zero_noise_rig(), 0)
        assert np.allclose(imu.gyro, 0.0, atol=1e-12)
        assert np.allclose(imu.accel, [0.0, 0.0, sim.GRAVITY], atol=1e-9)

    def test_white_noise_sigma_within_20_percent(self):
        from splatslam.spline import Trajectory
        traj = Trajectory.constant(np.eye(3), np.zeros(3), 0.0, 10.0, 0.5)
        rig = zero_noise_rig(gyro_sigma=0.01, accel_sigma=0.05)
        imu = sim.simulate_imu(traj, rig, 5)
        # first differences cancel the (constant) signal; std is sqrt(2) sigma
        sg = np.std(np.diff(imu.gyro, axis=0)) / np.sqrt(2.0)
        sa = np.std(np.diff(imu.accel, axis=0)) / np.sqrt(2.0)
        assert abs(sg - 0.01) / 0.01 < 0.2
        assert abs(sa - 0.05) / 0.05 < 0.2

    def test_bias_walk_wanders(self):
        from splatslam.spline import Trajectory
        traj = Trajectory.constant(np.eye(3), np.zeros(3), 0.0, 20.0, 0.5)
        rig = zero_noise_rig(gyro_walk=1e-3)
        imu = sim.simulate_imu(traj, rig, 1)
        assert imu.bias_gyro is not None
        drift = np.linalg.norm(imu.bias_gyro[-1] - imu.bias_gyro[0])
        assert 0.0 < drift < 0.05
        assert np.allclose(imu.gyro, imu.bias_gyro, atol=1e-12)


# ---------------------------------------------------------------------------
# LiDAR stream


class TestLidar:
    def test_static_ranges_match_plane_distances(self):
        scene = sim.generate_scene(0)
        traj, info = sim.make_gt_trajectory(0, 12.0, meta=scene.meta)
        rig = zero_noise_rig()
        scans = sim.simulate_lidar(traj, scene, rig, 0)
        scan = scans[0]  # static lead-in
        rot, trans = traj.query_sensor_pose(scan.stamps(), rig.rot_bl, rig.trans_bl)
        p_w = np.einsum("nij,nj->ni", rot, scan.points()) + trans
        _, tri = sim.cast_rays(scene, trans, np.einsum("nij,nj->ni", rot,
                                                       scan.dirs.astype(np.float64)))
        n = scene.normals[tri]
        d = -np.einsum("ij,ij->i", n, scene.v0[tri])
        # error floor is the float32 storage of directions and ranges
        assert np.max(np.abs(np.einsum("ij,ij->i", n, p_w) + d)) < 5e-6

    def test_moving_scan_undistorts_onto_surfaces(self):
        # odometry's per-point transform must put zero-noise returns back on
        # the scene planes, locking stamp and extrinsic conventions together
        scene = sim.generate_scene(1)
        traj, info = sim.make_gt_trajectory(1, 12.0, meta=scene.meta)
        rig = zero_noise_rig()
        scans = sim.simulate_lidar(traj, scene, rig, 1)
        moving = [s for s in scans if s.stamp > info["t_static"] + 1.0]
        scan = moving[len(moving) // 2]
        extr = od.Extrinsics(rot_bl=rig.rot_bl, trans_bl=rig.trans_bl)
        p_w = od.transform_scan(traj, extr, scan.stamps(), scan.points())
        rot, trans = traj.query_sensor_pose(scan.stamps(), rig.rot_bl, rig.trans_bl)
        _, tri = sim.cast_rays(scene, trans, np.einsum("nij,nj->ni", rot,
                                                       scan.dirs.astype(np.float64)))
        n = scene.normals[tri]
        d = -np.einsum("ij,ij->i", n, scene.v0[tri])
        assert np.max(np.abs(np.einsum("ij,ij->i", n, p_w) + d)) < 5e-6

    def test_noisy_ranges_stay_within_sigma_quantiles(self):
        scene = sim.generate_scene(0)
        traj, _ = sim.make_gt_trajectory(0, 12.0, meta=scene.meta)
        rig = zero_noise_rig(range_sigma=0.02)
        scans = sim.simulate_lidar(traj, scene, rig, 0)
        scan = scans[0]
        rot, trans = traj.query_sensor_pose(scan.stamps(), rig.rot_bl, rig.trans_bl)
        p_w = np.einsum("nij,nj->ni", rot, scan.points()) + trans
        _, tri = sim.cast_rays(scene, trans, np.einsum("nij,nj->ni", rot,
                                                       scan.dirs.astype(np.float64)))
        n = scene.normals[tri]
        d = -np.einsum("ij,ij->i", n, scene.v0[tri])
        res = np.abs(np.einsum("ij,ij->i", n, p_w) + d)
        assert np.quantile(res, 0.95) < 2.5 * 0.02
        assert res.mean() > 0.005  # noise is actually present

    def test_beam_counts_and_stamp_window(self):
        scene = sim.generate_scene(0)
        traj, _ = sim.make_gt_trajectory(0, 12.0, meta=scene.meta)
        rig = sim.SensorRig()
        scans = sim.simulate_lidar(traj, scene, rig, 0)
        assert len(scans) == int((12.0 - rig.lidar_sweep) * rig.lidar_rate) + 1
        for scan in scans[:5]:
            assert len(scan.ranges) == rig.lidar_rows * rig.lidar_cols  # closed room
            assert scan.offsets.min() >= 0.0
            assert scan.offsets.max() < rig.lidar_sweep
            assert np.all(np.linalg.norm(scan.points(), axis=1) > 0.05)

    def test_spinning_pattern(self):
        rig = sim.SensorRig(lidar_pattern="spinning", lidar_rows=8, lidar_cols=90)
        dirs, offs = sim.lidar_pattern(rig)
        assert dirs.shape == (720, 3)
        assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
        az = np.arctan2(dirs[:, 1], dirs[:, 0])
        assert np.ptp(az) > np.pi  # full sweep, not a forward cone
        # beams within one firing share a stamp offset
        assert np.all(offs.reshape(90, 8) == offs.reshape(90, 8)[:, :1])

    def test_unknown_pattern_rejected(self):
        with pytest.raises(ValueError):
            sim.SensorRig(lidar_pattern="rosette")


# ---------------------------------------------------------------------------
# camera stream


class TestCamera:
    def test_depth_matches_range_cast_along_same_rays(self):
        scene = sim.generate_scene(0)
        traj, info = sim.make_gt_trajectory(0, 12.0, meta=scene.meta)
        rig = sim.SensorRig()
        cam = sim._camera_at(traj, rig, info["t_static"] + 1.0)
        _, depth = sim.render_view(scene, cam)
        h, w = depth.shape
        px, py = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        d_cam = np.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy,
                          np.ones_like(px)], -1).reshape(-1, 3)
        d_w = d_cam @ cam.rot_cw
        norms = np.linalg.norm(d_w, axis=1)
        rng_t, tri = sim.cast_rays(scene, cam.center(), d_w / norms[:, None])
        z = (rng_t / norms).reshape(h, w)  # range along unit ray -> z-depth
        assert np.all(tri >= 0)
        assert np.max(np.abs(z - depth)) < 1e-9

    def test_frames_are_quantized_and_float32(self):
        scene = sim.generate_scene(0)
        traj, _ = sim.make_gt_trajectory(0, 6.0, meta=scene.meta)
        frames = sim.simulate_camera(traj, scene, sim.SensorRig())
        f = frames[3]
        assert f.image.dtype == np.float64
        assert np.array_equal(f.image, np.round(f.image * 255.0) / 255.0)
        assert f.depth.dtype == np.float32
        assert np.all(f.depth > 0.0)

    def test_pure_rotation_is_a_homography(self):
        scene = sim.generate_scene(0)
        traj, info = sim.make_gt_trajectory(0, 12.0, meta=scene.meta)
        rig = sim.SensorRig()
        cam_a = sim._camera_at(traj, rig, info["t_static"] + 0.5)
        from splatslam.geometry import exp_so3
        r_delta = exp_so3(np.array([0.05, -0.03, 0.08]))
        cam_b = Camera(rig.cam_width, rig.cam_height, rig.fx, rig.fy, rig.cx,
                       rig.cy, r_delta @ cam_a.rot_cw,
                       -(r_delta @ cam_a.rot_cw) @ cam_a.center())
        assert np.allclose(cam_a.center(), cam_b.center(), atol=1e-12)
        _, depth_b = sim.render_view(scene, cam_b)
        k = np.array([[rig.fx, 0, rig.cx], [0, rig.fy, rig.cy], [0, 0, 1]])
        h_ab = k @ cam_a.rot_cw @ cam_b.rot_cw.T @ np.linalg.inv(k)
        rng = np.random.default_rng(0)
        us = rng.integers(10, rig.cam_width - 10, 50)
        vs = rng.integers(10, rig.cam_height - 10, 50)
        z = depth_b[vs, us]
        p_cam_b = np.column_stack([(us - rig.cx) * z / rig.fx,
                                   (vs - rig.cy) * z / rig.fy, z])
        p_w = p_cam_b @ cam_b.rot_cw + cam_b.center()
        p_cam_a = (p_w - cam_a.center()) @ cam_a.rot_cw.T
        proj = np.column_stack([
            rig.fx * p_cam_a[:, 0] / p_cam_a[:, 2] + rig.cx,
            rig.fy * p_cam_a[:, 1] / p_cam_a[:, 2] + rig.cy,
        ])
        homo = np.column_stack([us, vs, np.ones(50)]) @ h_ab.T
        mapped = homo[:, :2] / homo[:, 2:3]
        assert np.max(np.linalg.norm(mapped - proj, axis=1)) < 1.0  # sub-pixel
        assert np.max(np.linalg.norm(mapped - proj, axis=1)) < 1e-9

    def test_degenerate_view_has_no_texture(self):
        scene = sim.generate_scene(0)
        traj, info = sim.make_gt_trajectory(0, 20.0, meta=scene.meta)
        t0, t1 = info["degenerate"]
        color, _ = sim.render_view(scene, sim._camera_at(traj, sim.SensorRig(),
                                                         0.5 * (t0 + t1)))
        assert np.max(np.ptp(color.reshape(-1, 3), axis=0)) < 1e-12


# ---------------------------------------------------------------------------
# associations


class TestAssociations:
    def test_noiseless_pixels_reproject_exactly(self):
        scene = sim.generate_scene(0)
        traj, info = sim.make_gt_trajectory(0, 12.0, meta=scene.meta)
        rig = zero_noise_rig()
        t = info["t_static"] + 1.0
        cam = sim._camera_at(traj, rig, t)
        color, depth = sim.render_view(scene, cam)
        frame = sim.CameraFrame(t, color, depth.astype(np.float32))
        a = sim.make_associations(frame, cam, rig, np.random.default_rng(0))
        p_cam = (a.points - cam.center()) @ cam.rot_cw.T
        proj = np.column_stack([
            rig.fx * p_cam[:, 0] / p_cam[:, 2] + rig.cx,
            rig.fy * p_cam[:, 1] / p_cam[:, 2] + rig.cy,
        ])
        assert np.max(np.abs(proj - a.pixels)) < 1e-9
        assert np.array_equal(a.pixels[:, 0], np.round(a.pixels[:, 0]))

    def test_pixel_noise_has_configured_scale(self):
        scene = sim.generate_scene(0)
        traj, info = sim.make_gt_trajectory(0, 12.0, meta=scene.meta)
        rig = sim.SensorRig(pixel_sigma=0.5)
        t = info["t_static"] + 1.0
        cam = sim._camera_at(traj, rig, t)
        color, depth = sim.render_view(scene, cam)
        frame = sim.CameraFrame(t, color, depth.astype(np.float32))
        a = sim.make_associations(frame, cam, rig, np.random.default_rng(0))
        p_cam = (a.points - cam.center()) @ cam.rot_cw.T
        proj = np.column_stack([
            rig.fx * p_cam[:, 0] / p_cam[:, 2] + rig.cx,
            rig.fy * p_cam[:, 1] / p_cam[:, 2] + rig.cy,
        ])
        err = (a.pixels - proj).ravel()
        assert 0.35 < err.std() < 0.65


# ---------------------------------------------------------------------------
# dataset export / load


@pytest.fixture(scope="module")
def small_dataset():
    return sim.simulate_dataset(seed=9, duration=6.0)


class TestDataset:
    def test_camera_stamps_are_on_imu_grid(self, small_dataset):
        ds = small_dataset
        gt_stamps = ds.gt[:, 0]
        for f in ds.frames[:10]:
            assert np.any(gt_stamps == f.stamp)

    def test_roundtrip_bit_exact(self, small_dataset, tmp_path):
        ds = small_dataset
        sim.export_dataset(tmp_path / "d", ds)
        ds2 = sim.load_dataset(tmp_path / "d")
        assert ds2.seed == ds.seed and ds2.duration == ds.duration
        assert ds2.degenerate == ds.degenerate
        assert np.array_equal(ds2.imu.stamps, ds.imu.stamps)
        assert np.array_equal(ds2.imu.gyro, ds.imu.gyro)
        assert np.array_equal(ds2.imu.accel, ds.imu.accel)
        assert len(ds2.scans) == len(ds.scans)
        for s, s2 in zip(ds.scans, ds2.scans):
            assert s2.stamp == s.stamp
            assert np.array_equal(s2.offsets, s.offsets)
            assert np.array_equal(s2.dirs, s.dirs)
            assert np.array_equal(s2.ranges, s.ranges)
        for f, f2 in zip(ds.frames, ds2.frames):
            assert f2.stamp == f.stamp
            assert np.array_equal(f2.image, f.image)
            assert np.array_equal(f2.depth, f.depth)
        for a, a2 in zip(ds.assoc, ds2.assoc):
            assert np.array_equal(a2.points, a.points)
            assert np.array_equal(a2.pixels, a.pixels)
        assert np.allclose(ds2.gt, ds.gt, atol=1e-8)
        assert np.array_equal(ds2.rig.rot_bc, ds.rig.rot_bc)

    def test_double_export_identical_bytes(self, small_dataset, tmp_path):
        ds = small_dataset
        sim.export_dataset(tmp_path / "a", ds)
        ds2 = sim.load_dataset(tmp_path / "a")
        sim.export_dataset(tmp_path / "b", ds2)
        a_files = sorted(p.relative_to(tmp_path / "a")
                         for p in (tmp_path / "a").rglob("*") if p.is_file())
        b_files = sorted(p.relative_to(tmp_path / "b")
                         for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert a_files == b_files
        for rel in a_files:
            assert (tmp_path / "a" / rel).read_bytes() == \
                (tmp_path / "b" / rel).read_bytes(), rel

    def test_truncated_scan_rejected(self, small_dataset, tmp_path):
        sim.export_dataset(tmp_path / "d", small_dataset)
        p = tmp_path / "d" / "lidar" / "0000.bin"
        p.write_bytes(p.read_bytes()[:-7])
        with pytest.raises(DataError):
            sim.load_dataset(tmp_path / "d")

    def test_truncated_depth_rejected(self, small_dataset, tmp_path):
        sim.export_dataset(tmp_path / "d", small_dataset)
        p = tmp_path / "d" / "depth" / "0001.f32"
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(DataError):
            sim.load_dataset(tmp_path / "d")

    def test_missing_frame_rejected(self, small_dataset, tmp_path):
        sim.export_dataset(tmp_path / "d", small_dataset)
        (tmp_path / "d" / "cam" / "0002.png").unlink()
        with pytest.raises(DataError):
            sim.load_dataset(tmp_path / "d")

    def test_unknown_manifest_key_rejected(self, small_dataset, tmp_path):
        sim.export_dataset(tmp_path / "d", small_dataset)
        m = tmp_path / "d" / "manifest.txt"
        m.write_text(m.read_text() + "frobnicate=1\n")
        with pytest.raises(DataError, match="unknown"):
            sim.load_dataset(tmp_path / "d")

    def test_missing_manifest_key_rejected(self, small_dataset, tmp_path):
        sim.export_dataset(tmp_path / "d", small_dataset)
        m = tmp_path / "d" / "manifest.txt"
        lines = [l for l in m.read_text().splitlines() if not l.startswith("fx=")]
        m.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="missing"):
            sim.load_dataset(tmp_path / "d")

    def test_imu_count_mismatch_rejected(self, small_dataset, tmp_path):
        sim.export_dataset(tmp_path / "d", small_dataset)
        p = tmp_path / "d" / "imu.csv"
        lines = p.read_text().strip().splitlines()
        p.write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(DataError):
            sim.load_dataset(tmp_path / "d")

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(DataError):
            sim.load_dataset(tmp_path / "nope")


class TestDeterminism:
    def test_identical_datasets_across_runs(self):
        a = sim.simulate_dataset(seed=5, duration=5.0)
        b = sim.simulate_dataset(seed=5, duration=5.0)
        assert np.array_equal(a.imu.gyro, b.imu.gyro)
        assert np.array_equal(a.imu.accel, b.imu.accel)
        for s, s2 in zip(a.scans, b.scans):
            assert np.array_equal(s.ranges, s2.ranges)
            assert np.array_equal(s.dirs, s2.dirs)
        for f, f2 in zip(a.frames, b.frames):
            assert np.array_equal(f.image, f2.image)
            assert np.array_equal(f.depth, f2.depth)
        for x, y in zip(a.assoc, b.assoc):
            assert np.array_equal(x.points, y.points)
            assert np.array_equal(x.pixels, y.pixels)
        assert np.array_equal(a.gt, b.gt)

    def test_seeds_differ(self):
        a = sim.simulate_dataset(seed=5, duration=5.0)
        b = sim.simulate_dataset(seed=6, duration=5.0)
        assert not np.array_equal(a.imu.gyro, b.imu.gyro)
