"""Volumetric depth fusion: trajectory bookkeeping, TSDF integration,
surface extraction, bounds sizing, whole-scene fusion, and frame-to-frame
camera tracking."""

import numpy as np
import pytest

from rgbdlabel.errors import OdometryBreakError
from rgbdlabel.evaluation import pose_error
from rgbdlabel.fusion import (Trajectory, TsdfVolume, auto_bounds,
                              extract_surface, fuse_scene, icp_odometry,
                              integrate_frame)
from rgbdlabel.geometry import CameraIntrinsics, RgbdFrame, RigidTransform
from rgbdlabel.labeler import ObjectAnnotation
from rgbdlabel.sceneio import load_frames, read_camera, read_trajectory
from rgbdlabel.synth import (SynthScene, generate_scene, make_sphere,
                             make_tabletop_scene, orbit_trajectory,
                             quantize_depth, render_frame)

TINY_INTR = CameraIntrinsics(fx=30.0, fy=30.0, cx=19.5, cy=14.5,
                             width=40, height=30)


def make_frame(depth_mm, index=0):
    depth = np.asarray(depth_mm, dtype=np.uint16)
    rgb = np.zeros(depth.shape + (3,), dtype=np.uint8)
    return RgbdFrame(index=index, timestamp=float(index), rgb=rgb, depth=depth)


def wall_frame(intr, depth_m=1.0, index=0):
    mm = np.full((intr.height, intr.width), round(depth_m / intr.depth_scale))
    return make_frame(mm, index)


def wedge_frame(intr, index=0):
    """Two tilted planes meeting in a ridge: enough structure to pin all six
    motion axes for tracking."""
    u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    x = (u - intr.cx) / intr.fx
    y = (v - intr.cy) / intr.fy
    # planes n.p = d with n = (+-0.3, 0.2, -1): z = d / (n.(x, y, 1))
    depth = np.where(x < 0, 1.2 / (0.3 * x + 0.2 * y + 1.0),
                     1.2 / (-0.3 * x + 0.2 * y + 1.0))
    return make_frame(np.round(depth / intr.depth_scale), index)


# ----------------------------------------------------------- trajectory ----

def test_trajectory_requires_increasing_indices():
    I = RigidTransform.identity()
    with pytest.raises(ValueError):
        Trajectory([(0, I), (0, I)])
    with pytest.raises(ValueError):
        Trajectory([(3, I), (1, I)])


def test_trajectory_lookup_and_records():
    rng = np.random.default_rng(40)
    poses = [RigidTransform.from_axis_angle(rng.normal(size=3), rng.uniform(0, 2),
                                            rng.normal(size=3)) for _ in range(4)]
    traj = Trajectory(list(zip([0, 2, 5, 9], poses)))
    assert len(traj) == 4
    assert traj.frame_indices() == [0, 2, 5, 9]
    assert 5 in traj and 4 not in traj
    assert traj.pose(2) is poses[1]

    back = Trajectory.from_records(traj.to_records())
    assert back.frame_indices() == traj.frame_indices()
    for i in traj.frame_indices():
        assert back.pose(i).is_close(traj.pose(i), rot_tol=1e-15, trans_tol=1e-15)


# ---------------------------------------------------------------- volume ----

def test_volume_validation():
    with pytest.raises(ValueError):
        TsdfVolume((0, 0, 0), (10, 10, 10), voxel_size=0.01, truncation=0.005)
    with pytest.raises(ValueError):
        TsdfVolume((0, 0, 0), (10, 0, 10))


def test_volume_from_bounds_rounds_up():
    vol = TsdfVolume.from_bounds((0, 0, 0), (0.05, 0.051, 0.001), voxel_size=0.01)
    assert vol.dims == (5, 6, 1)
    assert vol.observed_count() == 0
    assert np.all(vol.tsdf == 1.0)


def test_integrate_wall_zero_crossing():
    intr = TINY_INTR
    vol = TsdfVolume.from_bounds((-0.2, -0.2, 0.8), (0.2, 0.2, 1.2), voxel_size=0.02)
    integrate_frame(vol, wall_frame(intr), intr, RigidTransform.identity())
    assert vol.observed_count() > 0
    assert vol.tsdf.min() >= -1.0 and vol.tsdf.max() <= 1.0

    cloud = extract_surface(vol)
    assert len(cloud) > 50
    # the signed distance is linear along z so interpolation lands on the wall
    assert np.max(np.abs(cloud.points[:, 2] - 1.0)) < 1e-4
    assert np.all(cloud.normals[:, 2] < -0.99)  # facing the camera


def test_integrate_twice_is_idempotent():
    intr = TINY_INTR
    frame = wall_frame(intr)
    vol = TsdfVolume.from_bounds((-0.2, -0.2, 0.8), (0.2, 0.2, 1.2), voxel_size=0.02)
    integrate_frame(vol, frame, intr, RigidTransform.identity())
    once = vol.tsdf.copy()
    integrate_frame(vol, frame, intr, RigidTransform.identity())
    assert np.array_equal(vol.tsdf, once)
    assert vol.weights.max() == 2.0


def test_integrate_order_commutes():
    intr = TINY_INTR
    a = wall_frame(intr, depth_m=1.0)
    b = wedge_frame(intr)
    identity = RigidTransform.identity()

    def fused(first, second):
        vol = TsdfVolume.from_bounds((-0.5, -0.5, 0.6), (0.5, 0.5, 1.4), voxel_size=0.02)
        integrate_frame(vol, first, intr, identity)
        integrate_frame(vol, second, intr, identity)
        return vol

    ab, ba = fused(a, b), fused(b, a)
    assert np.array_equal(ab.tsdf, ba.tsdf)
    assert np.array_equal(ab.weights, ba.weights)


def test_integrate_zero_depth_is_noop():
    intr = TINY_INTR
    vol = TsdfVolume.from_bounds((-0.2, -0.2, 0.8), (0.2, 0.2, 1.2), voxel_size=0.02)
    empty = make_frame(np.zeros((intr.height, intr.width)))
    integrate_frame(vol, empty, intr, RigidTransform.identity())
    assert vol.observed_count() == 0
    assert np.all(vol.tsdf == 1.0)

    integrate_frame(vol, wall_frame(intr), intr, RigidTransform.identity())
    after_wall = vol.tsdf.copy()
    integrate_frame(vol, empty, intr, RigidTransform.identity())
    assert np.array_equal(vol.tsdf, after_wall)


def test_integrate_weights_saturate():
    intr = TINY_INTR
    frame = wall_frame(intr)
    vol = TsdfVolume.from_bounds((-0.1, -0.1, 0.9), (0.1, 0.1, 1.1), voxel_size=0.02)
    for _ in range(105):
        integrate_frame(vol, frame, intr, RigidTransform.identity())
    assert vol.weights.max() == 100.0
    assert vol.tsdf.min() >= -1.0 and vol.tsdf.max() <= 1.0


# --------------------------------------------------------------- extract ----

def test_extract_requires_observations():
    with pytest.raises(ValueError):
        extract_surface(TsdfVolume((0, 0, 0), (4, 4, 4)))


def test_extract_no_crossing_is_empty():
    intr = TINY_INTR
    # wall far beyond the volume: every voxel is observed free space
    vol = TsdfVolume.from_bounds((-0.1, -0.1, 0.5), (0.1, 0.1, 0.9), voxel_size=0.02)
    integrate_frame(vol, wall_frame(intr, depth_m=2.0), intr, RigidTransform.identity())
    assert vol.observed_count() > 0
    assert len(extract_surface(vol)) == 0


def test_extract_interpolates_crossing():
    vol = TsdfVolume((0, 0, 0), (1, 1, 2), voxel_size=0.01)
    vol.weights[:] = 1.0
    vol.tsdf[0, 0, 0], vol.tsdf[0, 0, 1] = 0.5, -0.5
    cloud = extract_surface(vol)
    assert len(cloud) == 1
    assert np.allclose(cloud.points[0], (0.005, 0.005, 0.010), atol=1e-12)

    vol.tsdf[0, 0, 0], vol.tsdf[0, 0, 1] = 0.25, -0.75
    pt = extract_surface(vol).points[0]
    assert pt[2] == pytest.approx(0.005 + 0.25 * 0.01, abs=1e-12)


def test_fused_sphere_radius_error_below_voxel():
    sphere = make_sphere(0.3, segments=48)
    scene = SynthScene(meshes={"ball": sphere},
                       annotations=[ObjectAnnotation(1, "ball", RigidTransform.identity())])
    intr = CameraIntrinsics(fx=120.0, fy=120.0, cx=79.5, cy=59.5, width=160, height=120)
    traj = orbit_trajectory(8, radius=1.2, height=0.8, target=(0, 0, 0))
    voxel = 0.02
    vol = TsdfVolume.from_bounds((-0.45, -0.45, -0.45), (0.45, 0.45, 0.45), voxel)
    for idx, pose in traj:
        _, depth_m = render_frame(scene, intr, pose)
        frame = make_frame(quantize_depth(depth_m, intr.depth_scale), idx)
        integrate_frame(vol, frame, intr, pose)
    cloud = extract_surface(vol)
    assert len(cloud) > 500
    radii = np.linalg.norm(cloud.points, axis=1)
    rms = float(np.sqrt(np.mean((radii - 0.3) ** 2)))
    assert rms < voxel


# ---------------------------------------------------------------- bounds ----

def test_auto_bounds_inflates_frustum():
    intr = CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)
    frame = wall_frame(intr)
    lo, hi = auto_bounds(frame, intr, RigidTransform.identity())
    # stride-4 pixel grid reaches u = 96: x/z spans [-0.5, 0.46]
    assert np.allclose(lo, (-1.0, -1.0, 0.5), atol=1e-9)
    assert np.allclose(hi, (0.96, 0.96, 1.5), atol=1e-9)


def test_auto_bounds_needs_valid_depth():
    intr = TINY_INTR
    empty = make_frame(np.zeros((intr.height, intr.width)))
    with pytest.raises(ValueError):
        auto_bounds(empty, intr, RigidTransform.identity())


# ------------------------------------------------------------ fuse_scene ----

def test_fuse_scene_uses_only_tracked_frames():
    intr = TINY_INTR
    frames = [wall_frame(intr, index=i) for i in range(3)]
    traj = Trajectory([(0, RigidTransform.identity()), (2, RigidTransform.identity())])
    seen = []
    vol = fuse_scene(frames, intr, traj, voxel_size=0.05, progress=seen.append)
    assert seen == [1, 2]
    assert vol.observed_count() > 0


def test_fuse_scene_skips_mostly_invalid_frames():
    intr = TINY_INTR
    good = wall_frame(intr, index=0)
    mostly_bad = np.zeros((intr.height, intr.width))
    mostly_bad[0, :30] = 1000  # 30 of 1200 pixels valid: 97.5% invalid
    frames = [good, make_frame(mostly_bad, index=1)]
    traj = Trajectory([(0, RigidTransform.identity()), (1, RigidTransform.identity())])
    seen = []
    fuse_scene(frames, intr, traj, voxel_size=0.05, progress=seen.append)
    assert seen == [1]


def test_fuse_scene_no_usable_frames():
    intr = TINY_INTR
    frames = [wall_frame(intr, index=0)]
    with pytest.raises(ValueError):
        fuse_scene(frames, intr, Trajectory([(99, RigidTransform.identity())]),
                   voxel_size=0.05)


# -------------------------------------------------------------- odometry ----

def test_odometry_static_camera_is_identity():
    intr = TINY_INTR
    frames = [wedge_frame(intr, index=i) for i in range(4)]
    traj = icp_odometry(frames, intr)
    assert traj.frame_indices() == [0, 1, 2, 3]
    for i in traj.frame_indices():
        rot_err, trans_err = pose_error(traj.pose(i), RigidTransform.identity())
        assert rot_err < 1e-6
        assert trans_err < 1e-6


def test_odometry_single_frame():
    intr = TINY_INTR
    traj = icp_odometry([wedge_frame(intr, index=5)], intr)
    assert traj.frame_indices() == [5]
    assert traj.pose(5).is_close(RigidTransform.identity(), rot_tol=1e-12,
                                 trans_tol=1e-12)


def test_odometry_reports_lost_frame():
    intr = TINY_INTR
    frames = [wedge_frame(intr, index=0),
              make_frame(np.zeros((intr.height, intr.width)), index=7)]
    with pytest.raises(OdometryBreakError) as exc:
        icp_odometry(frames, intr)
    assert exc.value.frame_index == 7
    assert "7" in str(exc.value)


def test_odometry_tracks_slow_orbit(tmp_path):
    # 1 degree/frame sweep around a tabletop scene; every frame-to-frame
    # estimate must stay within 0.2 degrees and 5 mm of the truth
    scene = make_tabletop_scene(n_objects=1, seed=5)
    traj_gt = orbit_trajectory(4, radius=1.3, height=1.0, sweep=np.radians(4.0))
    intr = CameraIntrinsics(fx=180.0, fy=180.0, cx=159.5, cy=119.5,
                            width=320, height=240)
    generate_scene(tmp_path, scene, traj_gt, intr)
    frames = list(load_frames(tmp_path))
    gt = read_trajectory(tmp_path)

    est = icp_odometry(frames, intr)
    assert est.frame_indices() == gt.frame_indices()
    idx = est.frame_indices()
    for a, b in zip(idx, idx[1:]):
        rel_est = est.pose(a).inverse().compose(est.pose(b))
        rel_gt = gt.pose(a).inverse().compose(gt.pose(b))
        rot_err, trans_err = pose_error(rel_est, rel_gt)
        assert rot_err < np.radians(0.2)
        assert trans_err < 5e-3
