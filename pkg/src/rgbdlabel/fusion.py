"""Scene reconstruction from posed RGBD frames: truncated signed distance
fusion over a voxel grid, zero-crossing surface extraction, and an ICP
frame-to-frame odometry fallback for sequences without a trajectory."""

from __future__ import annotations

import logging
import math
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .errors import CorrespondenceStarvationError, OdometryBreakError
from .geometry import (CameraIntrinsics, PointCloud, RgbdFrame, RigidTransform,
                       backproject_frame, backproject_frame_normals)
from .registration import IcpParams, icp_point_to_plane

log = logging.getLogger(__name__)

WEIGHT_MAX = 100.0
ODOMETRY_PARAMS = IcpParams(max_iterations=30, correspondence_max_distance=0.1,
                            min_correspondences=50,
                            convergence_translation_eps=1e-7,
                            convergence_rotation_eps=1e-7)
# depth pixels are subsampled this much in both axes before odometry ICP
ODOMETRY_PIXEL_STRIDE = 4
MAX_INVALID_FRACTION = 0.95


class Trajectory:
    """Ordered (frame index, camera-to-reconstruction pose) pairs, one per
    retained frame, with strictly increasing indices."""

    def __init__(self, entries: Sequence[tuple[int, RigidTransform]]):
        entries = list(entries)
        for (i, _), (j, _) in zip(entries, entries[1:]):
            if j <= i:
                raise ValueError("frame indices must be strictly increasing")
        self._entries = entries
        self._by_frame = {i: p for i, p in entries}

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def frame_indices(self) -> list[int]:
        return [i for i, _ in self._entries]

    def pose(self, frame_index: int) -> RigidTransform:
        return self._by_frame[frame_index]

    def __contains__(self, frame_index: int) -> bool:
        return frame_index in self._by_frame

    def to_records(self) -> list[dict]:
        return [{"frame": i, "q": list(p.quaternion), "t": list(p.translation)}
                for i, p in self._entries]

    @staticmethod
    def from_records(records: Iterable[dict]) -> "Trajectory":
        return Trajectory([(int(r["frame"]), RigidTransform(np.array(r["q"]), np.array(r["t"])))
                           for r in records])


class TsdfVolume:
    """Voxel grid of truncation-normalized signed distances in [-1, 1] with
    per-voxel observation weights (0 = never observed)."""

    def __init__(self, origin, dims, voxel_size: float = 0.01,
                 truncation: float | None = None):
        if truncation is None:
            truncation = 4.0 * voxel_size
        if truncation < voxel_size:
            raise ValueError("truncation must be at least one voxel")
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in dims)
        if any(d < 1 for d in self.dims):
            raise ValueError("dims must be positive")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.tsdf = np.ones(self.dims, dtype=np.float32)
        self.weights = np.zeros(self.dims, dtype=np.float32)

    @staticmethod
    def from_bounds(min_corner, max_corner, voxel_size: float = 0.01,
                    truncation: float | None = None) -> "TsdfVolume":
        min_corner = np.asarray(min_corner, dtype=np.float64)
        max_corner = np.asarray(max_corner, dtype=np.float64)
        dims = np.maximum(1, np.ceil((max_corner - min_corner) / voxel_size)).astype(int)
        return TsdfVolume(min_corner, dims, voxel_size, truncation)

    def observed_count(self) -> int:
        return int(np.count_nonzero(self.weights))


@njit(cache=True, nogil=True)
def _integrate_kernel(tsdf, weights, ox, oy, oz, voxel, R, t, depth_m,
                      fx, fy, cx, cy, trunc, w_max):
    # all blend arithmetic stays in float32 so repeat integration of equal
    # observations is exactly idempotent and two-frame order swaps commute
    nx, ny, nz = tsdf.shape
    height, width = depth_m.shape
    for ix in range(nx):
        wx = ox + (ix + 0.5) * voxel
        for iy in range(ny):
            wy = oy + (iy + 0.5) * voxel
            px_ = R[0, 0] * wx + R[0, 1] * wy + t[0]
            py_ = R[1, 0] * wx + R[1, 1] * wy + t[1]
            pz_ = R[2, 0] * wx + R[2, 1] * wy + t[2]
            for iz in range(nz):
                wz = oz + (iz + 0.5) * voxel
                cz = pz_ + R[2, 2] * wz
                if cz <= 0.0:
                    continue
                cxm = px_ + R[0, 2] * wz
                cym = py_ + R[1, 2] * wz
                u = int(math.floor(fx * cxm / cz + cx + 0.5))
                v = int(math.floor(fy * cym / cz + cy + 0.5))
                if u < 0 or u >= width or v < 0 or v >= height:
                    continue
                d = depth_m[v, u]
                if d <= 0.0:
                    continue
                sdf = d - cz
                if sdf < -trunc:
                    continue
                val = np.float32(min(1.0, sdf / trunc))
                w = weights[ix, iy, iz]
                tsdf[ix, iy, iz] = (tsdf[ix, iy, iz] * w + val) / (w + np.float32(1.0))
                weights[ix, iy, iz] = min(w + np.float32(1.0), np.float32(w_max))


def integrate_frame(volume: TsdfVolume, frame: RgbdFrame, intr: CameraIntrinsics,
                    camera_pose: RigidTransform) -> TsdfVolume:
    """Fuse one depth frame into the volume (projective TSDF update with a
    running weighted mean, weights capped at 100). camera_pose maps camera
    coordinates into the reconstruction frame. Updates in place and returns
    the volume."""
    world_to_cam = camera_pose.inverse()
    depth_m = frame.depth.astype(np.float32) * np.float32(intr.depth_scale)
    _integrate_kernel(
        volume.tsdf, volume.weights,
        volume.origin[0], volume.origin[1], volume.origin[2], volume.voxel_size,
        world_to_cam.rotation_matrix, world_to_cam.translation, depth_m,
        intr.fx, intr.fy, intr.cx, intr.cy, volume.truncation, WEIGHT_MAX)
    return volume


def _gather_gradient(tsdf: np.ndarray, i: np.ndarray, j: np.ndarray,
                     k: np.ndarray) -> np.ndarray:
    """Central-difference TSDF gradient at voxel indices (one-sided at the
    grid border); returned direction is unnormalized."""
    nx, ny, nz = tsdf.shape
    g = np.empty((i.size, 3), dtype=np.float64)
    g[:, 0] = tsdf[np.minimum(i + 1, nx - 1), j, k] - tsdf[np.maximum(i - 1, 0), j, k]
    g[:, 1] = tsdf[i, np.minimum(j + 1, ny - 1), k] - tsdf[i, np.maximum(j - 1, 0), k]
    g[:, 2] = tsdf[i, j, np.minimum(k + 1, nz - 1)] - tsdf[i, j, np.maximum(k - 1, 0)]
    return g


def extract_surface(volume: TsdfVolume) -> PointCloud:
    """Zero crossings of the fused field as a point cloud.

    Every grid edge whose two observed endpoint voxels have opposite tsdf
    signs contributes one linearly interpolated point; normals come from
    the interpolated central-difference gradient. Empty cloud when no sign
    change exists."""
    if volume.observed_count() == 0:
        raise ValueError("extract_surface on a volume with no observed voxel")
    tsdf = volume.tsdf
    obs = volume.weights > 0

    all_pts = []
    all_normals = []
    for axis in range(3):
        lo = tuple(slice(0, -1) if a == axis else slice(None) for a in range(3))
        hi = tuple(slice(1, None) if a == axis else slice(None) for a in range(3))
        ta = tsdf[lo]
        tb = tsdf[hi]
        crossing = (obs[lo] & obs[hi]
                    & (((ta > 0) & (tb < 0)) | ((ta < 0) & (tb > 0))))
        if not crossing.any():
            continue
        i, j, k = np.nonzero(crossing)
        va = ta[i, j, k].astype(np.float64)
        vb = tb[i, j, k].astype(np.float64)
        t = va / (va - vb)

        idx = np.column_stack([i, j, k]).astype(np.float64)
        centers = volume.origin + (idx + 0.5) * volume.voxel_size
        centers[:, axis] += t * volume.voxel_size
        all_pts.append(centers)

        step = np.zeros(3, dtype=np.int64)
        step[axis] = 1
        ib, jb, kb = i + step[0], j + step[1], k + step[2]
        ga = _gather_gradient(tsdf, i, j, k)
        gb = _gather_gradient(tsdf, ib, jb, kb)
        g = ga * (1.0 - t[:, None]) + gb * t[:, None]
        norms = np.linalg.norm(g, axis=1)
        g[norms == 0] = (0.0, 0.0, 1.0)
        g /= np.linalg.norm(g, axis=1)[:, None]
        all_normals.append(g)

    if not all_pts:
        return PointCloud(np.empty((0, 3)))
    return PointCloud(np.concatenate(all_pts), np.concatenate(all_normals))


def auto_bounds(frame: RgbdFrame, intr: CameraIntrinsics, camera_pose: RigidTransform,
                inflation: float = 0.5, stride: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Volume bounds from the first frame's backprojected bounding box,
    inflated on every side."""
    pts = backproject_frame(frame.depth, intr, stride=stride)
    if pts.shape[0] == 0:
        raise ValueError("cannot size volume from a frame with no valid depth")
    world = camera_pose.apply(pts)
    return world.min(axis=0) - inflation, world.max(axis=0) + inflation


def fuse_scene(frames: Iterable[RgbdFrame], intr: CameraIntrinsics,
               trajectory: Trajectory, voxel_size: float = 0.01,
               truncation: float | None = None, bounds=None,
               progress=None) -> TsdfVolume:
    """Integrate every frame that has a trajectory pose. Frames with more
    than 95% invalid depth are skipped with a warning."""
    volume = None
    n_done = 0
    for frame in frames:
        if frame.index not in trajectory:
            continue
        pose = trajectory.pose(frame.index)
        if frame.valid_fraction() < 1.0 - MAX_INVALID_FRACTION:
            log.warning("skipping frame %d: %.0f%% invalid depth", frame.index,
                        100 * (1 - frame.valid_fraction()))
            continue
        if volume is None:
            if bounds is None:
                bounds = auto_bounds(frame, intr, pose)
            volume = TsdfVolume.from_bounds(bounds[0], bounds[1], voxel_size, truncation)
        integrate_frame(volume, frame, intr, pose)
        n_done += 1
        if progress:
            progress(n_done)
    if volume is None:
        raise ValueError("no usable frames to fuse")
    return volume


def icp_odometry(frames: Sequence[RgbdFrame], intr: CameraIntrinsics,
                 params: IcpParams | None = None, keyframe_stride: int = 1,
                 pixel_stride: int = ODOMETRY_PIXEL_STRIDE) -> Trajectory:
    """Frame-to-frame camera tracking when no trajectory is supplied.

    The first retained frame defines the reconstruction frame (identity
    pose); each later retained frame is aligned to its predecessor with
    point-to-plane ICP on subsampled backprojected depth, normals taken
    from the predecessor's depth grid. Entries are camera-to-reconstruction
    poses.
    """
    if params is None:
        params = ODOMETRY_PARAMS
    retained = list(frames)[::keyframe_stride]
    if not retained:
        raise ValueError("no frames to track")

    entries: list[tuple[int, RigidTransform]] = []
    prev_cloud: PointCloud | None = None
    prev_normals: np.ndarray | None = None
    prev_pose = RigidTransform.identity()

    for n, frame in enumerate(retained):
        pts, normals = backproject_frame_normals(frame.depth, intr, stride=pixel_stride)
        if pts.shape[0] < params.min_correspondences:
            raise OdometryBreakError(
                f"frame {frame.index} has only {pts.shape[0]} valid depth points",
                frame_index=frame.index)
        cloud = PointCloud(pts)
        if n == 0:
            entries.append((frame.index, prev_pose))
        else:
            try:
                result = icp_point_to_plane(cloud, prev_cloud, prev_normals,
                                            RigidTransform.identity(), params)
            except CorrespondenceStarvationError as e:
                raise OdometryBreakError(
                    f"tracking lost between frames {entries[-1][0]} and {frame.index}: {e}",
                    frame_index=frame.index) from e
            # result maps the current camera frame into the previous one
            pose = prev_pose.compose(result.transform)
            entries.append((frame.index, pose))
            prev_pose = pose
        prev_cloud = cloud
        prev_normals = normals
    return Trajectory(entries)
