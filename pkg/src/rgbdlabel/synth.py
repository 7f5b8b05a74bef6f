"""Synthetic tabletop scenes with exact ground truth.

Frames are produced by the same rasterizer the labeling pipeline uses, so
ground-truth label images written here are exactly reproducible by rendering
the ground-truth poses. The table plane occludes like real scenery but is
written as label 0. Depth noise, when requested, is seeded per frame from
(seed, frame index) so regeneration is byte-identical regardless of order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fusion import Trajectory
from .geometry import CameraIntrinsics, RigidTransform, TriangleMesh
from .labeler import ObjectAnnotation, object_pose_in_camera, rasterize_labels

SCENERY_PREFIX = "scenery_"


# ----------------------------------------------------------- primitives ----

def make_box(extents) -> TriangleMesh:
    """Axis-aligned box centered at the origin, 12 triangles, outward
    winding."""
    ex, ey, ez = (float(e) / 2.0 for e in extents)
    v = np.array([[sx * ex, sy * ey, sz * ez]
                  for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                 dtype=np.float64)
    # vertex i = (sx, sy, sz) bits: i = 4*(sx>0) + 2*(sy>0) + (sz>0)
    quads = [
        (0, 1, 3, 2),  # -x
        (6, 7, 5, 4),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return TriangleMesh(v, np.asarray(faces, dtype=np.int64))


def make_sphere(radius: float, segments: int = 360) -> TriangleMesh:
    """Latitude-longitude sphere centered at the origin. segments counts
    longitudes (default 1 degree per segment); latitudes are segments // 2
    bands."""
    if segments < 6:
        raise ValueError("segments must be at least 6")
    n_lon = int(segments)
    n_lat = n_lon // 2
    verts = [(0.0, 0.0, radius)]
    for i in range(1, n_lat):
        theta = np.pi * i / n_lat
        st, ct = np.sin(theta), np.cos(theta)
        for j in range(n_lon):
            phi = 2.0 * np.pi * j / n_lon
            verts.append((radius * st * np.cos(phi),
                          radius * st * np.sin(phi),
                          radius * ct))
    verts.append((0.0, 0.0, -radius))
    top, bottom = 0, len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append((top, ring(1, j), ring(1, j + 1)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))
    for j in range(n_lon):
        faces.append((bottom, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    return TriangleMesh(np.asarray(verts, dtype=np.float64),
                        np.asarray(faces, dtype=np.int64))


def make_plane(size: float, z: float = 0.0) -> TriangleMesh:
    """Square two-triangle plane in the world xy plane at height z."""
    h = size / 2.0
    v = np.array([[-h, -h, z], [h, -h, z], [h, h, z], [-h, h, z]])
    f = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return TriangleMesh(v, f)


# --------------------------------------------------------------- camera ----

def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose for an optical-convention camera at eye facing
    target (+z forward, +x right, +y down in image space)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(forward)
    if n == 0:
        raise ValueError("eye and target coincide")
    forward = forward / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.column_stack([right, down, forward])
    return RigidTransform.from_matrix(R, eye)


def orbit_trajectory(n_frames: int, radius: float = 1.4, height: float = 1.0,
                     target=(0.0, 0.0, 0.1), sweep: float = 2.0 * np.pi,
                     start: float = 0.0) -> Trajectory:
    """Camera circling the target at constant height; frame k sits at angle
    start + sweep * k / n_frames."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if radius <= 0.0:
        raise ValueError("orbit radius must be positive")
    target = np.asarray(target, dtype=np.float64)
    entries = []
    for k in range(n_frames):
        a = start + sweep * k / n_frames
        eye = np.array([target[0] + radius * np.cos(a),
                        target[1] + radius * np.sin(a),
                        height])
        entries.append((k, look_at(eye, target)))
    return Trajectory(entries)


# ---------------------------------------------------------------- scene ----

@dataclass
class SynthScene:
    """Object meshes (object frame), their ground-truth world poses, and
    unlabeled scenery meshes already in world coordinates."""

    meshes: dict[str, TriangleMesh]
    annotations: list[ObjectAnnotation]
    scenery: list[TriangleMesh] = field(default_factory=list)

    def render_entries(self):
        entries = [(0, SCENERY_PREFIX + str(i), RigidTransform.identity())
                   for i in range(len(self.scenery))]
        entries += [(a.object_id, a.mesh_ref, a.pose) for a in self.annotations]
        return entries

    def render_meshes(self):
        combined = dict(self.meshes)
        for i, m in enumerate(self.scenery):
            combined[SCENERY_PREFIX + str(i)] = m
        return combined


def make_rim(half: float, height: float = 0.15, thick: float = 0.06,
             ) -> list[TriangleMesh]:
    """Four wall slabs enclosing the square [-half, half]^2, resting on z=0.

    A bare plane plus small convex objects leaves frame-to-frame ICP badly
    conditioned (flat regions slide freely), so the default scenes get a
    raised rim like a workcell tray: two perpendicular wall directions at
    large lever arms pin down all six degrees of freedom.
    """
    walls = []
    for axis in (0, 1):
        for sign in (-1.0, 1.0):
            # wall offset along `axis` runs long in the other direction
            ext = [thick, 2.0 * half + thick, height]
            if axis == 1:
                ext = [2.0 * half + thick, thick, height]
            wall = make_box(tuple(ext))
            center = [0.0, 0.0, height / 2.0]
            center[axis] = sign * (half + thick / 2.0)
            wall.vertices = wall.vertices + np.asarray(center)
            walls.append(wall)
    return walls


def resting_pose(mesh: TriangleMesh, yaw: float, tilt: float,
                 xy: tuple[float, float]) -> RigidTransform:
    """Pose with the given yaw and x-axis tilt, dropped so the lowest
    rotated vertex touches z=0."""
    R = RigidTransform.from_axis_angle((0, 0, 1), yaw).compose(
        RigidTransform.from_axis_angle((1, 0, 0), tilt))
    low = R.apply(mesh.vertices)[:, 2].min()
    return RigidTransform(R.quaternion, (xy[0], xy[1], -low))


def make_tabletop_scene(n_objects: int = 2, plane_size: float = 2.0,
                        seed: int = 0) -> SynthScene:
    """A table plane at z=0, a raised rim, and boxes and spheres resting
    inside the rim in a grid. Sizes, yaws and box tilts vary with the seed;
    every object gets its own mesh key and label id (1-based)."""
    if not (1 <= n_objects <= 12):
        raise ValueError("n_objects must be in [1, 12]")
    rng = np.random.default_rng(seed)
    cols = min(4, n_objects)
    spacing = 0.3
    meshes: dict[str, TriangleMesh] = {}
    annotations: list[ObjectAnnotation] = []
    n_rows = (n_objects + cols - 1) // cols
    for i in range(n_objects):
        row, col = divmod(i, cols)
        x = (col - (min(cols, n_objects) - 1) / 2.0) * spacing
        y = (row - (n_rows - 1) / 2.0) * spacing
        if i % 2 == 0:
            ext = rng.uniform(0.10, 0.18), rng.uniform(0.08, 0.14), rng.uniform(0.10, 0.20)
            key = f"box_{i + 1}"
            meshes[key] = make_box(ext)
            yaw = rng.uniform(0.0, np.pi)
            tilt = rng.uniform(-0.35, 0.35)
            pose = resting_pose(meshes[key], yaw, tilt, (x, y))
        else:
            r = rng.uniform(0.05, 0.08)
            key = f"sphere_{i + 1}"
            meshes[key] = make_sphere(r)
            pose = RigidTransform(translation=(x, y, r))
        annotations.append(ObjectAnnotation(object_id=i + 1, mesh_ref=key, pose=pose))
    grid_extent = max((min(cols, n_objects) - 1) / 2.0, (n_rows - 1) / 2.0) * spacing
    rim_half = max(0.7, grid_extent + 0.3)
    scenery = [make_plane(plane_size)] + make_rim(rim_half)
    return SynthScene(meshes=meshes, annotations=annotations, scenery=scenery)


def render_frame(scene: SynthScene, intr: CameraIntrinsics,
                 camera_pose: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    """(label image, depth in meters) for one camera pose; scenery occludes
    but keeps label 0."""
    return rasterize_labels(scene.render_entries(), scene.render_meshes(),
                            camera_pose, intr)


def quantize_depth(depth_m: np.ndarray, depth_scale: float) -> np.ndarray:
    """Meters to raw uint16 units (round to nearest, clipped)."""
    raw = np.round(depth_m / depth_scale)
    return np.clip(raw, 0, np.iinfo(np.uint16).max).astype(np.uint16)


# fixed flat-shade palette: entry 0 is scenery gray, 1..12 are object colors
PALETTE = np.array([
    (105, 105, 105),
    (214, 39, 40), (31, 119, 180), (44, 160, 44), (255, 127, 14),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 152, 150),
], dtype=np.uint8)


def shade_rgb(labels: np.ndarray, depth_m: np.ndarray) -> np.ndarray:
    """Flat-shaded color image: black background, gray scenery, one fixed
    color per object id."""
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    surface = depth_m > 0.0
    rgb[surface] = PALETTE[0]
    for oid in np.unique(labels):
        if oid == 0:
            continue
        rgb[labels == oid] = PALETTE[1 + (int(oid) - 1) % (len(PALETTE) - 1)]
    return rgb


def rebase_to_first_camera(scene: SynthScene, trajectory: Trajectory,
                           ) -> tuple[SynthScene, Trajectory]:
    """Re-express every pose (and world-frame scenery) in the first camera's
    frame, so the first trajectory entry becomes the identity.

    Frame-to-frame odometry also anchors its output at the first camera, so
    ground truth written in this frame stays comparable with an estimated
    trajectory."""
    entries = list(trajectory)
    if not entries:
        raise ValueError("empty trajectory")
    ref_inv = entries[0][1].inverse()
    rebased_traj = Trajectory([(k, ref_inv.compose(c)) for k, c in entries])
    rebased = SynthScene(
        meshes=scene.meshes,
        annotations=[ObjectAnnotation(a.object_id, a.mesh_ref,
                                      ref_inv.compose(a.pose))
                     for a in scene.annotations],
        scenery=[TriangleMesh(ref_inv.apply(m.vertices), m.faces)
                 for m in scene.scenery])
    return rebased, rebased_traj


def generate_scene(out_dir, scene: SynthScene, trajectory: Trajectory,
                   intr: CameraIntrinsics | None = None,
                   noise_sigma: float = 0.0, seed: int = 0,
                   write_truth: bool = True, progress=None) -> None:
    """Write a complete scene directory: camera.json, meshes/, depth frames,
    trajectory.json, annotations.json (the ground-truth poses, so the scene
    renders without manual annotation), and optionally truth/ with per-frame
    label images and object-in-camera poses.

    All poses are stored in the first camera's frame (first trajectory
    entry = identity). noise_sigma adds zero-mean Gaussian depth noise
    (meters) to valid pixels before 16-bit quantization; each frame draws
    from default_rng((seed, frame)) so output does not depend on generation
    order.
    """
    from pathlib import Path

    from . import sceneio

    scene, trajectory = rebase_to_first_camera(scene, trajectory)
    out_dir = Path(out_dir)
    if intr is None:
        intr = CameraIntrinsics.default()
    out_dir.mkdir(parents=True, exist_ok=True)
    sceneio.write_camera(out_dir, intr)
    for key, mesh in scene.meshes.items():
        sceneio.write_ply(out_dir / "meshes" / f"{key}.ply", mesh)
    sceneio.write_trajectory(out_dir, trajectory)
    sceneio.write_annotations(out_dir, scene.annotations)
    if write_truth:
        sceneio.write_json_atomic(
            out_dir / "truth" / "annotations.json",
            [sceneio.annotation_to_record(a) for a in scene.annotations])

    done = 0
    for frame_idx, cam_pose in trajectory:
        labels, depth_m = render_frame(scene, intr, cam_pose)
        if noise_sigma > 0.0:
            rng = np.random.default_rng([seed, frame_idx])
            noise = rng.normal(0.0, noise_sigma, depth_m.shape)
            depth_m = np.where(depth_m > 0.0, depth_m + noise, 0.0)
        sceneio.write_frame(out_dir, frame_idx,
                            quantize_depth(depth_m, intr.depth_scale),
                            rgb=shade_rgb(labels, depth_m))
        if write_truth:
            sceneio.write_label_png(out_dir / "truth" / "labels" / f"{frame_idx:06d}_label.png",
                                    labels)
            records = []
            for a in sorted(scene.annotations, key=lambda a: a.object_id):
                in_cam = object_pose_in_camera(a.pose, cam_pose)
                records.append({"object_id": a.object_id, "mesh": a.mesh_ref,
                                "q": list(in_cam.quaternion),
                                "t": list(in_cam.translation)})
            sceneio.write_json_atomic(out_dir / "truth" / "poses" / f"{frame_idx:06d}.json",
                                      records)
        done += 1
        if progress:
            progress(done)
