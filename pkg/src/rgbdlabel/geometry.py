"""Core geometric types and queries.

Rigid transforms (unit quaternion + translation), the pinhole camera model,
point clouds, triangle meshes, nearest-neighbor search and exact
point-to-mesh distance. Everything downstream builds on these; all types
are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError

_QUAT_NORM_TOL = 1e-9


def _quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("quaternion has zero or non-finite norm")
    return q / n


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def _matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to (w,x,y,z), Shepperd's method (numerically stable)."""
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        w = 0.25 / s
        x = (R[2, 1] - R[1, 2]) * s
        y = (R[0, 2] - R[2, 0]) * s
        z = (R[1, 0] - R[0, 1]) * s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return np.array([w, x, y, z])


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element: unit quaternion (w,x,y,z) plus translation in meters.

    The quaternion is renormalized on every construction, so composition
    chains cannot drift away from the unit sphere.
    """

    quaternion: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _quat_normalize(np.asarray(self.quaternion, dtype=np.float64).reshape(4))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_matrix(R: np.ndarray, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform(_matrix_to_quat(np.asarray(R, dtype=np.float64)), t)

    @staticmethod
    def from_axis_angle(axis, angle: float, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        q = np.concatenate([[np.cos(half)], np.sin(half) * axis])
        return RigidTransform(q, t)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.quaternion)

    @property
    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Returns T such that T(p) = self(other(p))."""
        q = _quat_multiply(self.quaternion, other.quaternion)
        t = self.rotation_matrix @ other.translation + self.translation
        return RigidTransform(q, t)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        w, x, y, z = self.quaternion
        q_inv = np.array([w, -x, -y, -z])
        t_inv = -(_quat_to_matrix(q_inv) @ self.translation)
        return RigidTransform(q_inv, t_inv)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many points (N,3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation_matrix.T + self.translation

    def rotation_angle(self) -> float:
        """Geodesic angle of the rotation part, in [0, pi]."""
        # atan2 form stays well conditioned for tiny angles, unlike arccos
        w = abs(self.quaternion[0])
        v = np.linalg.norm(self.quaternion[1:])
        return 2.0 * np.arctan2(v, w)

    def is_close(self, other: "RigidTransform", rot_tol=1e-9, trans_tol=1e-9) -> bool:
        delta = self.inverse().compose(other)
        return (delta.rotation_angle() <= rot_tol
                and np.linalg.norm(delta.translation) <= trans_tol)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model: focal lengths and principal point in pixels, plus the
    multiplier that converts stored 16-bit depth units to meters.

    The 0.2 mm default unit keeps quantization noise well below the scale
    frame-to-frame tracking is sensitive to (coarse 1 mm steps make planar
    regions lock onto the quantization staircase) while still spanning 13 m."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 0.0002

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    @staticmethod
    def default(width=640, height=480) -> "CameraIntrinsics":
        # Placeholder values for a structured-light RGBD sensor; real scenes
        # must supply calibrated values in camera.json.
        return CameraIntrinsics(fx=570.0, fy=570.0, cx=width / 2.0, cy=height / 2.0,
                                width=width, height=height)


@dataclass(frozen=True)
class RgbdFrame:
    """One timestamped color/depth pair. depth is raw 16-bit units
    (0 = invalid), meters = raw * intrinsics.depth_scale."""

    index: int
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError("rgb must be HxWx3")
        if self.depth.shape != self.rgb.shape[:2]:
            raise ValueError("depth and rgb dimensions differ")
        if self.depth.dtype != np.uint16:
            raise ValueError("depth must be uint16")

    def valid_fraction(self) -> float:
        return float(np.count_nonzero(self.depth)) / self.depth.size


class PointCloud:
    """N points in meters with optional unit normals and 8-bit colors."""

    def __init__(self, points: np.ndarray, normals: np.ndarray | None = None,
                 colors: np.ndarray | None = None):
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("point coordinates must be finite")
        if normals is not None:
            normals = np.ascontiguousarray(normals, dtype=np.float64).reshape(-1, 3)
            if normals.shape[0] != points.shape[0]:
                raise ValueError("normals count differs from points")
            norms = np.linalg.norm(normals, axis=1)
            if normals.shape[0] and np.max(np.abs(norms - 1.0)) > 1e-6:
                raise ValueError("normals must be unit length")
        if colors is not None:
            colors = np.ascontiguousarray(colors, dtype=np.uint8).reshape(-1, 3)
            if colors.shape[0] != points.shape[0]:
                raise ValueError("colors count differs from points")
        self.points = points
        self.normals = normals
        self.colors = colors
        self._tree: cKDTree | None = None

    def __len__(self) -> int:
        return self.points.shape[0]

    def select(self, index) -> "PointCloud":
        """Subcloud by boolean mask or index array, preserving attributes."""
        return PointCloud(
            self.points[index],
            None if self.normals is None else self.normals[index],
            None if self.colors is None else self.colors[index],
        )

    def tree(self) -> cKDTree:
        """Spatial index, built once per cloud and reused."""
        if self._tree is None:
            if len(self) == 0:
                raise ValueError("cannot index an empty cloud")
            self._tree = cKDTree(self.points)
        return self._tree


class TriangleMesh:
    """Vertices in meters and triangular faces as vertex index triples."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
        if faces.shape[0] < 1:
            raise ValueError("mesh must have at least one face")
        if faces.min() < 0 or faces.max() >= vertices.shape[0]:
            raise ValueError("face index out of range")
        degenerate = ((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                      | (faces[:, 0] == faces[:, 2]))
        if degenerate.any():
            raise ValueError("mesh contains degenerate faces")
        self.vertices = vertices
        self.faces = faces

    def triangle_corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_areas(self) -> np.ndarray:
        a, b, c = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())


def project(point, intr: CameraIntrinsics):
    """Pinhole projection of a camera-frame point to continuous pixels.

    Returns (u, v) when the point is in front of the camera and lands inside
    [0, width) x [0, height); None otherwise.
    """
    x, y, z = np.asarray(point, dtype=np.float64)
    if z <= 0:
        return None
    u = intr.fx * x / z + intr.cx
    v = intr.fy * y / z + intr.cy
    if 0 <= u < intr.width and 0 <= v < intr.height:
        return (u, v)
    return None


def backproject(u: int, v: int, depth_value: int, intr: CameraIntrinsics):
    """Inverse of project at an integer pixel. None when depth is the
    invalid sentinel (0). Out-of-bounds pixels are a contract violation."""
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise ValueError(f"pixel ({u},{v}) outside {intr.width}x{intr.height} image")
    if depth_value == 0:
        return None
    z = depth_value * intr.depth_scale
    return np.array([(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z])


def backproject_frame(depth: np.ndarray, intr: CameraIntrinsics,
                      stride: int = 1) -> np.ndarray:
    """All valid depth pixels of a frame as an (N,3) camera-frame array,
    optionally subsampled by taking every stride-th pixel in both axes."""
    d = depth[::stride, ::stride].astype(np.float64) * intr.depth_scale
    vs, us = np.nonzero(d > 0)
    z = d[vs, us]
    u = us * stride
    v = vs * stride
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    return np.column_stack([x, y, z])


def backproject_frame_normals(depth: np.ndarray, intr: CameraIntrinsics,
                              stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Subsampled backprojection paired with per-point surface normals.

    Normals come from the cross product of stride-scale forward differences
    on the backprojected grid, so they are exact on planar regions and need
    no neighborhood search. Pixels whose right or down neighbor is invalid
    are dropped (no one-sided fallback; the set is a subset of
    backproject_frame's). Normals are unit length and oriented toward the
    camera.
    """
    h, w = depth.shape
    us = np.arange(0, w - stride, stride)
    vs = np.arange(0, h - stride, stride)
    uu, vv = np.meshgrid(us, vs)

    def grid(u, v):
        z = depth[v, u].astype(np.float64) * intr.depth_scale
        x = (u - intr.cx) * z / intr.fx
        y = (v - intr.cy) * z / intr.fy
        return np.stack([x, y, z], axis=-1), z > 0

    p, ok = grid(uu, vv)
    p_right, ok_right = grid(uu + stride, vv)
    p_down, ok_down = grid(uu, vv + stride)
    valid = ok & ok_right & ok_down
    n = np.cross(p_right - p, p_down - p)
    norm = np.linalg.norm(n, axis=-1)
    valid &= norm > 1e-12
    points = p[valid]
    normals = n[valid] / norm[valid][:, None]
    toward = np.sum(normals * points, axis=1) > 0
    normals[toward] = -normals[toward]
    return points, normals


def nearest_neighbor(query, cloud: PointCloud) -> tuple[int, float]:
    """Index and distance of the closest cloud point; exact ties resolve to
    the lowest index so downstream results stay deterministic."""
    if len(cloud) == 0:
        raise ValueError("nearest_neighbor on empty cloud")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    tree = cloud.tree()
    dist, idx = tree.query(q)
    # Exact-distance ties resolve to the lowest index; compare squared
    # distances so the sqrt round-trip cannot split a genuine tie.
    ties = tree.query_ball_point(q, dist)
    if len(ties) > 1:
        d2 = np.sum((cloud.points[ties] - q) ** 2, axis=1)
        idx = min(int(t) for t, dd in zip(ties, d2) if dd == d2.min())
    return int(idx), float(dist)


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray,
                               c: np.ndarray) -> np.ndarray:
    """Closest point to p on each triangle (a_i, b_i, c_i), vectorized.

    Region classification on the barycentric plane (the standard
    closest-point-on-triangle construction), evaluated for all triangles at
    once. p is (3,) or (N,3) paired with N triangles.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        p = np.broadcast_to(p, a.shape)
    ab = b - a
    ac = c - a
    ap = p - a

    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    d3 = np.einsum("ij,ij->i", ab, p - b)
    d4 = np.einsum("ij,ij->i", ac, p - b)
    d5 = np.einsum("ij,ij->i", ab, p - c)
    d6 = np.einsum("ij,ij->i", ac, p - c)

    out = np.empty_like(a)
    done = np.zeros(a.shape[0], dtype=bool)

    # Vertex regions.
    m = (d1 <= 0) & (d2 <= 0)
    out[m] = a[m]
    done |= m
    m = (~done) & (d3 >= 0) & (d4 <= d3)
    out[m] = b[m]
    done |= m
    m = (~done) & (d6 >= 0) & (d5 <= d6)
    out[m] = c[m]
    done |= m

    # Edge regions.
    vc = d1 * d4 - d3 * d2
    m = (~done) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    denom = d1 - d3
    t = np.where(denom != 0, d1 / np.where(denom == 0, 1.0, denom), 0.0)
    out[m] = a[m] + t[m, None] * ab[m]
    done |= m

    vb = d5 * d2 - d1 * d6
    m = (~done) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    denom = d2 - d6
    t = np.where(denom != 0, d2 / np.where(denom == 0, 1.0, denom), 0.0)
    out[m] = a[m] + t[m, None] * ac[m]
    done |= m

    va = d3 * d6 - d5 * d4
    m = (~done) & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    denom = (d4 - d3) + (d5 - d6)
    t = np.where(denom != 0, (d4 - d3) / np.where(denom == 0, 1.0, denom), 0.0)
    out[m] = b[m] + t[m, None] * (c[m] - b[m])
    done |= m

    # Interior.
    m = ~done
    denom = va + vb + vc
    denom = np.where(denom == 0, 1.0, denom)
    v = vb / denom
    w = vc / denom
    out[m] = a[m] + v[m, None] * ab[m] + w[m, None] * ac[m]
    return out


class MeshProximity:
    """Exact distance queries against a posed mesh.

    A vertex tree gives upper bounds, a triangle-centroid tree culls
    candidates, and the surviving triangles get the exact point-triangle
    test. Built once, then read-only.
    """

    def __init__(self, mesh: TriangleMesh, pose: RigidTransform):
        verts = pose.apply(mesh.vertices)
        self.a, self.b, self.c = (verts[mesh.faces[:, 0]], verts[mesh.faces[:, 1]],
                                  verts[mesh.faces[:, 2]])
        self.centroids = (self.a + self.b + self.c) / 3.0
        # max distance from a centroid to its triangle's farthest point
        self.tri_radius = np.sqrt(np.maximum.reduce([
            np.sum((self.a - self.centroids) ** 2, axis=1),
            np.sum((self.b - self.centroids) ** 2, axis=1),
            np.sum((self.c - self.centroids) ** 2, axis=1),
        ]))
        self.max_tri_radius = float(self.tri_radius.max())
        edges = np.concatenate([
            np.linalg.norm(self.b - self.a, axis=1),
            np.linalg.norm(self.c - self.b, axis=1),
            np.linalg.norm(self.a - self.c, axis=1),
        ])
        self.max_edge = float(edges.max())
        self.vertex_tree = cKDTree(verts)
        self.centroid_tree = cKDTree(self.centroids)

    def _exact_min(self, p: np.ndarray, tri_idx: np.ndarray) -> float:
        cp = closest_point_on_triangles(p, self.a[tri_idx], self.b[tri_idx],
                                        self.c[tri_idx])
        return float(np.min(np.linalg.norm(cp - p, axis=1)))

    def distance(self, point) -> float:
        """Exact minimum distance from point to the posed surface."""
        p = np.asarray(point, dtype=np.float64).reshape(3)
        upper, _ = self.vertex_tree.query(p)
        if upper == 0.0:
            return 0.0
        cand = self.centroid_tree.query_ball_point(p, upper + self.max_tri_radius)
        return self._exact_min(p, np.asarray(cand, dtype=np.int64))

    def within(self, points: np.ndarray, radius: float) -> np.ndarray:
        """Boolean mask of points whose exact surface distance is <= radius."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        d_vertex, _ = self.vertex_tree.query(pts)
        inside = d_vertex <= radius
        # true distance >= vertex distance - longest edge, so everything
        # beyond radius + max_edge is provably outside
        band = (~inside) & (d_vertex <= radius + self.max_edge)
        band_idx = np.nonzero(band)[0]
        if band_idx.size:
            groups = self.centroid_tree.query_ball_point(
                pts[band_idx], radius + self.max_tri_radius)
            pair_pts = []
            pair_tris = []
            for row, cand in zip(band_idx, groups):
                if cand:
                    pair_pts.append(np.full(len(cand), row, dtype=np.int64))
                    pair_tris.append(np.asarray(cand, dtype=np.int64))
            if pair_pts:
                pi = np.concatenate(pair_pts)
                ti = np.concatenate(pair_tris)
                cp = closest_point_on_triangles(pts[pi], self.a[ti], self.b[ti],
                                                self.c[ti])
                d = np.linalg.norm(cp - pts[pi], axis=1)
                hit = d <= radius
                inside[np.unique(pi[hit])] = True
        return inside


def point_mesh_distance(point, mesh: TriangleMesh, mesh_pose: RigidTransform) -> float:
    """Exact minimum Euclidean distance from a point to the posed mesh
    surface (point-triangle, not vertex-only)."""
    return MeshProximity(mesh, mesh_pose).distance(point)
