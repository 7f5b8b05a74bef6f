"""Dataset layout and serialization.

A scene directory looks like:

    scene/
      camera.json              pinhole intrinsics + depth scale
      frames/000000_depth.png  16-bit depth, indices contiguous from 0
      frames/000000_rgb.png    8-bit RGB, optional
      trajectory.json          camera-to-reconstruction poses per frame
      reconstruction.ply       fused surface cloud
      annotations.json         accepted object poses (reconstruction frame)
      session.json             working state (status, table clicks, plane)
      labels/                  rendered 8-bit label images
      poses/                   rendered per-frame object poses
      truth/                   ground truth (synthetic scenes only)

All JSON is written atomically (tmp file + rename) so a crashed writer
never leaves a torn file behind.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MeshNotFoundError, MissingInputError
from .geometry import CameraIntrinsics, PointCloud, RgbdFrame, RigidTransform, TriangleMesh
from .fusion import Trajectory
from .labeler import ObjectAnnotation

DEPTH_NAME = "{:06d}_depth.png"
RGB_NAME = "{:06d}_rgb.png"
STATUS_ORDER = ("ingested", "fused", "annotated", "rendered")


# ---------------------------------------------------------------- JSON ----

def write_json_atomic(path: str | Path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def read_json(path: str | Path):
    with open(path) as f:
        return json.load(f)


# --------------------------------------------------------------- images ----

def write_depth_png(path: str | Path, depth: np.ndarray) -> None:
    """16-bit single channel PNG; values are raw depth units."""
    depth = np.asarray(depth)
    if depth.dtype != np.uint16:
        raise ValueError("depth image must be uint16")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(depth).save(path)


def read_depth_png(path: str | Path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    return arr.astype(np.uint16)


def write_color_png(path: str | Path, color: np.ndarray) -> None:
    color = np.asarray(color)
    if color.dtype != np.uint8 or color.ndim != 3 or color.shape[2] != 3:
        raise ValueError("color image must be HxWx3 uint8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(color, mode="RGB").save(path)


def read_color_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def write_label_png(path: str | Path, labels: np.ndarray) -> None:
    """8-bit single channel PNG of object ids (0 = unlabeled)."""
    labels = np.asarray(labels)
    if labels.dtype != np.uint8:
        raise ValueError("label image must be uint8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels, mode="L").save(path)


def read_label_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.uint8)


# --------------------------------------------------------------- meshes ----

def write_ply(path: str | Path, mesh_or_cloud) -> None:
    """Binary little-endian PLY. Accepts a TriangleMesh or a PointCloud
    (normals included when present)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(mesh_or_cloud, TriangleMesh):
        verts = mesh_or_cloud.vertices.astype("<f4")
        normals = None
        faces = mesh_or_cloud.faces.astype("<i4")
    else:
        verts = mesh_or_cloud.points.astype("<f4")
        normals = None
        if mesh_or_cloud.normals is not None:
            normals = mesh_or_cloud.normals.astype("<f4")
        faces = None

    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(verts)}",
              "property float x", "property float y", "property float z"]
    if normals is not None:
        header += ["property float nx", "property float ny", "property float nz"]
    if faces is not None:
        header += [f"element face {len(faces)}",
                   "property list uchar int vertex_indices"]
    header.append("end_header")

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if normals is not None:
            f.write(np.hstack([verts, normals]).astype("<f4").tobytes())
        else:
            f.write(verts.tobytes())
        if faces is not None:
            rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            rec["n"] = 3
            rec["idx"] = faces
            f.write(rec.tobytes())
    os.replace(tmp, path)


_PLY_SIZES = {"char": 1, "uchar": 1, "int8": 1, "uint8": 1,
              "short": 2, "ushort": 2, "int16": 2, "uint16": 2,
              "int": 4, "uint": 4, "int32": 4, "uint32": 4, "float": 4,
              "float32": 4, "double": 8, "float64": 8}
_PLY_NP = {"char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1",
           "short": "i2", "ushort": "u2", "int16": "i2", "uint16": "u2",
           "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
           "float": "f4", "float32": "f4", "double": "f8", "float64": "f8"}


def read_ply(path: str | Path):
    """Read ascii or binary little-endian PLY. Returns a TriangleMesh when
    faces are present, otherwise a PointCloud."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header")
    if end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header_lines = data[:end].decode("ascii", "replace").splitlines()
    body = data[data.find(b"\n", end) + 1:]

    fmt = None
    elements = []  # (name, count, [(prop_name, type, list_count_type|None)])
    for line in header_lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property" and elements:
            if parts[1] == "list":
                elements[-1][2].append((parts[4], parts[3], parts[2]))
            else:
                elements[-1][2].append((parts[2], parts[1], None))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"{path}: unsupported PLY format {fmt}")

    verts = normals = faces = None
    if fmt == "ascii":
        tokens = body.decode("ascii").split()
        pos = 0
        for name, count, props in elements:
            if any(p[2] is not None for p in props):
                rows = []
                for _ in range(count):
                    n = int(tokens[pos]); pos += 1
                    rows.append([int(t) for t in tokens[pos:pos + n]])
                    pos += n
                if name == "face":
                    faces = rows
            else:
                width = len(props)
                block = np.array(tokens[pos:pos + count * width],
                                 dtype=np.float64).reshape(count, width)
                pos += count * width
                if name == "vertex":
                    cols = {p[0]: c for c, p in enumerate(props)}
                    verts = block[:, [cols["x"], cols["y"], cols["z"]]]
                    if "nx" in cols:
                        normals = block[:, [cols["nx"], cols["ny"], cols["nz"]]]
    else:
        offset = 0
        for name, count, props in elements:
            if any(p[2] is not None for p in props):
                rows = []
                for _ in range(count):
                    cnt_t = props[0][2]
                    n = int(np.frombuffer(body, _PLY_NP[cnt_t], 1, offset)[0])
                    offset += _PLY_SIZES[cnt_t]
                    idx_t = props[0][1]
                    rows.append(np.frombuffer(body, "<" + _PLY_NP[idx_t], n, offset).tolist())
                    offset += n * _PLY_SIZES[idx_t]
                if name == "face":
                    faces = rows
            else:
                dt = np.dtype([(p[0], "<" + _PLY_NP[p[1]]) for p in props])
                block = np.frombuffer(body, dt, count, offset)
                offset += dt.itemsize * count
                if name == "vertex":
                    verts = np.column_stack([block["x"], block["y"], block["z"]]).astype(np.float64)
                    if "nx" in dt.names:
                        normals = np.column_stack(
                            [block["nx"], block["ny"], block["nz"]]).astype(np.float64)

    if verts is None:
        raise ValueError(f"{path}: PLY has no vertex element")
    if faces is not None:
        tris = []
        for poly in faces:
            for a in range(1, len(poly) - 1):
                tris.append((poly[0], poly[a], poly[a + 1]))
        return TriangleMesh(verts, np.asarray(tris, dtype=np.int64))
    return PointCloud(verts, normals)


def read_obj(path: str | Path) -> TriangleMesh:
    """Wavefront OBJ triangles (polygon faces are fan-triangulated)."""
    verts = []
    tris = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for a in range(1, len(idx) - 1):
                    tris.append((idx[0], idx[a], idx[a + 1]))
    if not verts or not tris:
        raise ValueError(f"{path}: OBJ has no triangles")
    return TriangleMesh(np.asarray(verts, dtype=np.float64),
                        np.asarray(tris, dtype=np.int64))


def read_mesh(path: str | Path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        mesh = read_ply(path)
        if not isinstance(mesh, TriangleMesh):
            raise ValueError(f"{path}: PLY contains no faces")
        return mesh
    if path.suffix.lower() == ".obj":
        return read_obj(path)
    raise ValueError(f"unsupported mesh format: {path.suffix}")


class MeshLibrary:
    """Directory of object meshes keyed by file stem, loaded lazily and
    cached."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise MeshNotFoundError(f"mesh directory not found: {self.root}")
        self._cache: dict[str, TriangleMesh] = {}

    def keys(self) -> list[str]:
        return sorted(p.stem for p in self.root.iterdir()
                      if p.suffix.lower() in (".ply", ".obj"))

    def path(self, key: str) -> Path:
        for suffix in (".ply", ".obj"):
            p = self.root / (key + suffix)
            if p.is_file():
                return p
        raise MeshNotFoundError(f"no mesh named {key!r} in {self.root}")

    def get(self, key: str) -> TriangleMesh:
        if key not in self._cache:
            self._cache[key] = read_mesh(self.path(key))
        return self._cache[key]

    def __getitem__(self, key: str) -> TriangleMesh:
        return self.get(key)

    def __contains__(self, key: str) -> bool:
        try:
            self.path(key)
            return True
        except MeshNotFoundError:
            return False


# ---------------------------------------------------------------- scene ----

def write_camera(scene_dir: str | Path, intr: CameraIntrinsics) -> None:
    write_json_atomic(Path(scene_dir) / "camera.json", {
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
        "width": intr.width, "height": intr.height,
        "depth_scale": intr.depth_scale})


def read_camera(scene_dir: str | Path) -> CameraIntrinsics:
    path = Path(scene_dir) / "camera.json"
    if not path.is_file():
        raise MissingInputError(f"no camera.json in {scene_dir}",
                                error_class="missing-camera")
    r = read_json(path)
    return CameraIntrinsics(r["fx"], r["fy"], r["cx"], r["cy"],
                            r["width"], r["height"],
                            r.get("depth_scale", 0.001))


def frame_indices(scene_dir: str | Path) -> list[int]:
    frames_dir = Path(scene_dir) / "frames"
    if not frames_dir.is_dir():
        return []
    return sorted(int(p.name[:6]) for p in frames_dir.glob("*_depth.png")
                  if p.name[:6].isdigit())


def write_frame(scene_dir: str | Path, index: int, depth: np.ndarray,
                rgb: np.ndarray | None = None) -> None:
    scene_dir = Path(scene_dir)
    write_depth_png(scene_dir / "frames" / DEPTH_NAME.format(index), depth)
    if rgb is not None:
        write_color_png(scene_dir / "frames" / RGB_NAME.format(index), rgb)


def read_frame(scene_dir: str | Path, index: int, native_hz: float = 30.0) -> RgbdFrame:
    """Load one frame; the timestamp is index / native_hz. A missing rgb
    image loads as black (depth-only capture)."""
    scene_dir = Path(scene_dir)
    depth_path = scene_dir / "frames" / DEPTH_NAME.format(index)
    if not depth_path.is_file():
        raise MissingInputError(f"no depth frame {index} in {scene_dir}",
                                error_class="missing-frame")
    depth = read_depth_png(depth_path)
    rgb_path = scene_dir / "frames" / RGB_NAME.format(index)
    if rgb_path.is_file():
        rgb = read_color_png(rgb_path)
    else:
        rgb = np.zeros(depth.shape + (3,), dtype=np.uint8)
    return RgbdFrame(index=index, timestamp=index / native_hz, rgb=rgb, depth=depth)


def load_frames(scene_dir: str | Path, indices=None):
    """Generator over RgbdFrames in index order."""
    if indices is None:
        indices = frame_indices(scene_dir)
    for i in indices:
        yield read_frame(scene_dir, i)


def write_trajectory(scene_dir: str | Path, trajectory: Trajectory) -> None:
    # bare array of {frame, q, t}, camera-to-reconstruction
    write_json_atomic(Path(scene_dir) / "trajectory.json", trajectory.to_records())


def read_trajectory(scene_dir: str | Path) -> Trajectory:
    path = Path(scene_dir) / "trajectory.json"
    if not path.is_file():
        raise MissingInputError(f"no trajectory.json in {scene_dir}",
                                error_class="missing-trajectory")
    return Trajectory.from_records(read_json(path))


def annotation_to_record(a: ObjectAnnotation) -> dict:
    return {"object_id": a.object_id, "mesh": a.mesh_ref,
            "q": list(a.pose.quaternion), "t": list(a.pose.translation)}


def annotation_from_record(r: dict) -> ObjectAnnotation:
    return ObjectAnnotation(object_id=int(r["object_id"]), mesh_ref=r["mesh"],
                            pose=RigidTransform(np.array(r["q"]), np.array(r["t"])))


def write_annotations(scene_dir: str | Path, annotations) -> None:
    # bare array of {object_id, mesh, q, t}, reconstruction frame
    write_json_atomic(Path(scene_dir) / "annotations.json",
                      [annotation_to_record(a) for a in annotations])


def read_annotations(scene_dir: str | Path) -> list[ObjectAnnotation]:
    path = Path(scene_dir) / "annotations.json"
    if not path.is_file():
        raise MissingInputError(f"no annotations.json in {scene_dir}",
                                error_class="missing-annotations")
    return [annotation_from_record(r) for r in read_json(path)]


def write_reconstruction(scene_dir: str | Path, cloud: PointCloud) -> None:
    write_ply(Path(scene_dir) / "reconstruction.ply", cloud)


def read_reconstruction(scene_dir: str | Path) -> PointCloud:
    path = Path(scene_dir) / "reconstruction.ply"
    if not path.is_file():
        raise MissingInputError(f"no reconstruction.ply in {scene_dir}",
                                error_class="missing-reconstruction")
    cloud = read_ply(path)
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud.vertices)
    return cloud


class SceneSession:
    """One scene's full working state: intrinsics, trajectory, accepted
    annotations, workflow status, and the interactive table-filter state.

    Trajectory, annotations, and the fused cloud persist in their own
    files; session.json carries status and the table-filter extras. save()
    followed by open() restores an equal session (floats keep full
    precision through JSON)."""

    def __init__(self, root: str | Path, intrinsics: CameraIntrinsics,
                 trajectory: Trajectory | None = None, annotations=None,
                 table_clicks=None, table_plane: dict | None = None,
                 status: str = "ingested"):
        self.root = Path(root)
        self.intrinsics = intrinsics
        self.trajectory = trajectory
        self.annotations: list[ObjectAnnotation] = list(annotations or [])
        self.table_clicks: list[list[float]] = [list(map(float, c))
                                                for c in (table_clicks or [])]
        self.table_plane = table_plane
        if status not in STATUS_ORDER:
            raise ValueError(f"unknown status {status!r}")
        self.status = status
        self._reconstruction: PointCloud | None = None

    @property
    def scene_id(self) -> str:
        return self.root.name

    @staticmethod
    def open(scene_dir: str | Path) -> "SceneSession":
        scene_dir = Path(scene_dir)
        intr = read_camera(scene_dir)
        trajectory = None
        if (scene_dir / "trajectory.json").is_file():
            trajectory = read_trajectory(scene_dir)
        annotations = []
        if (scene_dir / "annotations.json").is_file():
            annotations = read_annotations(scene_dir)
        extras = {}
        if (scene_dir / "session.json").is_file():
            extras = read_json(scene_dir / "session.json")
        status = extras.get("status")
        if status is None:
            # legacy or hand-built scene: infer the furthest stage reached
            status = "ingested"
            if (scene_dir / "reconstruction.ply").is_file():
                status = "fused"
            if annotations:
                status = "annotated"
        return SceneSession(scene_dir, intr, trajectory, annotations,
                            extras.get("table_clicks", []),
                            extras.get("table_plane"), status)

    def save(self) -> None:
        write_annotations(self.root, self.annotations)
        if self.trajectory is not None:
            write_trajectory(self.root, self.trajectory)
        write_json_atomic(self.root / "session.json", {
            "status": self.status,
            "table_clicks": self.table_clicks,
            "table_plane": self.table_plane,
        })

    def advance(self, status: str) -> None:
        """Move workflow status forward; backward transitions are ignored so
        status only ever advances."""
        if STATUS_ORDER.index(status) > STATUS_ORDER.index(self.status):
            self.status = status

    def reconstruction(self) -> PointCloud:
        """Fused surface cloud, loaded once from reconstruction.ply."""
        if self._reconstruction is None:
            self._reconstruction = read_reconstruction(self.root)
        return self._reconstruction

    def set_reconstruction(self, cloud: PointCloud) -> None:
        self._reconstruction = cloud

    def frame_list(self) -> list[int]:
        return frame_indices(self.root)

    def state_payload(self) -> dict:
        """Everything the session holds, as plain JSON data (used both for
        equality in tests and as the service's scene state response)."""
        return {
            "scene_id": self.scene_id,
            "status": self.status,
            "table_clicks": self.table_clicks,
            "table_plane": self.table_plane,
            "annotations": [annotation_to_record(a) for a in self.annotations],
            "trajectory_frames": (self.trajectory.frame_indices()
                                  if self.trajectory is not None else []),
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneSession):
            return NotImplemented
        if self.state_payload() != other.state_payload():
            return False
        mine = self.trajectory.to_records() if self.trajectory else None
        theirs = other.trajectory.to_records() if other.trajectory else None
        return mine == theirs


def list_scenes(root: str | Path) -> list[str]:
    """Scene ids are subdirectory names that contain a camera.json."""
    root = Path(root)
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir()
                  if p.is_dir() and (p / "camera.json").is_file())


def encode_cloud(points: np.ndarray) -> bytes:
    """Binary cloud payload: uint64 LE point count, then float32 LE xyz
    triples."""
    points = np.ascontiguousarray(points, dtype="<f4")
    return struct.pack("<Q", points.shape[0]) + points.tobytes()


def decode_cloud(payload: bytes) -> np.ndarray:
    (count,) = struct.unpack_from("<Q", payload, 0)
    pts = np.frombuffer(payload, "<f4", count * 3, 8)
    return pts.reshape(count, 3).astype(np.float64)
