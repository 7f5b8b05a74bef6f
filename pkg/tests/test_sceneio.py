"""Scene directory serialization: images, PLY/OBJ meshes, wire formats,
and session state round trips."""

import json
import struct

import numpy as np
import pytest

from rgbdlabel import sceneio
from rgbdlabel.errors import MeshNotFoundError, MissingInputError
from rgbdlabel.fusion import Trajectory
from rgbdlabel.geometry import CameraIntrinsics, PointCloud, RigidTransform
from rgbdlabel.labeler import ObjectAnnotation
from rgbdlabel.synth import make_box

INTR = CameraIntrinsics(fx=50.0, fy=55.0, cx=15.5, cy=11.5, width=32, height=24,
                        depth_scale=0.0005)


def rand_pose(rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return RigidTransform.from_axis_angle(axis, rng.uniform(0, 3), rng.normal(size=3))


# ---------------------------------------------------------------- images ----

def test_depth_png_round_trip(tmp_path):
    depth = np.random.default_rng(80).integers(0, 65536, size=(24, 32)).astype(np.uint16)
    p = tmp_path / "d.png"
    sceneio.write_depth_png(p, depth)
    assert np.array_equal(sceneio.read_depth_png(p), depth)
    with pytest.raises(ValueError):
        sceneio.write_depth_png(p, depth.astype(np.float32))


def test_label_png_round_trip(tmp_path):
    labels = np.random.default_rng(81).integers(0, 256, size=(24, 32)).astype(np.uint8)
    p = tmp_path / "l.png"
    sceneio.write_label_png(p, labels)
    assert np.array_equal(sceneio.read_label_png(p), labels)
    with pytest.raises(ValueError):
        sceneio.write_label_png(p, labels.astype(np.int32))


def test_color_png_round_trip(tmp_path):
    rgb = np.random.default_rng(82).integers(0, 256, size=(24, 32, 3)).astype(np.uint8)
    p = tmp_path / "c.png"
    sceneio.write_color_png(p, rgb)
    assert np.array_equal(sceneio.read_color_png(p), rgb)
    with pytest.raises(ValueError):
        sceneio.write_color_png(p, rgb[..., 0])


# ---------------------------------------------------------------- meshes ----

def test_ply_mesh_round_trip(tmp_path):
    mesh = make_box((0.21, 0.13, 0.07))
    p = tmp_path / "box.ply"
    sceneio.write_ply(p, mesh)
    back = sceneio.read_ply(p)
    assert np.array_equal(back.vertices, mesh.vertices.astype("<f4").astype(np.float64))
    assert np.array_equal(back.faces, mesh.faces)


def test_ply_cloud_round_trip_with_normals(tmp_path):
    rng = np.random.default_rng(83)
    pts = rng.normal(size=(500, 3))
    normals = rng.normal(size=(500, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    p = tmp_path / "cloud.ply"
    sceneio.write_ply(p, PointCloud(pts, normals))
    back = sceneio.read_ply(p)
    assert isinstance(back, PointCloud)
    assert np.allclose(back.points, pts, atol=1e-6)
    assert back.normals is not None
    assert np.allclose(back.normals, normals, atol=1e-6)


def test_ply_ascii_read(tmp_path):
    text = "\n".join([
        "ply", "format ascii 1.0",
        "element vertex 4",
        "property float x", "property float y", "property float z",
        "element face 1",
        "property list uchar int vertex_indices",
        "end_header",
        "0 0 0", "1 0 0", "1 1 0", "0 1 0",
        "4 0 1 2 3",  # quad fans into two triangles
        ""])
    p = tmp_path / "quad.ply"
    p.write_text(text)
    mesh = sceneio.read_ply(p)
    assert mesh.vertices.shape == (4, 3)
    assert [list(f) for f in mesh.faces] == [[0, 1, 2], [0, 2, 3]]


def test_obj_read(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
    mesh = sceneio.read_obj(p)
    assert mesh.vertices.shape == (4, 3)
    assert [list(f) for f in mesh.faces] == [[0, 1, 2], [0, 2, 3]]
    (tmp_path / "empty.obj").write_text("# nothing\n")
    with pytest.raises(ValueError):
        sceneio.read_obj(tmp_path / "empty.obj")


def test_read_mesh_dispatch(tmp_path):
    sceneio.write_ply(tmp_path / "cloud.ply", PointCloud(np.zeros((3, 3))))
    with pytest.raises(ValueError):
        sceneio.read_mesh(tmp_path / "cloud.ply")  # no faces
    with pytest.raises(ValueError):
        sceneio.read_mesh(tmp_path / "mesh.stl")


def test_mesh_library(tmp_path):
    sceneio.write_ply(tmp_path / "a.ply", make_box((0.1, 0.1, 0.1)))
    sceneio.write_ply(tmp_path / "b.ply", make_box((0.2, 0.2, 0.2)))
    lib = sceneio.MeshLibrary(tmp_path)
    assert lib.keys() == ["a", "b"]
    assert "a" in lib and "zzz" not in lib
    assert lib.get("a") is lib["a"]  # cached
    with pytest.raises(MeshNotFoundError):
        lib.path("zzz")
    with pytest.raises(MeshNotFoundError):
        sceneio.MeshLibrary(tmp_path / "nope")


# ------------------------------------------------------------ wire format ----

def test_cloud_encoding_layout():
    pts = np.array([[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0]])
    payload = sceneio.encode_cloud(pts)
    assert len(payload) == 8 + 2 * 3 * 4
    assert struct.unpack_from("<Q", payload, 0)[0] == 2
    assert np.frombuffer(payload, "<f4", 3, 8).tolist() == [1.0, 2.0, 3.0]
    back = sceneio.decode_cloud(payload)
    assert np.array_equal(back, pts)  # exactly representable values


def test_cloud_encoding_empty():
    payload = sceneio.encode_cloud(np.empty((0, 3)))
    assert len(payload) == 8
    assert sceneio.decode_cloud(payload).shape == (0, 3)


def test_trajectory_json_is_bare_array(tmp_path):
    rng = np.random.default_rng(84)
    traj = Trajectory([(i, rand_pose(rng)) for i in range(3)])
    sceneio.write_trajectory(tmp_path, traj)
    raw = json.loads((tmp_path / "trajectory.json").read_text())
    assert isinstance(raw, list)
    assert sorted(raw[0]) == ["frame", "q", "t"]
    back = sceneio.read_trajectory(tmp_path)
    for i in range(3):
        assert np.array_equal(back.pose(i).quaternion, traj.pose(i).quaternion)
        assert np.array_equal(back.pose(i).translation, traj.pose(i).translation)


def test_annotations_json_is_bare_array(tmp_path):
    rng = np.random.default_rng(85)
    anns = [ObjectAnnotation(3, "box_3", rand_pose(rng)),
            ObjectAnnotation(1, "box_1", rand_pose(rng))]
    sceneio.write_annotations(tmp_path, anns)
    raw = json.loads((tmp_path / "annotations.json").read_text())
    assert isinstance(raw, list)
    assert sorted(raw[0]) == ["mesh", "object_id", "q", "t"]
    back = sceneio.read_annotations(tmp_path)
    assert [a.object_id for a in back] == [3, 1]  # stored order preserved
    for a, b in zip(anns, back):
        assert a.mesh_ref == b.mesh_ref
        assert np.array_equal(a.pose.quaternion, b.pose.quaternion)
        assert np.array_equal(a.pose.translation, b.pose.translation)


def test_missing_inputs_raise_typed_errors(tmp_path):
    with pytest.raises(MissingInputError) as exc:
        sceneio.read_trajectory(tmp_path)
    assert exc.value.error_class == "missing-trajectory"
    with pytest.raises(MissingInputError) as exc:
        sceneio.read_annotations(tmp_path)
    assert exc.value.error_class == "missing-annotations"
    with pytest.raises(MissingInputError) as exc:
        sceneio.read_reconstruction(tmp_path)
    assert exc.value.error_class == "missing-reconstruction"
    with pytest.raises(MissingInputError) as exc:
        sceneio.read_camera(tmp_path)
    assert exc.value.error_class == "missing-camera"
    with pytest.raises(MissingInputError) as exc:
        sceneio.read_frame(tmp_path, 0)
    assert exc.value.error_class == "missing-frame"


def test_atomic_json_write(tmp_path):
    p = tmp_path / "x.json"
    sceneio.write_json_atomic(p, {"b": 1, "a": 2})
    assert not list(tmp_path.glob("*.tmp"))
    text = p.read_text()
    assert text.endswith("\n")
    assert text.index('"a"') < text.index('"b"')  # stable key order


# ---------------------------------------------------------------- frames ----

def test_frame_round_trip(tmp_path):
    rng = np.random.default_rng(86)
    depth = rng.integers(0, 5000, size=(24, 32)).astype(np.uint16)
    rgb = rng.integers(0, 256, size=(24, 32, 3)).astype(np.uint8)
    sceneio.write_frame(tmp_path, 7, depth, rgb)
    frame = sceneio.read_frame(tmp_path, 7)
    assert frame.index == 7
    assert frame.timestamp == pytest.approx(7 / 30.0)
    assert np.array_equal(frame.depth, depth)
    assert np.array_equal(frame.rgb, rgb)


def test_frame_without_rgb_loads_black(tmp_path):
    depth = np.full((8, 8), 100, dtype=np.uint16)
    sceneio.write_frame(tmp_path, 0, depth)
    frame = sceneio.read_frame(tmp_path, 0)
    assert frame.rgb.shape == (8, 8, 3)
    assert not frame.rgb.any()


def test_frame_indices_sorted(tmp_path):
    for i in (5, 0, 12):
        sceneio.write_frame(tmp_path, i, np.zeros((4, 4), dtype=np.uint16))
    assert sceneio.frame_indices(tmp_path) == [0, 5, 12]
    frames = list(sceneio.load_frames(tmp_path))
    assert [f.index for f in frames] == [0, 5, 12]


# ---------------------------------------------------------------- session ----

def test_session_round_trip_is_lossless(tmp_path):
    rng = np.random.default_rng(87)
    sceneio.write_camera(tmp_path, INTR)
    session = sceneio.SceneSession(
        tmp_path, INTR,
        trajectory=Trajectory([(i, rand_pose(rng)) for i in range(4)]),
        annotations=[ObjectAnnotation(2, "box_2", rand_pose(rng))],
        table_clicks=[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]],
        table_plane={"normal": [0.0, 0.0, 1.0], "offset": 0.0, "inliers": 512},
        status="fused")
    session.save()
    assert sceneio.SceneSession.open(tmp_path) == session


def test_session_status_moves_forward_only(tmp_path):
    sceneio.write_camera(tmp_path, INTR)
    session = sceneio.SceneSession(tmp_path, INTR)
    assert session.status == "ingested"
    session.advance("annotated")
    assert session.status == "annotated"
    session.advance("fused")  # backward: ignored
    assert session.status == "annotated"
    session.advance("rendered")
    assert session.status == "rendered"
    with pytest.raises(ValueError):
        sceneio.SceneSession(tmp_path, INTR, status="done")


def test_session_infers_status_from_files(tmp_path):
    sceneio.write_camera(tmp_path, INTR)
    assert sceneio.SceneSession.open(tmp_path).status == "ingested"
    sceneio.write_reconstruction(tmp_path, PointCloud(np.zeros((5, 3))))
    assert sceneio.SceneSession.open(tmp_path).status == "fused"
    sceneio.write_annotations(tmp_path, [ObjectAnnotation(
        1, "m", RigidTransform.identity())])
    assert sceneio.SceneSession.open(tmp_path).status == "annotated"


def test_list_scenes(tmp_path):
    for name in ("beta", "alpha"):
        d = tmp_path / name
        d.mkdir()
        sceneio.write_camera(d, INTR)
    (tmp_path / "not_a_scene").mkdir()
    (tmp_path / "stray.txt").write_text("x")
    assert sceneio.list_scenes(tmp_path) == ["alpha", "beta"]
    assert sceneio.list_scenes(tmp_path / "missing") == []
