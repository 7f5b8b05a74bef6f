"""Shared fixtures: simple camera models and a synthetic tabletop scene that
is generated and fused once per session, then copied by any test that
mutates scene state."""

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from rgbdlabel import fusion, sceneio, synth
from rgbdlabel.geometry import CameraIntrinsics, RigidTransform


@pytest.fixture
def unit_intr():
    # f=100, principal point (50,50): the optical axis maps to pixel (50,50);
    # 1 mm depth units so raw 1000 is exactly 1 m in the tests
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0,
                            width=100, height=100, depth_scale=0.001)


@dataclass
class SceneTemplate:
    """A generated-and-fused scene plus the frame bookkeeping tests need.

    Scene files store every pose in the first camera's frame; world_to_recon
    maps the original world-frame construction into that stored frame.
    """

    root: Path
    intr: CameraIntrinsics
    world_to_recon: RigidTransform
    scene: synth.SynthScene

    def truth_pose(self, object_id: int) -> RigidTransform:
        for a in sceneio.read_annotations(self.root):
            if a.object_id == object_id:
                return a.pose
        raise KeyError(object_id)

    def clicks_for(self, object_id: int, vertex_ids=(0, 1, 2), jitter=0.0,
                   seed=0):
        """Corresponding (model, scene) click sets from ground truth: three
        mesh vertices and their true positions in the stored frame."""
        ann = next(a for a in sceneio.read_annotations(self.root)
                   if a.object_id == object_id)
        mesh = sceneio.read_mesh(self.root / "meshes" / f"{ann.mesh_ref}.ply")
        model = mesh.vertices[list(vertex_ids)]
        scene_pts = ann.pose.apply(model)
        if jitter > 0.0:
            rng = np.random.default_rng(seed)
            scene_pts = scene_pts + rng.normal(0.0, jitter, scene_pts.shape)
        return model, scene_pts


SMALL_INTR = CameraIntrinsics(fx=180.0, fy=180.0, cx=159.5, cy=119.5,
                              width=320, height=240)


@pytest.fixture(scope="session")
def scene_template(tmp_path_factory) -> SceneTemplate:
    root = tmp_path_factory.mktemp("scenes") / "tabletop"
    scene = synth.make_tabletop_scene(n_objects=2, seed=3)
    traj = synth.orbit_trajectory(24, radius=1.3, height=1.0)
    synth.generate_scene(root, scene, traj, SMALL_INTR)
    # status opens as "annotated": the generator ships truth annotations
    session = sceneio.SceneSession.open(root)
    volume = fusion.fuse_scene(sceneio.load_frames(root), SMALL_INTR,
                               session.trajectory)
    sceneio.write_reconstruction(root, fusion.extract_surface(volume))
    session.save()
    first_cam = next(iter(traj))[1]
    return SceneTemplate(root=root, intr=SMALL_INTR,
                         world_to_recon=first_cam.inverse(), scene=scene)


@pytest.fixture
def scene_copy(scene_template, tmp_path) -> SceneTemplate:
    dst = tmp_path / scene_template.root.name
    shutil.copytree(scene_template.root, dst)
    return SceneTemplate(root=dst, intr=scene_template.intr,
                         world_to_recon=scene_template.world_to_recon,
                         scene=scene_template.scene)
