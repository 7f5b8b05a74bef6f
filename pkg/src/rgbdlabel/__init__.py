"""Pipeline for labeling RGBD video of rigid objects: depth fusion, 3-click
object alignment with ICP refinement, and z-buffered projection of posed
meshes into per-pixel label images and per-frame pose files."""

from .errors import (CorrespondenceStarvationError, DegenerateInputError,
                     MeshNotFoundError, MissingInputError,
                     NoPlanarNeighborhoodError, OdometryBreakError,
                     PipelineError, SceneStateError)
from .geometry import (CameraIntrinsics, PointCloud, RgbdFrame, RigidTransform,
                       TriangleMesh)
from .fusion import Trajectory, TsdfVolume, extract_surface, fuse_scene, \
    icp_odometry, integrate_frame
from .labeler import ObjectAnnotation, rasterize_labels, render_scene
from .registration import (IcpParams, IcpResult, align_object, crop_near_model,
                           icp_refine, landmark_transform, sample_mesh_surface,
                           segment_plane)

__all__ = [
    "CameraIntrinsics", "CorrespondenceStarvationError", "DegenerateInputError",
    "IcpParams", "IcpResult", "MeshNotFoundError", "MissingInputError",
    "NoPlanarNeighborhoodError", "ObjectAnnotation", "OdometryBreakError",
    "PipelineError", "PointCloud", "RgbdFrame", "RigidTransform",
    "SceneStateError", "Trajectory", "TriangleMesh", "TsdfVolume",
    "align_object", "crop_near_model", "extract_surface", "fuse_scene",
    "icp_odometry", "icp_refine", "integrate_frame", "landmark_transform",
    "rasterize_labels", "render_scene", "sample_mesh_surface", "segment_plane",
]

__version__ = "0.1.0"
