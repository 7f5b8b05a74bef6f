"""Command-line pipeline driver.

Subcommands cover the full flow: synthesize a ground-truth scene, fuse its
depth frames (optionally estimating the trajectory by frame-to-frame ICP),
serve the annotation UI backend, render label images and per-frame poses,
evaluate against ground truth, downsample the frame rate, and print the
per-stage timing table.

Exit codes: 0 success, 2 expected pipeline errors (printed as a
one-line ``error[<class>]: message``), 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, fusion, labeler, sceneio, synth
from .errors import MissingInputError, PipelineError
from .geometry import CameraIntrinsics


def _cmd_fuse(args) -> int:
    scene_dir = Path(args.scene_dir)
    session = sceneio.SceneSession.open(scene_dir)
    intr = session.intrinsics
    indices = sceneio.frame_indices(scene_dir)
    if not indices:
        raise MissingInputError(f"no depth frames in {scene_dir}",
                                error_class="missing-frames")

    if args.odometry:
        frames = list(sceneio.load_frames(scene_dir, indices))
        t0 = time.perf_counter()
        trajectory = fusion.icp_odometry(frames, intr)
        evaluation.record_stage(scene_dir, "odometry",
                                time.perf_counter() - t0, len(frames))
        session.trajectory = trajectory
        print(f"odometry: tracked {len(trajectory)} frames")
    elif session.trajectory is None:
        raise MissingInputError(
            "scene has no trajectory.json; pass --odometry to estimate one",
            error_class="missing-trajectory")
    else:
        trajectory = session.trajectory

    bounds = None
    if args.bounds is not None:
        bounds = (np.array(args.bounds[:3]), np.array(args.bounds[3:]))

    t0 = time.perf_counter()
    volume = fusion.fuse_scene(sceneio.load_frames(scene_dir, indices), intr,
                               trajectory, voxel_size=args.voxel, bounds=bounds)
    cloud = fusion.extract_surface(volume)
    evaluation.record_stage(scene_dir, "fuse", time.perf_counter() - t0,
                            len(trajectory))
    sceneio.write_reconstruction(scene_dir, cloud)
    session.advance("fused")
    session.save()
    print(f"fused {len(trajectory)} frames at {args.voxel * 100:g} cm voxels: "
          f"{cloud.points.shape[0]} surface points")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    host, _, port = args.listen.rpartition(":")
    app = create_app(args.scenes_root, args.meshes)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="info")
    return 0


def _resolve_render_meshes(session, mesh_dir):
    libraries = []
    if (session.root / "meshes").is_dir():
        libraries.append(sceneio.MeshLibrary(session.root / "meshes"))
    if mesh_dir:
        libraries.append(sceneio.MeshLibrary(mesh_dir))
    meshes = {}
    for ann in session.annotations:
        for lib in libraries:
            if ann.mesh_ref in lib:
                meshes[ann.mesh_ref] = lib.get(ann.mesh_ref)
                break
    return meshes


def _cmd_render(args) -> int:
    scene_dir = Path(args.scene_dir)
    if not (scene_dir / "annotations.json").is_file():
        raise MissingInputError(f"no annotations.json in {scene_dir}",
                                error_class="missing-annotations")
    session = sceneio.SceneSession.open(scene_dir)
    meshes = _resolve_render_meshes(session, args.meshes)
    t0 = time.perf_counter()
    n = labeler.render_scene(session, meshes, workers=args.workers)
    evaluation.record_stage(scene_dir, "render", time.perf_counter() - t0, n)
    session.advance("rendered")
    session.save()
    print(f"rendered {n} label images into {scene_dir / 'labels'}")
    return 0


def _cmd_synth(args) -> int:
    with open(args.spec) as f:
        spec = json.load(f)
    out_dir = Path(args.out_dir)

    cam = spec.get("camera", {})
    intr = CameraIntrinsics(
        fx=cam.get("fx", 570.0), fy=cam.get("fy", 570.0),
        cx=cam.get("cx", 319.5), cy=cam.get("cy", 239.5),
        width=cam.get("width", 640), height=cam.get("height", 480),
        depth_scale=cam.get("depth_scale", 0.0002))
    scene = synth.make_tabletop_scene(
        n_objects=spec.get("n_objects", 2),
        plane_size=spec.get("plane_size", 2.0),
        seed=spec.get("seed", 0))
    orbit = spec.get("orbit", {})
    trajectory = synth.orbit_trajectory(
        n_frames=spec.get("n_frames", 120),
        radius=orbit.get("radius", 1.4),
        height=orbit.get("height", 1.0),
        target=tuple(orbit.get("target", (0.0, 0.0, 0.1))),
        sweep=float(orbit.get("sweep_degrees", 120.0)) * np.pi / 180.0)
    synth.generate_scene(out_dir, scene, trajectory, intr,
                         noise_sigma=spec.get("noise_sigma", 0.0),
                         seed=spec.get("seed", 0))
    print(f"synthesized {len(trajectory)} frames, "
          f"{len(scene.annotations)} objects into {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    scene_dir = Path(args.scene_dir)
    truth_dir = Path(args.truth)
    seg = evaluation.evaluate_labels(scene_dir / "labels", truth_dir / "labels")
    poses = evaluation.evaluate_poses(scene_dir / "poses", truth_dir / "poses")
    payload = {"segmentation": seg.to_payload(), "poses": poses.to_payload()}
    sceneio.write_json_atomic(scene_dir / "evaluation.json", payload)
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(seg.format_table())
        print()
        print(poses.format_table())
    return 0


def _cmd_downsample(args) -> int:
    session = sceneio.SceneSession.open(args.scene_dir)
    out = evaluation.downsample_scene(session, args.hz, out_dir=args.out_dir)
    print(f"kept {len(out.frame_list())} frames at {args.hz:g} Hz "
          f"into {out.root}")
    return 0


def _cmd_timing(args) -> int:
    rows = evaluation.timing_report(args.scene_dir)
    print(evaluation.format_timing_table(rows))
    return 0


def _bounds_arg(text: str) -> list[float]:
    parts = text.split(",")
    if len(parts) != 6:
        raise argparse.ArgumentTypeError("expected 6 comma-separated numbers")
    try:
        return [float(v) for v in parts]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="rgbdlabel",
        description="RGBD object labeling pipeline: fuse, annotate, render, evaluate.")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fuse", help="fuse depth frames into a surface cloud")
    f.add_argument("scene_dir")
    f.add_argument("--bounds", default=None, type=_bounds_arg,
                   metavar="X0,Y0,Z0,X1,Y1,Z1",
                   help="volume bounds in meters, camera-of-first-frame axes "
                        "(default: first frame's bounding box inflated by 0.5 m)")
    f.add_argument("--voxel", type=float, default=0.01, metavar="M",
                   help="voxel size in meters (default 0.01)")
    f.add_argument("--odometry", action="store_true",
                   help="estimate the trajectory by frame-to-frame ICP")
    f.set_defaults(func=_cmd_fuse)

    s = sub.add_parser("serve", help="run the annotation HTTP service")
    s.add_argument("scenes_root")
    s.add_argument("--listen", default="127.0.0.1:8000", metavar="ADDR")
    s.add_argument("--meshes", default=None, metavar="DIR",
                   help="mesh library directory (scene-local meshes also resolve)")
    s.set_defaults(func=_cmd_serve)

    r = sub.add_parser("render", help="render label images and per-frame poses")
    r.add_argument("scene_dir")
    r.add_argument("--meshes", default=None, metavar="DIR")
    r.add_argument("--workers", type=int, default=4)
    r.set_defaults(func=_cmd_render)

    y = sub.add_parser("synth", help="generate a synthetic ground-truth scene")
    y.add_argument("spec", help="JSON scene description ({} uses all defaults)")
    y.add_argument("out_dir")
    y.set_defaults(func=_cmd_synth)

    e = sub.add_parser("eval", help="score rendered labels/poses against truth")
    e.add_argument("scene_dir")
    e.add_argument("--truth", required=True, metavar="DIR",
                   help="directory containing truth labels/ and poses/")
    e.add_argument("--json", action="store_true", help="print JSON instead of tables")
    e.set_defaults(func=_cmd_eval)

    d = sub.add_parser("downsample", help="reduce a scene's frame rate")
    d.add_argument("scene_dir")
    d.add_argument("out_dir")
    d.add_argument("--hz", type=float, required=True)
    d.set_defaults(func=_cmd_downsample)

    t = sub.add_parser("timing", help="print the per-stage timing table")
    t.add_argument("scene_dir")
    t.set_defaults(func=_cmd_timing)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as e:
        print(f"error[{e.error_class}]: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, json.JSONDecodeError) as e:
        print(f"error[internal]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
