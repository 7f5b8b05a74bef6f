#!/usr/bin/env python3
"""Label-rendering throughput benchmark.

Assembles a poses-and-meshes-only scene (no depth frames needed for
rendering), renders an orbit, and reports frames per second plus the
ratio of render time to sensor time at 30 Hz. Mesh loading happens
lazily inside the first frame, so short runs understate the sustained
rate; the 120-frame default amortizes it.
"""

import argparse
import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from rgbdlabel.evaluation import format_timing_table, record_stage, timing_report
from rgbdlabel.geometry import CameraIntrinsics, RigidTransform
from rgbdlabel.labeler import rasterize_labels, render_scene
from rgbdlabel.sceneio import (MeshLibrary, SceneSession, write_annotations,
                               write_camera, write_ply, write_trajectory)
from rgbdlabel.synth import make_tabletop_scene, orbit_trajectory


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--objects", type=int, default=12)
    ap.add_argument("--frames", type=int, default=120)
    ap.add_argument("--width", type=int, default=640)
    ap.add_argument("--height", type=int, default=480)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    intr = CameraIntrinsics(fx=570.0, fy=570.0,
                            cx=args.width / 2 - 0.5, cy=args.height / 2 - 0.5,
                            width=args.width, height=args.height)
    scene = make_tabletop_scene(args.objects, seed=args.seed)
    traj = orbit_trajectory(args.frames, radius=1.6, height=1.2)
    n_tris = sum(m.faces.shape[0] for m in scene.meshes.values())
    print(f"{args.objects} objects, {n_tris} triangles, "
          f"{args.frames} frames at {args.width}x{args.height}, "
          f"{args.workers} worker(s)")

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp) / "bench"
        root.mkdir()
        write_camera(root, intr)
        write_trajectory(root, traj)
        write_annotations(root, scene.annotations)
        for key, mesh in scene.meshes.items():
            write_ply(root / "meshes" / f"{key}.ply", mesh)

        session = SceneSession.open(root)
        library = MeshLibrary(root / "meshes")

        # jit warm-up: compilation is a one-off cost, not throughput
        first = next(iter(scene.meshes))
        rasterize_labels([(1, first, RigidTransform(translation=(0, 0, 2.0)))],
                         scene.meshes, RigidTransform.identity(), intr)

        t0 = time.perf_counter()
        n = render_scene(session, library, workers=args.workers)
        seconds = time.perf_counter() - t0
        record_stage(root, "render", seconds, frames=n)
        print(format_timing_table(timing_report(root)))
        print(f"{n / seconds:.1f} frames/s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
