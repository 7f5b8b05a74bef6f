"""Metrics and dataset operations: per-object IoU against ground truth,
pose error, frame-rate downsampling, and per-stage timing reports."""

from __future__ import annotations

import shutil
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissingInputError
from .geometry import RigidTransform
from .fusion import Trajectory
from . import sceneio

NATIVE_HZ = 30.0


# ------------------------------------------------------------------ IoU ----

def iou(predicted: np.ndarray, truth: np.ndarray, object_id: int) -> float:
    """Intersection over union of the pixels labeled object_id in each
    image; 1.0 when the object appears in neither."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"label image shapes differ: {predicted.shape} vs {truth.shape}")
    p = predicted == object_id
    t = truth == object_id
    union = np.count_nonzero(p | t)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & t) / union


@dataclass
class SegmentationReport:
    """Per-object IoU aggregated over all evaluated frames. mean_iou
    averages per-object IoUs over the objects present in ground truth.
    per_frame maps frame index to {object_id: iou} for objects in that
    frame's truth."""

    per_object: dict[int, float]
    mean_iou: float
    per_frame: dict[int, dict[int, float]] = field(default_factory=dict)
    pixel_counts: dict[int, dict[str, int]] = field(default_factory=dict)
    n_frames: int = 0

    def to_payload(self) -> dict:
        return {
            "mean_iou": self.mean_iou,
            "per_object": {str(k): v for k, v in sorted(self.per_object.items())},
            "pixel_counts": {str(k): v for k, v in sorted(self.pixel_counts.items())},
            "per_frame": {str(k): {str(o): v for o, v in sorted(f.items())}
                          for k, f in sorted(self.per_frame.items())},
            "n_frames": self.n_frames,
        }

    def format_table(self) -> str:
        lines = [f"{'object':>8}  {'iou':>8}  {'truth px':>10}  {'pred px':>10}"]
        for oid in sorted(self.per_object):
            c = self.pixel_counts.get(oid, {})
            lines.append(f"{oid:>8}  {self.per_object[oid]:>8.4f}  "
                         f"{c.get('truth', 0):>10}  {c.get('predicted', 0):>10}")
        lines.append(f"mean IoU over {len(self.per_object)} objects "
                     f"({self.n_frames} frames): {self.mean_iou:.4f}")
        return "\n".join(lines)


def _label_frames(labels_dir: Path) -> dict[int, Path]:
    out = {}
    if labels_dir.is_dir():
        for p in labels_dir.glob("*_label.png"):
            stem = p.name[:-len("_label.png")]
            if stem.isdigit():
                out[int(stem)] = p
    return out


def evaluate_labels(pred_dir: str | Path, truth_dir: str | Path,
                    object_ids=None) -> SegmentationReport:
    """Compare rendered label images against ground-truth label images.

    Frames come from the truth directory; a missing predicted frame is an
    error. Objects default to every nonzero id that appears in truth."""
    pred_frames = _label_frames(Path(pred_dir))
    truth_frames = _label_frames(Path(truth_dir))
    if not truth_frames:
        raise MissingInputError(f"no ground-truth label images in {truth_dir}",
                                error_class="missing-truth")

    counts: dict[int, dict[str, int]] = {}
    per_frame: dict[int, dict[int, float]] = {}
    seen_truth_ids: set[int] = set()

    for idx in sorted(truth_frames):
        if idx not in pred_frames:
            raise MissingInputError(f"no predicted label image for frame {idx}",
                                    error_class="missing-labels")
        pred = sceneio.read_label_png(pred_frames[idx])
        truth = sceneio.read_label_png(truth_frames[idx])
        if pred.shape != truth.shape:
            raise ValueError(f"frame {idx}: label image shapes differ")
        frame_ids = [int(i) for i in np.unique(truth) if i != 0]
        seen_truth_ids.update(frame_ids)
        ids_here = object_ids if object_ids is not None else \
            sorted(set(frame_ids) | {int(i) for i in np.unique(pred) if i != 0})
        frame_scores = {}
        for oid in ids_here:
            p = pred == oid
            t = truth == oid
            c = counts.setdefault(oid, {"intersection": 0, "union": 0,
                                        "predicted": 0, "truth": 0})
            c["intersection"] += int(np.count_nonzero(p & t))
            c["union"] += int(np.count_nonzero(p | t))
            c["predicted"] += int(np.count_nonzero(p))
            c["truth"] += int(np.count_nonzero(t))
            if oid in frame_ids:
                u = np.count_nonzero(p | t)
                frame_scores[oid] = (np.count_nonzero(p & t) / u) if u else 1.0
        per_frame[idx] = frame_scores

    eval_ids = sorted(object_ids) if object_ids is not None else sorted(seen_truth_ids)
    per_object = {}
    for oid in eval_ids:
        c = counts.get(oid, {"intersection": 0, "union": 0})
        per_object[oid] = (c["intersection"] / c["union"]) if c["union"] else 1.0
    mean = float(np.mean(list(per_object.values()))) if per_object else 1.0
    return SegmentationReport(per_object=per_object, mean_iou=mean,
                              per_frame=per_frame, pixel_counts=counts,
                              n_frames=len(truth_frames))


# ----------------------------------------------------------- pose error ----

def pose_error(predicted: RigidTransform, truth: RigidTransform) -> tuple[float, float]:
    """(geodesic rotation angle in radians, Euclidean translation distance
    in meters) between two poses. Rotation error lies in [0, pi]."""
    rel_q = RigidTransform(truth.quaternion).inverse().compose(
        RigidTransform(predicted.quaternion))
    trans = float(np.linalg.norm(np.asarray(predicted.translation)
                                 - np.asarray(truth.translation)))
    return rel_q.rotation_angle(), trans


@dataclass
class PoseErrorReport:
    """Per-object rotation/translation error statistics over frames."""

    per_object: dict[int, dict[str, float]]

    def to_payload(self) -> dict:
        return {"per_object": {str(k): v for k, v in sorted(self.per_object.items())}}

    def format_table(self) -> str:
        lines = [f"{'object':>8}  {'rot mean':>10}  {'rot max':>10}  "
                 f"{'trans mean':>11}  {'trans max':>10}  {'frames':>7}"]
        for oid in sorted(self.per_object):
            s = self.per_object[oid]
            lines.append(f"{oid:>8}  {s['rotation_mean']:>10.6f}  {s['rotation_max']:>10.6f}  "
                         f"{s['translation_mean']:>11.6f}  {s['translation_max']:>10.6f}  "
                         f"{s['frames']:>7.0f}")
        return "\n".join(lines)


def _pose_frames(poses_dir: Path) -> dict[int, Path]:
    out = {}
    if poses_dir.is_dir():
        for p in poses_dir.glob("*.json"):
            if p.stem.isdigit():
                out[int(p.stem)] = p
    return out


def _read_pose_records(path: Path) -> dict[int, RigidTransform]:
    return {int(r["object_id"]): RigidTransform(np.array(r["q"]), np.array(r["t"]))
            for r in sceneio.read_json(path)}


def evaluate_poses(pred_dir: str | Path, truth_dir: str | Path) -> PoseErrorReport:
    """Compare per-frame object pose files against ground truth ones (both
    as written by the renderer: a list of {object_id, mesh, q, t})."""
    pred_frames = _pose_frames(Path(pred_dir))
    truth_frames = _pose_frames(Path(truth_dir))
    if not truth_frames:
        raise MissingInputError(f"no ground-truth pose files in {truth_dir}",
                                error_class="missing-truth")
    rot: dict[int, list[float]] = {}
    trans: dict[int, list[float]] = {}
    for idx in sorted(truth_frames):
        if idx not in pred_frames:
            raise MissingInputError(f"no predicted pose file for frame {idx}",
                                    error_class="missing-poses")
        pred = _read_pose_records(pred_frames[idx])
        truth = _read_pose_records(truth_frames[idx])
        for oid, t_pose in truth.items():
            if oid not in pred:
                continue
            r, t = pose_error(pred[oid], t_pose)
            rot.setdefault(oid, []).append(r)
            trans.setdefault(oid, []).append(t)
    per_object = {}
    for oid in sorted(rot):
        per_object[oid] = {
            "rotation_mean": float(np.mean(rot[oid])),
            "rotation_max": float(np.max(rot[oid])),
            "translation_mean": float(np.mean(trans[oid])),
            "translation_max": float(np.max(trans[oid])),
            "frames": float(len(rot[oid])),
        }
    return PoseErrorReport(per_object=per_object)


# ----------------------------------------------------------- downsample ----

def downsample_stride(target_hz: float, native_hz: float = NATIVE_HZ) -> int:
    if target_hz <= 0:
        raise ValueError("target rate must be positive")
    if target_hz > native_hz:
        raise ValueError("target rate cannot exceed the native rate")
    return max(1, int(round(native_hz / target_hz)))


def downsample_scene(session: sceneio.SceneSession, target_hz: float,
                     native_hz: float = NATIVE_HZ,
                     out_dir: str | Path | None = None) -> sceneio.SceneSession:
    """Materialize a reduced-rate copy of a scene.

    Keeps every stride-th frame starting from the first (stride =
    round(native/target)) and renumbers the survivors contiguously from 0,
    preserving order, so the copy is itself a valid scene. Frames,
    trajectory, rendered labels and poses, and ground truth are all
    filtered consistently; everything else is copied as is."""
    stride = downsample_stride(target_hz, native_hz)
    src = session.root
    if out_dir is None:
        out_dir = src.parent / f"{src.name}_ds{target_hz:g}hz"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    all_indices = sceneio.frame_indices(src)
    if not all_indices and session.trajectory is not None:
        all_indices = session.trajectory.frame_indices()
    renumber = {old: new for new, old in enumerate(all_indices[::stride])}

    def copy_if_exists(rel: str):
        p = src / rel
        if p.is_file():
            (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(p, out_dir / rel)

    copy_if_exists("camera.json")
    copy_if_exists("annotations.json")
    copy_if_exists("session.json")
    copy_if_exists("reconstruction.ply")
    copy_if_exists("truth/annotations.json")
    if (src / "meshes").is_dir():
        (out_dir / "meshes").mkdir(exist_ok=True)
        for p in sorted((src / "meshes").iterdir()):
            if p.is_file():
                shutil.copyfile(p, out_dir / "meshes" / p.name)

    per_frame_files = (("frames", "{:06d}_depth.png"), ("frames", "{:06d}_rgb.png"),
                       ("labels", "{:06d}_label.png"), ("poses", "{:06d}.json"),
                       ("truth/labels", "{:06d}_label.png"),
                       ("truth/poses", "{:06d}.json"))
    for sub, pattern in per_frame_files:
        src_sub = src / sub
        if not src_sub.is_dir():
            continue
        for old, new in sorted(renumber.items()):
            p = src_sub / pattern.format(old)
            if p.is_file():
                (out_dir / sub).mkdir(parents=True, exist_ok=True)
                shutil.copyfile(p, out_dir / sub / pattern.format(new))

    if session.trajectory is not None:
        filtered = Trajectory([(renumber[i], p) for i, p in session.trajectory
                               if i in renumber])
        sceneio.write_trajectory(out_dir, filtered)
    return sceneio.SceneSession.open(out_dir)


# ---------------------------------------------------------------- timing ----

TIMING_LOG = "timings.json"


def record_stage(scene_dir: str | Path, stage: str, seconds: float,
                 frames: int | None = None) -> None:
    """Update the scene's run log with one stage's wall-clock time. The log
    is a diagnostic sidecar, not a pipeline output."""
    path = Path(scene_dir) / TIMING_LOG
    log = {"stages": {}}
    if path.is_file():
        log = sceneio.read_json(path)
    entry = {"seconds": float(seconds)}
    if frames is not None:
        entry["frames"] = int(frames)
    log.setdefault("stages", {})[stage] = entry
    sceneio.write_json_atomic(path, log)


@contextmanager
def stage_timer(scene_dir: str | Path, stage: str, frames: int | None = None):
    t0 = time.perf_counter()
    yield
    record_stage(scene_dir, stage, time.perf_counter() - t0, frames)


def timing_report(scene_dir: str | Path, native_hz: float = NATIVE_HZ) -> list[dict]:
    """Per-stage rows with wall-clock seconds and, when the stage recorded a
    frame count, the ratio of processing time to sensor time (frames at the
    native rate). Ratio ≤ 1 means faster than real time."""
    path = Path(scene_dir) / TIMING_LOG
    if not path.is_file():
        return []
    log = sceneio.read_json(path)
    rows = []
    for stage in sorted(log.get("stages", {})):
        entry = log["stages"][stage]
        row = {"stage": stage, "seconds": float(entry["seconds"])}
        if "frames" in entry:
            sensor = entry["frames"] / native_hz
            row["frames"] = int(entry["frames"])
            row["sensor_seconds"] = sensor
            row["ratio_to_sensor"] = row["seconds"] / sensor if sensor > 0 else float("inf")
        rows.append(row)
    return rows


def format_timing_table(rows: list[dict]) -> str:
    if not rows:
        return "(no timing log)"
    lines = [f"{'stage':>12}  {'seconds':>10}  {'frames':>7}  {'x realtime':>10}"]
    for r in rows:
        frames = str(r.get("frames", "-"))
        ratio = f"{r['ratio_to_sensor']:.3f}" if "ratio_to_sensor" in r else "-"
        lines.append(f"{r['stage']:>12}  {r['seconds']:>10.3f}  {frames:>7}  {ratio:>10}")
    return "\n".join(lines)
