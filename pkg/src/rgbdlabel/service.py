"""HTTP annotation service.

Hosts the human-in-the-loop workflow over plain HTTP/JSON: browse scenes,
fetch the fused reconstruction (binary payload) and the mesh library, click
once to strip the support table, submit 3+3 click correspondences to run
the alignment stack, persist accepted object poses, and kick off label
rendering as a background job.

Concurrency: reads are unrestricted; per-scene mutations serialize on a
scene lock, alignments additionally queue on a dedicated per-scene lock so
one alignment runs at a time. Render jobs run on a small worker pool and
publish atomic status transitions.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from fastapi import Body, FastAPI, Query, Response
from fastapi.responses import JSONResponse

from . import labeler, sceneio
from .errors import PipelineError
from .geometry import PointCloud, RigidTransform, TriangleMesh
from .registration import IcpParams, align_object, landmark_transform, segment_plane

log = logging.getLogger(__name__)

ICP_OVERRIDE_FIELDS = ("max_iterations", "correspondence_max_distance",
                       "convergence_translation_eps", "convergence_rotation_eps",
                       "min_correspondences")


def pose_payload(T: RigidTransform) -> dict:
    return {"q": [float(x) for x in T.quaternion],
            "t": [float(x) for x in T.translation]}


def pose_from_payload(p: dict) -> RigidTransform:
    return RigidTransform(np.asarray(p["q"], dtype=np.float64),
                          np.asarray(p["t"], dtype=np.float64))


class ApiError(Exception):
    """Maps a pipeline failure onto an HTTP status + error payload."""

    def __init__(self, status: int, error_class: str, message: str,
                 stage: str | None = None):
        super().__init__(message)
        self.status = status
        self.error_class = error_class
        self.stage = stage

    def response(self) -> JSONResponse:
        detail = {"error": self.error_class, "message": str(self)}
        if self.stage:
            detail["stage"] = self.stage
        return JSONResponse(status_code=self.status, content={"detail": detail})


class SceneState:
    """In-memory working state for one scene: the persisted session plus the
    table-filter undo stack and the render job record."""

    def __init__(self, session: sceneio.SceneSession):
        self.session = session
        self.lock = threading.RLock()
        self.align_lock = threading.Lock()
        self.index_stack: list[np.ndarray] = []
        self.plane_stack: list[dict] = []
        self.render_job = {"state": "none", "frames_done": 0}
        self._filter_ready = False

    def ensure_filter(self) -> None:
        """Rebuild the table-filter stack from persisted clicks on first
        touch of the cloud (kept lazy so listing scenes stays cheap)."""
        with self.lock:
            if self._filter_ready:
                return
            self._filter_ready = True
            if (self.session.table_clicks
                    and (self.session.root / "reconstruction.ply").is_file()):
                self.rebuild_table_filter()

    def cloud(self) -> PointCloud:
        base = self.session.reconstruction()
        if not self.index_stack:
            return base
        return base.select(self.index_stack[-1])

    def cloud_version(self) -> str:
        return str(len(self.index_stack))

    def apply_table_click(self, point) -> dict:
        base = self.session.reconstruction()
        indices = (self.index_stack[-1] if self.index_stack
                   else np.arange(base.points.shape[0]))
        sub = base.select(indices)
        keep, plane = segment_plane(sub, point)
        self.index_stack.append(indices[keep])
        self.plane_stack.append(plane)
        self.session.table_clicks.append([float(x) for x in point])
        self.session.table_plane = plane
        self.session.save()
        return plane

    def undo_table_click(self) -> None:
        self.index_stack.pop()
        self.plane_stack.pop()
        self.session.table_clicks.pop()
        self.session.table_plane = self.plane_stack[-1] if self.plane_stack else None
        self.session.save()

    def rebuild_table_filter(self) -> None:
        """Re-apply persisted clicks after a cold open; if any click no
        longer segments (reconstruction changed), the filter state resets."""
        clicks = list(self.session.table_clicks)
        self.session.table_clicks = []
        self.index_stack = []
        self.plane_stack = []
        try:
            for c in clicks:
                self.apply_table_click(c)
        except PipelineError:
            log.warning("scene %s: persisted table clicks no longer apply; reset",
                        self.session.scene_id)
            self.session.table_clicks = []
            self.session.table_plane = None
            self.index_stack = []
            self.plane_stack = []
            self.session.save()


class AnnotationServer:
    def __init__(self, scenes_root: str | Path, mesh_dir: str | Path | None = None,
                 render_workers: int = 2):
        self.root = Path(scenes_root)
        self.library = sceneio.MeshLibrary(mesh_dir) if mesh_dir else None
        self._states: dict[str, SceneState] = {}
        self._states_lock = threading.Lock()
        self._render_pool = ThreadPoolExecutor(max_workers=render_workers,
                                               thread_name_prefix="render")

    def scene_ids(self) -> list[str]:
        return sceneio.list_scenes(self.root)

    def state(self, scene_id: str) -> SceneState:
        if "/" in scene_id or scene_id in ("", ".", ".."):
            raise ApiError(404, "unknown-scene", f"no scene named {scene_id!r}")
        with self._states_lock:
            if scene_id not in self._states:
                scene_dir = self.root / scene_id
                if not (scene_dir / "camera.json").is_file():
                    raise ApiError(404, "unknown-scene", f"no scene named {scene_id!r}")
                self._states[scene_id] = SceneState(sceneio.SceneSession.open(scene_dir))
            return self._states[scene_id]

    def scene_meshes(self, state: SceneState) -> sceneio.MeshLibrary | None:
        meshes_dir = state.session.root / "meshes"
        if meshes_dir.is_dir():
            return sceneio.MeshLibrary(meshes_dir)
        return None

    def resolve_mesh(self, key: str, state: SceneState | None = None) -> TriangleMesh:
        if state is not None:
            local = self.scene_meshes(state)
            if local is not None and key in local:
                return local.get(key)
        if self.library is not None and key in self.library:
            return self.library.get(key)
        raise ApiError(404, "mesh-not-found", f"no mesh named {key!r}")

    def mesh_keys(self, state: SceneState | None = None) -> list[str]:
        keys = set(self.library.keys()) if self.library else set()
        if state is not None:
            local = self.scene_meshes(state)
            if local is not None:
                keys |= set(local.keys())
        return sorted(keys)


def _require(body: dict, key: str):
    if key not in body:
        raise ApiError(422, "invalid-request", f"missing field {key!r}")
    return body[key]


def _parse_clicks(value, name: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ApiError(422, "invalid-clicks", f"{name} must be numeric xyz points")
    if arr.shape != (3, 3):
        raise ApiError(422, "invalid-clicks",
                       f"{name} must be exactly 3 xyz points, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ApiError(422, "invalid-clicks", f"{name} contains non-finite values")
    return arr


def create_app(scenes_root: str | Path, mesh_dir: str | Path | None = None,
               render_workers: int = 2) -> FastAPI:
    server = AnnotationServer(scenes_root, mesh_dir, render_workers)
    app = FastAPI(title="rgbdlabel annotation service")
    app.state.server = server

    @app.exception_handler(ApiError)
    async def _api_error(request, exc: ApiError):
        return exc.response()

    @app.exception_handler(PipelineError)
    async def _pipeline_error(request, exc: PipelineError):
        if exc.error_class == "mesh-not-found":
            status = 404
        elif exc.error_class.startswith("missing-"):
            status = 409  # workflow precondition not reached yet
        else:
            status = 422
        return ApiError(status, exc.error_class, str(exc),
                        getattr(exc, "stage", None)).response()

    @app.get("/scenes")
    def scenes():
        out = []
        for sid in server.scene_ids():
            st = server.state(sid)
            out.append({"scene_id": sid, "status": st.session.status})
        return {"scenes": out}

    @app.get("/scenes/{scene_id}")
    def scene_detail(scene_id: str):
        st = server.state(scene_id)
        st.ensure_filter()
        with st.lock:
            payload = st.session.state_payload()
            payload["frames"] = st.session.frame_list()
            payload["cloud_version"] = st.cloud_version()
            payload["meshes"] = server.mesh_keys(st)
            return payload

    @app.get("/scenes/{scene_id}/cloud")
    def scene_cloud(scene_id: str, decimation: int = Query(1, ge=1)):
        st = server.state(scene_id)
        st.ensure_filter()
        with st.lock:
            cloud = st.cloud()
            payload = sceneio.encode_cloud(cloud.points[::decimation])
            version = st.cloud_version()
        return Response(content=payload, media_type="application/octet-stream",
                        headers={"X-Cloud-Version": version})

    @app.get("/meshes")
    def meshes(scene: str | None = Query(None)):
        st = server.state(scene) if scene else None
        return {"meshes": server.mesh_keys(st)}

    @app.get("/meshes/{key}")
    def mesh_payload(key: str, scene: str | None = Query(None)):
        st = server.state(scene) if scene else None
        mesh = server.resolve_mesh(key, st)
        return {"key": key,
                "vertices": mesh.vertices.tolist(),
                "faces": mesh.faces.tolist()}

    @app.post("/scenes/{scene_id}/table-click")
    def table_click(scene_id: str, body: dict = Body(...)):
        st = server.state(scene_id)
        st.ensure_filter()
        try:
            point = np.asarray(_require(body, "point"), dtype=np.float64)
        except (TypeError, ValueError):
            raise ApiError(422, "invalid-request", "point must be a finite xyz triple")
        if point.shape != (3,) or not np.all(np.isfinite(point)):
            raise ApiError(422, "invalid-request", "point must be a finite xyz triple")
        with st.lock:
            plane = st.apply_table_click(point)
            return {"version": st.cloud_version(), "plane": plane,
                    "inliers": plane["inliers"],
                    "points_remaining": int(st.cloud().points.shape[0])}

    @app.delete("/scenes/{scene_id}/table-click")
    def table_click_undo(scene_id: str):
        st = server.state(scene_id)
        st.ensure_filter()
        with st.lock:
            if not st.index_stack:
                raise ApiError(409, "scene-state", "no table click to undo")
            st.undo_table_click()
            return {"version": st.cloud_version(),
                    "points_remaining": int(st.cloud().points.shape[0])}

    @app.post("/scenes/{scene_id}/align")
    def align(scene_id: str, body: dict = Body(...)):
        st = server.state(scene_id)
        mesh_key = _require(body, "mesh_key")
        model_pts = _parse_clicks(_require(body, "model_points"), "model_points")
        scene_pts = _parse_clicks(_require(body, "scene_points"), "scene_points")
        mesh = server.resolve_mesh(mesh_key, st)
        overrides = body.get("icp") or {}
        unknown = set(overrides) - set(ICP_OVERRIDE_FIELDS)
        if unknown:
            raise ApiError(422, "invalid-request",
                           f"unknown icp override(s): {sorted(unknown)}")
        try:
            params = IcpParams(**{**{f: getattr(IcpParams(), f)
                                     for f in ICP_OVERRIDE_FIELDS}, **overrides})
        except ValueError as e:
            raise ApiError(422, "invalid-request", str(e))

        st.ensure_filter()
        with st.align_lock:
            cloud = st.cloud()
            pose, result = align_object(cloud, mesh, model_pts, scene_pts, params)
            # cannot fail once align_object's landmark stage succeeded
            rough = landmark_transform(model_pts, scene_pts)
        return {
            "rough_pose": pose_payload(rough),
            "refined_pose": pose_payload(pose),
            "fitness": result.fitness,
            "rmse": result.rmse,
            "iterations": result.iterations_used,
            "converged": result.converged,
        }

    @app.post("/scenes/{scene_id}/annotations")
    def put_annotation(scene_id: str, body: dict = Body(...)):
        st = server.state(scene_id)
        object_id = _require(body, "object_id")
        mesh_key = body.get("mesh_key") or body.get("mesh")
        if not mesh_key:
            raise ApiError(422, "invalid-request", "missing field 'mesh_key'")
        try:
            pose = pose_from_payload(_require(body, "pose"))
        except (KeyError, TypeError, ValueError) as e:
            raise ApiError(422, "invalid-request", f"bad pose payload: {e}")
        server.resolve_mesh(mesh_key, st)
        try:
            ann = labeler.ObjectAnnotation(object_id=int(object_id),
                                           mesh_ref=mesh_key, pose=pose)
        except ValueError as e:
            raise ApiError(422, "invalid-request", str(e))
        with st.lock:
            kept = [a for a in st.session.annotations if a.object_id != ann.object_id]
            kept.append(ann)
            st.session.annotations = sorted(kept, key=lambda a: a.object_id)
            st.session.advance("annotated")
            st.session.save()
            return {"annotations": len(st.session.annotations)}

    @app.delete("/scenes/{scene_id}/annotations/{object_id}")
    def delete_annotation(scene_id: str, object_id: int):
        st = server.state(scene_id)
        with st.lock:
            before = len(st.session.annotations)
            st.session.annotations = [a for a in st.session.annotations
                                      if a.object_id != object_id]
            if len(st.session.annotations) == before:
                raise ApiError(404, "unknown-annotation",
                               f"no annotation for object {object_id}")
            st.session.save()
            return {"annotations": len(st.session.annotations)}

    def _run_render(st: SceneState):
        def bump(done):
            with st.lock:
                st.render_job["frames_done"] = done

        try:
            meshes = {a.mesh_ref: server.resolve_mesh(a.mesh_ref, st)
                      for a in st.session.annotations}
            with st.lock:
                st.render_job.update(state="running", frames_done=0)
            labeler.render_scene(st.session, meshes, workers=2, progress=bump)
            with st.lock:
                st.session.advance("rendered")
                st.session.save()
                st.render_job["state"] = "done"
        except Exception as e:  # job must always reach a terminal state
            log.exception("render job failed for scene %s", st.session.scene_id)
            with st.lock:
                st.render_job.update(state="failed", error=str(e))

    @app.post("/scenes/{scene_id}/render")
    def render(scene_id: str):
        st = server.state(scene_id)
        with st.lock:
            if not st.session.annotations:
                raise ApiError(409, "missing-annotations",
                               "cannot render before any annotation is saved")
            if st.session.trajectory is None or len(st.session.trajectory) == 0:
                raise ApiError(409, "missing-trajectory", "scene has no trajectory")
            if st.render_job["state"] in ("queued", "running"):
                raise ApiError(409, "render-in-progress",
                               "a render job is already active for this scene")
            st.render_job = {"state": "queued", "frames_done": 0}
        server._render_pool.submit(_run_render, st)
        return {"state": "queued"}

    @app.get("/scenes/{scene_id}/render/status")
    def render_status(scene_id: str):
        st = server.state(scene_id)
        with st.lock:
            return dict(st.render_job)

    return app
