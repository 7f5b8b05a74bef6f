"""Rigid alignment stack: minimal-correspondence least-squares fit, crop of
scene points near a roughly posed model, point-to-point ICP refinement
composed into the full 3-click object alignment, and the one-click table
plane segmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (CorrespondenceStarvationError, DegenerateInputError,
                     NoPlanarNeighborhoodError)
from .geometry import MeshProximity, PointCloud, RigidTransform, TriangleMesh

# second singular value of the cross-covariance must carry at least this
# fraction of the first, else rotation is unconstrained
_DEGENERACY_RATIO = 1e-9


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 60
    correspondence_max_distance: float = 0.02
    convergence_translation_eps: float = 1e-5
    convergence_rotation_eps: float = 1e-5
    min_correspondences: int = 10

    def __post_init__(self):
        for name in ("max_iterations", "correspondence_max_distance",
                     "convergence_translation_eps", "convergence_rotation_eps",
                     "min_correspondences"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class IcpResult:
    """Diagnostics for the annotation UI's accept/retry loop."""

    transform: RigidTransform
    fitness: float
    rmse: float
    iterations_used: int
    converged: bool
    rmse_history: list[float] = field(default_factory=list)


def landmark_transform(model_points: np.ndarray, scene_points: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform T minimizing sum ||T(model_i) - scene_i||^2.

    Rotation from the SVD of the cross-covariance of the centered point
    sets, with a determinant correction that excludes reflections;
    translation from the centroids. Raises DegenerateInputError when the
    correspondences do not constrain a unique rotation (fewer than 3 pairs,
    or either set collinear).
    """
    model = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    scene = np.asarray(scene_points, dtype=np.float64).reshape(-1, 3)
    if model.shape != scene.shape:
        raise ValueError("model and scene correspondence counts differ")
    k = model.shape[0]
    if k < 3:
        raise DegenerateInputError(f"need at least 3 correspondences, got {k}")

    centroid_m = model.mean(axis=0)
    centroid_s = scene.mean(axis=0)
    H = (model - centroid_m).T @ (scene - centroid_s)

    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 0 or S[1] < _DEGENERACY_RATIO * S[0]:
        raise DegenerateInputError(
            "correspondences are collinear or coincident; rotation is unconstrained")

    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = centroid_s - R @ centroid_m
    return RigidTransform.from_matrix(R, t)


def crop_near_model(scene: PointCloud, mesh: TriangleMesh, rough_pose: RigidTransform,
                    radius: float = 0.01) -> PointCloud:
    """Scene points within radius (default 1 cm) of the posed mesh surface,
    in input order. An empty result is valid and signals a bad rough pose."""
    if len(scene) == 0:
        raise ValueError("crop_near_model on empty scene")
    mask = MeshProximity(mesh, rough_pose).within(scene.points, radius)
    return scene.select(mask)


def sample_mesh_surface(mesh: TriangleMesh, points_per_m2: float = 1.0e6,
                        max_points: int = 20000, seed: int = 0,
                        n_points: int | None = None) -> PointCloud:
    """Uniform area-weighted surface sample.

    Default density is 1 point per mm^2 capped at max_points; n_points
    overrides both. Deterministic for a given seed.
    """
    areas = mesh.face_areas()
    total = areas.sum()
    if n_points is None:
        n_points = min(max_points, max(1, int(round(total * points_per_m2))))
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(areas), size=n_points, p=areas / total)
    r1 = rng.random(n_points)
    r2 = rng.random(n_points)
    flip = r1 + r2 > 1.0
    r1[flip] = 1.0 - r1[flip]
    r2[flip] = 1.0 - r2[flip]
    a, b, c = mesh.triangle_corners()
    a, b, c = a[face_idx], b[face_idx], c[face_idx]
    pts = a + r1[:, None] * (b - a) + r2[:, None] * (c - a)
    return PointCloud(pts)


def icp_refine(source: PointCloud, target: PointCloud, initial: RigidTransform,
               params: IcpParams = IcpParams()) -> IcpResult:
    """Point-to-point ICP aligning source onto target.

    Each iteration matches transformed source points to their nearest
    target point, rejects pairs beyond correspondence_max_distance, and
    re-solves the full landmark transform on the survivors. The returned
    transform maps the source frame into the target frame. A non-converged
    run still returns diagnostics; running out of correspondences raises
    CorrespondenceStarvationError carrying the last iterate.
    """
    if len(source) < params.min_correspondences or len(target) < params.min_correspondences:
        raise CorrespondenceStarvationError(
            f"need at least {params.min_correspondences} points in source and target",
            last_result=IcpResult(initial, 0.0, float("inf"), 0, False))

    tree = target.tree()
    src = source.points
    T = initial
    history: list[float] = []
    converged = False
    iterations = 0

    for iterations in range(1, params.max_iterations + 1):
        moved = T.apply(src)
        dist, idx = tree.query(moved)
        mask = dist <= params.correspondence_max_distance
        n = int(np.count_nonzero(mask))
        if n < params.min_correspondences:
            last = _finalize(T, src, tree, params, iterations - 1, False, history)
            raise CorrespondenceStarvationError(
                f"{n} correspondences within "
                f"{params.correspondence_max_distance} m at iteration {iterations} "
                f"(minimum {params.min_correspondences})",
                last_result=last)
        matched_target = target.points[idx[mask]]
        T_new = landmark_transform(src[mask], matched_target)
        residual = T_new.apply(src[mask]) - matched_target
        history.append(float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1)))))

        delta = T.inverse().compose(T_new)
        T = T_new
        if (delta.rotation_angle() < params.convergence_rotation_eps
                and np.linalg.norm(delta.translation) < params.convergence_translation_eps):
            converged = True
            break

    return _finalize(T, src, tree, params, iterations, converged, history)


def _finalize(T, src, tree, params, iterations, converged, history) -> IcpResult:
    moved = T.apply(src)
    dist, _ = tree.query(moved)
    mask = dist <= params.correspondence_max_distance
    fitness = float(np.count_nonzero(mask)) / len(src)
    rmse = float(np.sqrt(np.mean(dist[mask] ** 2))) if mask.any() else float("inf")
    return IcpResult(transform=T, fitness=fitness, rmse=rmse,
                     iterations_used=iterations, converged=converged,
                     rmse_history=history)


# residual outlier gate for point-to-plane: skip the first iterations so
# genuinely informative far-from-aligned structure is not trimmed away
P2PL_GATE_WARMUP = 3
P2PL_GATE_SIGMAS = 3.0
P2PL_GATE_SIGMA_FLOOR = 1e-4


def icp_point_to_plane(source: PointCloud, target: PointCloud,
                       target_normals: np.ndarray, initial: RigidTransform,
                       params: IcpParams = IcpParams()) -> IcpResult:
    """ICP minimizing distance along the target's surface normals.

    Point-to-point matching slides freely along planar regions, so on
    scenes dominated by flat surfaces it converges to near-identity no
    matter the true motion. Projecting each residual onto the matched
    target normal removes that null space: flat regions only constrain
    their normal direction and the remaining degrees of freedom are set
    by whatever oriented structure the scene has. Each iteration solves
    the small-angle linearization of the normal-projected least squares
    in closed form.

    After a few warm-up iterations, correspondences whose residual sits
    more than a few scaled median absolute deviations from the median are
    dropped; mismatches across occlusion boundaries otherwise leave a
    small but systematic bias that accumulates linearly when the solver
    is chained frame to frame. Returned transform maps source into the
    target frame.
    """
    if len(source) < params.min_correspondences or len(target) < params.min_correspondences:
        raise CorrespondenceStarvationError(
            f"need at least {params.min_correspondences} points in source and target",
            last_result=IcpResult(initial, 0.0, float("inf"), 0, False))
    normals = np.asarray(target_normals, dtype=np.float64)
    if normals.shape != target.points.shape:
        raise DegenerateInputError(
            f"target_normals shape {normals.shape} does not match target {target.points.shape}")

    tree = target.tree()
    src = source.points
    T = initial
    history: list[float] = []
    converged = False
    iterations = 0

    for iterations in range(1, params.max_iterations + 1):
        moved = T.apply(src)
        dist, idx = tree.query(moved)
        mask = dist <= params.correspondence_max_distance
        n_corr = int(np.count_nonzero(mask))
        if n_corr < params.min_correspondences:
            last = _finalize(T, src, tree, params, iterations - 1, False, history)
            raise CorrespondenceStarvationError(
                f"{n_corr} correspondences within "
                f"{params.correspondence_max_distance} m at iteration {iterations} "
                f"(minimum {params.min_correspondences})",
                last_result=last)
        p = moved[mask]
        q = target.points[idx[mask]]
        n = normals[idx[mask]]
        r = np.sum(n * (p - q), axis=1)
        history.append(float(np.sqrt(np.mean(r ** 2))))
        if iterations > P2PL_GATE_WARMUP:
            center = np.median(r)
            sigma = max(1.4826 * np.median(np.abs(r - center)), P2PL_GATE_SIGMA_FLOOR)
            keep = np.abs(r - center) <= P2PL_GATE_SIGMAS * sigma
            if int(np.count_nonzero(keep)) >= params.min_correspondences:
                p, q, n, r = p[keep], q[keep], n[keep], r[keep]
        # rows [p x n, n] give d r / d (omega, t) for the twist update
        A = np.hstack([np.cross(p, n), n])
        x, *_ = np.linalg.lstsq(A, -r, rcond=None)
        omega, dt = x[:3], x[3:]
        angle = float(np.linalg.norm(omega))
        axis = omega / angle if angle > 0 else np.array([0.0, 0.0, 1.0])
        T = RigidTransform.from_axis_angle(axis, angle, dt).compose(T)
        if (angle < params.convergence_rotation_eps
                and np.linalg.norm(dt) < params.convergence_translation_eps):
            converged = True
            break

    return _finalize(T, src, tree, params, iterations, converged, history)


def align_object(scene: PointCloud, mesh: TriangleMesh, model_clicks: np.ndarray,
                 scene_clicks: np.ndarray, params: IcpParams = IcpParams(),
                 crop_radius: float = 0.01, sample_seed: int = 0,
                 ) -> tuple[RigidTransform, IcpResult]:
    """Full 3-click alignment: rough landmark fit, 1 cm crop, ICP refine.

    model_clicks and scene_clicks are corresponding 3x3 point sets (clicks
    on the mesh surface and on the reconstruction). The returned pose maps
    object coordinates into the reconstruction frame. Errors carry the
    failing stage so a UI can tell the user to re-click.
    """
    try:
        rough = landmark_transform(model_clicks, scene_clicks)
    except DegenerateInputError as e:
        e.stage = "landmark"
        raise

    cropped = crop_near_model(scene, mesh, rough, radius=crop_radius)
    model_sample = sample_mesh_surface(mesh, seed=sample_seed)

    try:
        result = icp_refine(model_sample, cropped, rough, params)
    except CorrespondenceStarvationError as e:
        e.stage = "icp"
        raise
    return result.transform, result


def _fit_plane(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares plane through points: unit normal n and offset d with
    n.p = d on the plane (smallest principal axis of the scatter)."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, vecs = np.linalg.eigh(centered.T @ centered)
    normal = vecs[:, 0]
    return normal, float(normal @ centroid)


def segment_plane(cloud: PointCloud, click, angle_tol_deg: float = 10.0,
                  dist_tol: float = 0.01, min_inliers: int = 100,
                  growth_radius: float = 0.025, seed_radius: float = 0.03,
                  ) -> tuple[np.ndarray, dict]:
    """Region-grow a support plane from the point nearest a user click.

    A local plane is fit around the seed point, then the region grows
    through neighbors (within growth_radius) that lie within dist_tol of
    the plane and whose normals agree within angle_tol_deg (skipped when
    the cloud has no normals). Points in the grown region, and points more
    than dist_tol behind the refit plane, are marked for removal; objects
    resting on the plane survive because their surfaces break the normal
    and distance gates.

    Returns (keep_mask, plane_params). Raises NoPlanarNeighborhoodError
    when the grown region has fewer than min_inliers points.
    """
    pts = cloud.points
    if pts.shape[0] == 0:
        raise NoPlanarNeighborhoodError("cannot segment an empty cloud")
    click = np.asarray(click, dtype=np.float64).reshape(3)
    tree = cloud.tree()
    _, seed = tree.query(click)
    seed = int(seed)

    neighborhood = tree.query_ball_point(pts[seed], seed_radius)
    if len(neighborhood) < 3:
        raise NoPlanarNeighborhoodError(
            f"only {len(neighborhood)} points within {seed_radius} m of the click")
    normal, offset = _fit_plane(pts[neighborhood])

    ok = np.abs(pts @ normal - offset) <= dist_tol
    if cloud.normals is not None:
        cos_tol = np.cos(np.radians(angle_tol_deg))
        ok &= np.abs(cloud.normals @ normal) >= cos_tol

    in_region = np.zeros(pts.shape[0], dtype=bool)
    if ok[seed]:
        frontier = np.array([seed], dtype=np.int64)
    else:
        qualifying = [i for i in neighborhood if ok[i]]
        if not qualifying:
            raise NoPlanarNeighborhoodError("clicked point has no planar neighborhood")
        frontier = np.array(qualifying[:1], dtype=np.int64)
    in_region[frontier] = True

    while frontier.size:
        balls = tree.query_ball_point(pts[frontier], growth_radius)
        candidates = np.unique(np.concatenate(
            [np.asarray(b, dtype=np.int64) for b in balls]))
        candidates = candidates[ok[candidates] & ~in_region[candidates]]
        in_region[candidates] = True
        frontier = candidates

    count = int(np.count_nonzero(in_region))
    if count < min_inliers:
        raise NoPlanarNeighborhoodError(
            f"planar region around click has only {count} points "
            f"(need {min_inliers})")

    # refit on the full region and orient the normal so surviving points
    # sit on the positive side
    normal, offset = _fit_plane(pts[in_region])
    rest = ~in_region
    if rest.any() and np.mean(pts[rest] @ normal - offset) < 0:
        normal, offset = -normal, -offset

    signed = pts @ normal - offset
    keep = ~(in_region | (signed < -dist_tol))
    plane = {"normal": [float(x) for x in normal], "offset": offset,
             "inliers": count}
    return keep, plane
