/** Click-ray picking math. Pure functions over plain arrays so the
 * viewport layer stays thin and the math is testable headless.
 *
 * Scene viewport picks snap to an existing cloud point (the UI never
 * invents scene coordinates); mesh viewport picks are exact ray-triangle
 * intersections on the mesh surface. */

import type { Vec3 } from "./api.js";

export interface Ray {
  origin: Vec3;
  dir: Vec3; // unit length
}

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function dot(a: Vec3, b: Vec3): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

/** Index of the cloud point the click selects, or -1.
 *
 * Candidates are the points in front of the origin whose perpendicular
 * distance to the ray is at most maxDistance; among them the one nearest
 * the origin along the ray wins. Depth beats perpendicular distance
 * because a ray that enters a surface also exits through its far side,
 * and both lie on the ray: the nearer point is the one the user sees.
 * Exact depth ties break to the lower index. `points` is flat xyz. */
export function nearestCloudPoint(
  ray: Ray,
  points: Float32Array,
  maxDistance = 0.03,
): number {
  const [ox, oy, oz] = ray.origin;
  const [dx, dy, dz] = ray.dir;
  const maxD2 = maxDistance * maxDistance;
  let best = -1;
  let bestT = Infinity;
  const n = Math.floor(points.length / 3);
  for (let i = 0; i < n; i++) {
    const px = points[3 * i] - ox;
    const py = points[3 * i + 1] - oy;
    const pz = points[3 * i + 2] - oz;
    const t = px * dx + py * dy + pz * dz;
    if (t <= 0 || t >= bestT) continue; // behind the camera, or occluded
    const qx = px - t * dx;
    const qy = py - t * dy;
    const qz = pz - t * dz;
    if (qx * qx + qy * qy + qz * qz <= maxD2) {
      bestT = t;
      best = i;
    }
  }
  return best;
}

/** Moller-Trumbore ray-triangle intersection; returns the ray parameter t
 * or null for a miss. Backfaces count as hits (meshes may be viewed from
 * inside out while orbiting). */
export function rayTriangle(ray: Ray, a: Vec3, b: Vec3, c: Vec3): number | null {
  const e1 = sub(b, a);
  const e2 = sub(c, a);
  const p = cross(ray.dir, e2);
  const det = dot(e1, p);
  if (Math.abs(det) < 1e-12) return null;
  const inv = 1.0 / det;
  const s = sub(ray.origin, a);
  const u = dot(s, p) * inv;
  if (u < 0 || u > 1) return null;
  const q = cross(s, e1);
  const v = dot(ray.dir, q) * inv;
  if (v < 0 || u + v > 1) return null;
  const t = dot(e2, q) * inv;
  return t > 1e-9 ? t : null;
}

/** Closest ray-surface intersection across all triangles, or null.
 * vertices/faces are row arrays as served by the mesh endpoint. */
export function pickMeshPoint(
  ray: Ray,
  vertices: number[][],
  faces: number[][],
): Vec3 | null {
  let bestT = Infinity;
  for (const f of faces) {
    const t = rayTriangle(
      ray,
      vertices[f[0]] as Vec3,
      vertices[f[1]] as Vec3,
      vertices[f[2]] as Vec3,
    );
    if (t !== null && t < bestT) bestT = t;
  }
  if (!isFinite(bestT)) return null;
  return [
    ray.origin[0] + bestT * ray.dir[0],
    ray.origin[1] + bestT * ray.dir[1],
    ray.origin[2] + bestT * ray.dir[2],
  ];
}
