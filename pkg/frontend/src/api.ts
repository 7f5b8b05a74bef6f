/** Typed client for the annotation service HTTP API. */

export type Vec3 = [number, number, number];

export interface PosePayload {
  q: number[];
  t: number[];
}

export interface AnnotationRecord {
  object_id: number;
  mesh: string;
  q: number[];
  t: number[];
}

export interface SceneSummary {
  scene_id: string;
  status: string;
}

export interface SceneDetail {
  scene_id: string;
  status: string;
  table_clicks: number[][];
  table_plane: { normal: number[]; offset: number; inliers: number } | null;
  annotations: AnnotationRecord[];
  trajectory_frames: number[];
  frames: number[];
  cloud_version: string;
  meshes: string[];
}

export interface MeshPayload {
  key: string;
  vertices: number[][];
  faces: number[][];
}

export interface CloudPayload {
  /** Flat xyz triples, reconstruction frame, meters. */
  points: Float32Array;
  version: string;
}

export interface TableClickResponse {
  version: string;
  inliers: number;
  points_remaining: number;
  plane: { normal: number[]; offset: number; inliers: number };
}

export interface AlignResponse {
  rough_pose: PosePayload;
  refined_pose: PosePayload;
  fitness: number;
  rmse: number;
  iterations: number;
  converged: boolean;
}

export interface RenderStatus {
  state: "none" | "queued" | "running" | "done" | "failed";
  frames_done: number;
  error?: string;
}

export interface IcpOverrides {
  max_iterations?: number;
  correspondence_max_distance?: number;
  convergence_translation_eps?: number;
  convergence_rotation_eps?: number;
  min_correspondences?: number;
}

/** A 4xx/5xx response; carries the service's error class and, when the
 * failure belongs to a pipeline stage, its name (e.g. "landmark"). */
export class ApiError extends Error {
  constructor(
    public status: number,
    public errorClass: string,
    message: string,
    public stage?: string,
  ) {
    super(message);
    this.name = "ApiError";
  }

  /** Dismissible-banner text naming the failed stage (or, when the
   * failure is not tied to a pipeline stage, the error class). */
  display(): string {
    const label = this.stage ?? this.errorClass;
    return label && label !== "http-error"
      ? `${label}: ${this.message}`
      : this.message;
  }
}

/** Binary cloud payload: uint64 LE point count, then float32 LE xyz. */
export function decodeCloud(buf: ArrayBuffer): Float32Array {
  const view = new DataView(buf);
  const count = Number(view.getBigUint64(0, true));
  if (8 + count * 12 !== buf.byteLength) {
    throw new Error(
      `cloud payload length ${buf.byteLength} does not match ${count} points`,
    );
  }
  return new Float32Array(buf.slice(8));
}

async function raise(resp: Response): Promise<never> {
  let detail: { error?: string; message?: string; stage?: string } = {};
  try {
    const body = await resp.json();
    if (body && typeof body.detail === "object") detail = body.detail;
    else if (typeof body.detail === "string") detail = { message: body.detail };
  } catch {
    /* non-JSON error body */
  }
  throw new ApiError(
    resp.status,
    detail.error ?? "http-error",
    detail.message ?? `request failed with status ${resp.status}`,
    detail.stage,
  );
}

export class Client {
  constructor(public base: string) {
    this.base = base.replace(/\/$/, "");
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await fetch(this.base + path, {
      headers: init?.body ? { "content-type": "application/json" } : undefined,
      ...init,
    });
    if (!resp.ok) await raise(resp);
    return (await resp.json()) as T;
  }

  async listScenes(): Promise<SceneSummary[]> {
    const body = await this.json<{ scenes: SceneSummary[] }>("/scenes");
    return body.scenes;
  }

  sceneDetail(sceneId: string): Promise<SceneDetail> {
    return this.json(`/scenes/${encodeURIComponent(sceneId)}`);
  }

  async cloud(sceneId: string, decimation = 1): Promise<CloudPayload> {
    const resp = await fetch(
      `${this.base}/scenes/${encodeURIComponent(sceneId)}/cloud?decimation=${decimation}`,
    );
    if (!resp.ok) await raise(resp);
    return {
      points: decodeCloud(await resp.arrayBuffer()),
      version: resp.headers.get("x-cloud-version") ?? "",
    };
  }

  mesh(key: string, sceneId?: string): Promise<MeshPayload> {
    const scene = sceneId ? `?scene=${encodeURIComponent(sceneId)}` : "";
    return this.json(`/meshes/${encodeURIComponent(key)}${scene}`);
  }

  async meshKeys(sceneId?: string): Promise<string[]> {
    const scene = sceneId ? `?scene=${encodeURIComponent(sceneId)}` : "";
    const body = await this.json<{ meshes: string[] }>(`/meshes${scene}`);
    return body.meshes;
  }

  tableClick(sceneId: string, point: Vec3): Promise<TableClickResponse> {
    return this.json(`/scenes/${encodeURIComponent(sceneId)}/table-click`, {
      method: "POST",
      body: JSON.stringify({ point }),
    });
  }

  undoTableClick(
    sceneId: string,
  ): Promise<{ version: string; points_remaining: number }> {
    return this.json(`/scenes/${encodeURIComponent(sceneId)}/table-click`, {
      method: "DELETE",
    });
  }

  align(
    sceneId: string,
    meshKey: string,
    modelPoints: Vec3[],
    scenePoints: Vec3[],
    icp?: IcpOverrides,
  ): Promise<AlignResponse> {
    return this.json(`/scenes/${encodeURIComponent(sceneId)}/align`, {
      method: "POST",
      body: JSON.stringify({
        mesh_key: meshKey,
        model_points: modelPoints,
        scene_points: scenePoints,
        ...(icp ? { icp } : {}),
      }),
    });
  }

  putAnnotation(
    sceneId: string,
    objectId: number,
    meshKey: string,
    pose: PosePayload,
  ): Promise<{ annotations: number }> {
    return this.json(`/scenes/${encodeURIComponent(sceneId)}/annotations`, {
      method: "POST",
      body: JSON.stringify({ object_id: objectId, mesh_key: meshKey, pose }),
    });
  }

  deleteAnnotation(
    sceneId: string,
    objectId: number,
  ): Promise<{ annotations: number }> {
    return this.json(
      `/scenes/${encodeURIComponent(sceneId)}/annotations/${objectId}`,
      { method: "DELETE" },
    );
  }

  startRender(sceneId: string): Promise<{ state: string }> {
    return this.json(`/scenes/${encodeURIComponent(sceneId)}/render`, {
      method: "POST",
    });
  }

  renderStatus(sceneId: string): Promise<RenderStatus> {
    return this.json(`/scenes/${encodeURIComponent(sceneId)}/render/status`);
  }
}
