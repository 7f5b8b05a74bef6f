/** Application shell: wires the two viewports, the click buffers, and the
 * HTTP client together.
 *
 * Invariant: every piece of geometry that ends up persisted (plane fits,
 * alignments, rendered labels) is computed by the service. This layer
 * only routes clicks, displays results, and snaps scene picks onto
 * existing cloud points; it never invents coordinates of its own.
 */

import { ApiError, Client } from "./api.js";
import type { MeshPayload, Vec3 } from "./api.js";
import { nearestCloudPoint, pickMeshPoint } from "./picking.js";
import { CLICK_COLORS, MAX_CLICKS, UiState } from "./state.js";
import { Viewport } from "./viewport.js";

/** Clouds larger than this are re-requested decimated. */
const CLOUD_POINT_BUDGET = 500_000;

const DRAG_THRESHOLD_PX = 5;
const RENDER_POLL_MS = 250;

const TEMPLATE = `
<div class="toolbar">
  <label>scene <select id="scene-select"><option value="">pick a scene</option></select></label>
  <label>mesh <select id="mesh-select"><option value="">pick a mesh</option></select></label>
  <label>object id <input id="object-id" type="number" min="1" step="1" value="1"></label>
  <button id="table-mode" title="clicks mark the table surface until toggled off">table click: off</button>
  <button id="table-undo">undo table click</button>
</div>
<div class="viewports">
  <div class="pane">
    <h2>model</h2>
    <canvas id="model-canvas" width="640" height="480"></canvas>
    <div class="chips" id="model-chips"></div>
  </div>
  <div class="pane">
    <h2>scene</h2>
    <canvas id="scene-canvas" width="640" height="480"></canvas>
    <div class="chips" id="scene-chips"></div>
  </div>
</div>
<div class="actions">
  <button id="align" disabled>align</button>
  <button id="accept" disabled>accept</button>
  <button id="retry">retry</button>
  <button id="render">render labels</button>
</div>
<div id="status" class="status">pick a scene to begin</div>
<div id="errors"></div>
<div class="annotations">
  <h2>annotations</h2>
  <ul id="annotation-list"></ul>
</div>
`;

export class App {
  state = new UiState();
  modelView: Viewport;
  sceneView: Viewport;
  tableMode = false;

  /** Promise for the most recent asynchronous user action; scripted
   * sessions await it after dispatching an event. */
  lastAction: Promise<void> = Promise.resolve();
  /** Set when a render job is started; resolves on completion. */
  renderFinished: Promise<void> | null = null;

  private modelMesh: MeshPayload | null = null;
  private cloud: Float32Array = new Float32Array(0);
  private alignInFlight = false;
  private renderActive = false;
  private downAt = new Map<EventTarget, { x: number; y: number }>();

  private sceneSelect: HTMLSelectElement;
  private meshSelect: HTMLSelectElement;
  private objectIdInput: HTMLInputElement;
  private tableModeBtn: HTMLButtonElement;
  private tableUndoBtn: HTMLButtonElement;
  private alignBtn: HTMLButtonElement;
  private acceptBtn: HTMLButtonElement;
  private retryBtn: HTMLButtonElement;
  private renderBtn: HTMLButtonElement;
  private statusDiv: HTMLElement;
  private errorsDiv: HTMLElement;
  private annotationList: HTMLElement;
  private modelChips: HTMLElement;
  private sceneChips: HTMLElement;

  constructor(
    public root: HTMLElement,
    public client: Client,
  ) {
    root.innerHTML = TEMPLATE;
    const grab = <T extends HTMLElement>(id: string): T => {
      const el = root.querySelector<T>(`#${id}`);
      if (!el) throw new Error(`missing element #${id}`);
      return el;
    };
    this.sceneSelect = grab("scene-select");
    this.meshSelect = grab("mesh-select");
    this.objectIdInput = grab("object-id");
    this.tableModeBtn = grab("table-mode");
    this.tableUndoBtn = grab("table-undo");
    this.alignBtn = grab("align");
    this.acceptBtn = grab("accept");
    this.retryBtn = grab("retry");
    this.renderBtn = grab("render");
    this.statusDiv = grab("status");
    this.errorsDiv = grab("errors");
    this.annotationList = grab("annotation-list");
    this.modelChips = grab("model-chips");
    this.sceneChips = grab("scene-chips");

    this.modelView = new Viewport(grab<HTMLCanvasElement>("model-canvas"));
    this.sceneView = new Viewport(grab<HTMLCanvasElement>("scene-canvas"));

    this.wire();
    this.updateControls();
  }

  get cloudPoints(): Float32Array {
    return this.cloud;
  }

  private wire() {
    this.sceneSelect.addEventListener("change", () => {
      if (this.sceneSelect.value) this.track(this.openScene(this.sceneSelect.value));
    });
    this.meshSelect.addEventListener("change", () => {
      if (this.meshSelect.value) this.track(this.selectMesh(this.meshSelect.value));
    });
    this.tableModeBtn.addEventListener("click", () => {
      this.tableMode = !this.tableMode;
      this.tableModeBtn.textContent = `table click: ${this.tableMode ? "on" : "off"}`;
    });
    this.tableUndoBtn.addEventListener("click", () => this.track(this.undoTableClick()));
    this.alignBtn.addEventListener("click", () => this.track(this.runAlign()));
    this.acceptBtn.addEventListener("click", () => this.track(this.acceptAlignment()));
    this.retryBtn.addEventListener("click", () => this.retry());
    this.renderBtn.addEventListener("click", () => this.track(this.startRender()));

    for (const view of [this.modelView, this.sceneView]) {
      view.canvas.addEventListener("mousedown", (e) =>
        this.downAt.set(view.canvas, { x: e.clientX, y: e.clientY }),
      );
    }
    this.modelView.canvas.addEventListener("click", (e) => {
      if (this.wasDrag(this.modelView.canvas, e)) return;
      this.onModelClick(e);
    });
    this.sceneView.canvas.addEventListener("click", (e) => {
      if (this.wasDrag(this.sceneView.canvas, e)) return;
      this.track(this.onSceneClick(e));
    });
  }

  /** Route an async action's failure into a banner and expose its
   * completion on lastAction. */
  private track(p: Promise<void>) {
    this.lastAction = p.catch((err) => this.showError(err));
  }

  /** A click that follows a real drag is camera movement, not a pick.
   * Synthetic clicks (no preceding mousedown) always count as picks. */
  private wasDrag(canvas: HTMLCanvasElement, e: MouseEvent): boolean {
    const down = this.downAt.get(canvas);
    this.downAt.delete(canvas);
    if (!down) return false;
    return (
      Math.abs(e.clientX - down.x) > DRAG_THRESHOLD_PX ||
      Math.abs(e.clientY - down.y) > DRAG_THRESHOLD_PX
    );
  }

  async start(): Promise<void> {
    const scenes = await this.client.listScenes();
    for (const s of scenes) {
      const opt = document.createElement("option");
      opt.value = s.scene_id;
      opt.textContent = `${s.scene_id} (${s.status})`;
      this.sceneSelect.appendChild(opt);
    }
    this.setStatus(`${scenes.length} scene(s) available`);
  }

  async openScene(sceneId: string): Promise<void> {
    this.state.openScene(sceneId);
    this.modelMesh = null;
    this.modelView.clearContent();
    const detail = await this.client.sceneDetail(sceneId);
    this.state.annotations = detail.annotations;
    this.state.tableClicks = detail.table_clicks;
    this.state.cloudVersion = detail.cloud_version;

    this.meshSelect.innerHTML = `<option value="">pick a mesh</option>`;
    for (const key of detail.meshes) {
      const opt = document.createElement("option");
      opt.value = key;
      opt.textContent = key;
      this.meshSelect.appendChild(opt);
    }

    await this.refreshCloud();
    this.renderChips();
    this.renderAnnotationList();
    this.objectIdInput.value = String(this.state.nextObjectId());
    this.updateControls();
    this.setStatus(
      `scene "${sceneId}": ${this.cloud.length / 3} points, ` +
        `${detail.trajectory_frames.length} frames, ` +
        `${detail.annotations.length} annotation(s)`,
    );
  }

  async selectMesh(key: string): Promise<void> {
    this.state.selectMesh(key);
    this.modelMesh = await this.client.mesh(key, this.state.sceneId ?? undefined);
    this.modelView.showMesh(this.modelMesh.vertices, this.modelMesh.faces);
    this.modelView.fitTo(this.modelMesh.vertices.flat());
    this.modelView.setMarkers([]);
    this.sceneView.clearOverlays();
    this.renderChips();
    this.updateControls();
    this.setStatus(`mesh "${key}": ${this.modelMesh.vertices.length} vertices`);
  }

  /** Fetch the scene cloud, decimating server-side when the full count
   * exceeds the display budget. */
  private async refreshCloud(): Promise<void> {
    const sceneId = this.state.sceneId;
    if (!sceneId) return;
    let payload = await this.client.cloud(sceneId, 1);
    const n = payload.points.length / 3;
    if (n > CLOUD_POINT_BUDGET) {
      const decimation = Math.ceil(n / CLOUD_POINT_BUDGET);
      payload = await this.client.cloud(sceneId, decimation);
    }
    this.cloud = payload.points;
    this.state.cloudVersion = payload.version;
    this.sceneView.showCloud(this.cloud);
    this.sceneView.fitTo(this.cloud);
    this.sceneView.setMarkers(this.state.sceneClicks);
  }

  private onModelClick(e: MouseEvent) {
    if (!this.modelMesh) {
      this.setStatus("pick a mesh before clicking the model view");
      return;
    }
    const ray = this.modelView.pickRay(e.clientX, e.clientY);
    const hit = pickMeshPoint(ray, this.modelMesh.vertices, this.modelMesh.faces);
    if (!hit) {
      this.setStatus("click missed the mesh");
      return;
    }
    if (!this.state.addModelClick(hit)) {
      this.setStatus(`model buffer already holds ${MAX_CLICKS} clicks (retry clears)`);
      return;
    }
    this.modelView.setMarkers(this.state.modelClicks);
    this.renderChips();
    this.updateControls();
    this.setStatus(`model click ${this.state.modelClicks.length}/${MAX_CLICKS}`);
  }

  private async onSceneClick(e: MouseEvent): Promise<void> {
    if (!this.state.sceneId) return;
    const ray = this.sceneView.pickRay(e.clientX, e.clientY);
    const idx = nearestCloudPoint(ray, this.cloud);
    if (idx < 0) {
      this.setStatus("no cloud point near that click");
      return;
    }
    const p: Vec3 = [
      this.cloud[3 * idx],
      this.cloud[3 * idx + 1],
      this.cloud[3 * idx + 2],
    ];
    if (this.tableMode) {
      const resp = await this.client.tableClick(this.state.sceneId, p);
      this.state.tableClicks.push([p[0], p[1], p[2]]);
      this.setStatus(
        `table plane refit: ${resp.inliers} inliers, ` +
          `${resp.points_remaining} points remain`,
      );
      await this.refreshCloud();
      this.updateControls();
      return;
    }
    if (!this.state.addSceneClick(p)) {
      this.setStatus(`scene buffer already holds ${MAX_CLICKS} clicks (retry clears)`);
      return;
    }
    this.sceneView.setMarkers(this.state.sceneClicks);
    this.renderChips();
    this.updateControls();
    this.setStatus(`scene click ${this.state.sceneClicks.length}/${MAX_CLICKS}`);
  }

  private async undoTableClick(): Promise<void> {
    if (!this.state.sceneId) return;
    const resp = await this.client.undoTableClick(this.state.sceneId);
    this.state.tableClicks.pop();
    this.setStatus(`table click undone, ${resp.points_remaining} points remain`);
    await this.refreshCloud();
    this.updateControls();
  }

  private async runAlign(): Promise<void> {
    if (!this.state.alignEnabled || this.alignInFlight) return;
    const sceneId = this.state.sceneId;
    const meshKey = this.state.meshKey;
    if (!sceneId || !meshKey || !this.modelMesh) return;
    this.alignInFlight = true;
    this.updateControls();
    this.setStatus("aligning...");
    try {
      const resp = await this.client.align(
        sceneId,
        meshKey,
        this.state.modelClicks,
        this.state.sceneClicks,
      );
      this.state.lastAlignment = resp;
      this.sceneView.setAlignmentOverlays(
        this.modelMesh.vertices,
        this.modelMesh.faces,
        resp.rough_pose,
        resp.refined_pose,
      );
      this.setStatus(
        `aligned in ${resp.iterations} iterations: ` +
          `fitness ${resp.fitness.toFixed(3)}, ` +
          `rmse ${(resp.rmse * 1000).toFixed(2)} mm` +
          (resp.converged ? "" : " (not converged)"),
      );
    } finally {
      this.alignInFlight = false;
      this.updateControls();
    }
  }

  private async acceptAlignment(): Promise<void> {
    const aligned = this.state.lastAlignment;
    const sceneId = this.state.sceneId;
    const meshKey = this.state.meshKey;
    if (!aligned || !sceneId || !meshKey) return;
    const objectId = Number(this.objectIdInput.value);
    if (!Number.isInteger(objectId) || objectId < 1) {
      this.setStatus("object id must be a positive integer");
      return;
    }
    const pose = aligned.refined_pose;
    await this.client.putAnnotation(sceneId, objectId, meshKey, pose);
    this.state.annotationSaved({
      object_id: objectId,
      mesh: meshKey,
      q: pose.q,
      t: pose.t,
    });
    this.modelView.setMarkers([]);
    this.sceneView.setMarkers([]);
    this.sceneView.clearOverlays();
    this.renderChips();
    this.renderAnnotationList();
    this.objectIdInput.value = String(this.state.nextObjectId());
    this.updateControls();
    this.setStatus(`annotation ${objectId} saved`);
  }

  private retry() {
    this.state.clearClicks();
    this.modelView.setMarkers([]);
    this.sceneView.setMarkers([]);
    this.sceneView.clearOverlays();
    this.renderChips();
    this.updateControls();
    this.setStatus("clicks cleared");
  }

  private async startRender(): Promise<void> {
    const sceneId = this.state.sceneId;
    if (!sceneId || this.renderActive) return;
    await this.client.startRender(sceneId);
    this.renderActive = true;
    this.updateControls();
    this.setStatus("render queued");
    this.renderFinished = this.pollRender(sceneId);
    this.renderFinished.catch((err) => this.showError(err));
  }

  private async pollRender(sceneId: string): Promise<void> {
    try {
      for (;;) {
        const s = await this.client.renderStatus(sceneId);
        if (s.state === "done") {
          this.setStatus(`render complete: ${s.frames_done} frames labeled`);
          return;
        }
        if (s.state === "failed") {
          throw new Error(`render failed: ${s.error ?? "unknown error"}`);
        }
        if (s.state === "none") {
          this.setStatus("no render job active");
          return;
        }
        this.setStatus(`rendering... ${s.frames_done} frames done`);
        await new Promise((r) => setTimeout(r, RENDER_POLL_MS));
      }
    } finally {
      this.renderActive = false;
      this.updateControls();
    }
  }

  // --- presentation ---

  private updateControls() {
    this.alignBtn.disabled = !this.state.alignEnabled || this.alignInFlight;
    this.acceptBtn.disabled = this.state.lastAlignment === null;
    this.renderBtn.disabled = this.renderActive || this.state.sceneId === null;
    this.tableUndoBtn.disabled = this.state.tableClicks.length === 0;
  }

  private renderChips() {
    const chip = (p: Vec3, i: number) =>
      `<span class="chip" style="background:${CLICK_COLORS[i % CLICK_COLORS.length]}">` +
      `${i + 1} · ${p.map((v) => v.toFixed(3)).join(", ")}</span>`;
    this.modelChips.innerHTML = this.state.modelClicks.map(chip).join("");
    this.sceneChips.innerHTML = this.state.sceneClicks.map(chip).join("");
  }

  private renderAnnotationList() {
    this.annotationList.innerHTML = "";
    for (const a of this.state.annotations) {
      const li = document.createElement("li");
      li.textContent = `#${a.object_id} ${a.mesh} `;
      const del = document.createElement("button");
      del.textContent = "delete";
      del.addEventListener("click", () =>
        this.track(this.deleteAnnotation(a.object_id)),
      );
      li.appendChild(del);
      this.annotationList.appendChild(li);
    }
  }

  private async deleteAnnotation(objectId: number): Promise<void> {
    if (!this.state.sceneId) return;
    await this.client.deleteAnnotation(this.state.sceneId, objectId);
    this.state.annotationDeleted(objectId);
    this.renderAnnotationList();
    this.objectIdInput.value = String(this.state.nextObjectId());
    this.setStatus(`annotation ${objectId} deleted`);
  }

  private setStatus(msg: string) {
    this.statusDiv.textContent = msg;
  }

  /** Dismissible error banner; names the failed stage when known. */
  private showError(err: unknown) {
    const text =
      err instanceof ApiError
        ? err.display()
        : err instanceof Error
          ? err.message
          : String(err);
    const banner = document.createElement("div");
    banner.className = "banner";
    const span = document.createElement("span");
    span.textContent = text;
    const dismiss = document.createElement("button");
    dismiss.textContent = "dismiss";
    dismiss.addEventListener("click", () => banner.remove());
    banner.append(span, dismiss);
    this.errorsDiv.appendChild(banner);
  }
}
