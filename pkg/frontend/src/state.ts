/** UI session state: which scene and mesh are active, the two ordered
 * click buffers, the last alignment, and a mirror of the saved
 * annotations. All persisted geometry comes from the service; this layer
 * only bookkeeps what the user has picked. */

import type { AlignResponse, AnnotationRecord, Vec3 } from "./api.js";

export const MAX_CLICKS = 3;

/** Shared correspondence colors: click i on the mesh pairs with click i
 * on the scene and both render in CLICK_COLORS[i]. */
export const CLICK_COLORS = ["#e4574b", "#4bb05d", "#4b7fe4"];

export class UiState {
  sceneId: string | null = null;
  meshKey: string | null = null;
  cloudVersion = "";
  modelClicks: Vec3[] = [];
  sceneClicks: Vec3[] = [];
  lastAlignment: AlignResponse | null = null;
  annotations: AnnotationRecord[] = [];
  tableClicks: number[][] = [];

  /** Alignment may only be requested with exactly 3+3 clicks. */
  get alignEnabled(): boolean {
    return (
      this.meshKey !== null &&
      this.modelClicks.length === MAX_CLICKS &&
      this.sceneClicks.length === MAX_CLICKS
    );
  }

  addModelClick(p: Vec3): boolean {
    if (this.modelClicks.length >= MAX_CLICKS) return false;
    this.modelClicks.push(p);
    return true;
  }

  addSceneClick(p: Vec3): boolean {
    if (this.sceneClicks.length >= MAX_CLICKS) return false;
    this.sceneClicks.push(p);
    return true;
  }

  /** Retry: drop the clicks and any previewed alignment. */
  clearClicks(): void {
    this.modelClicks = [];
    this.sceneClicks = [];
    this.lastAlignment = null;
  }

  /** After an accepted annotation the buffers always start fresh. */
  annotationSaved(record: AnnotationRecord): void {
    this.annotations = this.annotations
      .filter((a) => a.object_id !== record.object_id)
      .concat([record])
      .sort((a, b) => a.object_id - b.object_id);
    this.clearClicks();
  }

  annotationDeleted(objectId: number): void {
    this.annotations = this.annotations.filter(
      (a) => a.object_id !== objectId,
    );
  }

  /** Smallest positive id not yet annotated (suggested for the next
   * accept; the user can override it). */
  nextObjectId(): number {
    const used = new Set(this.annotations.map((a) => a.object_id));
    let id = 1;
    while (used.has(id)) id++;
    return id;
  }

  openScene(sceneId: string): void {
    this.sceneId = sceneId;
    this.meshKey = null;
    this.cloudVersion = "";
    this.annotations = [];
    this.tableClicks = [];
    this.clearClicks();
  }

  selectMesh(key: string): void {
    this.meshKey = key;
    this.modelClicks = [];
    this.lastAlignment = null;
  }
}
