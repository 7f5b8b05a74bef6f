/** A three.js viewport: orbit/pan/zoom camera over either a point cloud
 * or a mesh, numbered click markers, and alignment overlays. Degrades to
 * a camera-and-picking-only mode when WebGL is unavailable (headless
 * test runs): everything except the actual rasterization works the same.
 */

import * as THREE from "three";

import type { Vec3 } from "./api.js";
import type { Ray } from "./picking.js";
import { CLICK_COLORS } from "./state.js";

export class Viewport {
  scene = new THREE.Scene();
  camera: THREE.PerspectiveCamera;
  renderer: THREE.WebGLRenderer | null = null;

  private content = new THREE.Group();
  private markers = new THREE.Group();
  private overlays = new THREE.Group();
  private target = new THREE.Vector3();
  private radius = 2;
  private theta = 0.5;
  private phi = 1.1;
  private markerScale = 0.012;

  constructor(public canvas: HTMLCanvasElement) {
    this.camera = new THREE.PerspectiveCamera(50, this.aspect(), 0.01, 100);
    this.scene.add(this.content, this.markers, this.overlays);
    this.scene.add(new THREE.AmbientLight(0xffffff, 0.7));
    const sun = new THREE.DirectionalLight(0xffffff, 1.2);
    sun.position.set(1, 2, 3);
    this.scene.add(sun);
    try {
      this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
      this.renderer.setClearColor(0x16181d);
    } catch {
      this.renderer = null; // no WebGL (headless); picking still works
    }
    this.attachControls();
    this.updateCamera();
  }

  private rect(): { left: number; top: number; width: number; height: number } {
    const r = this.canvas.getBoundingClientRect();
    // headless DOMs report zero-size rects; fall back to canvas attributes
    return {
      left: r.left,
      top: r.top,
      width: r.width || this.canvas.width,
      height: r.height || this.canvas.height,
    };
  }

  private aspect(): number {
    const r = this.rect();
    return r.height > 0 ? r.width / r.height : 4 / 3;
  }

  private attachControls() {
    let dragging = false;
    let panning = false;
    let lastX = 0;
    let lastY = 0;
    this.canvas.addEventListener("mousedown", (e) => {
      dragging = true;
      panning = e.shiftKey || e.button === 2;
      lastX = e.clientX;
      lastY = e.clientY;
    });
    window.addEventListener("mouseup", () => {
      dragging = false;
    });
    window.addEventListener("mousemove", (e) => {
      if (!dragging) return;
      const dx = e.clientX - lastX;
      const dy = e.clientY - lastY;
      lastX = e.clientX;
      lastY = e.clientY;
      if (panning) {
        const right = new THREE.Vector3();
        const up = new THREE.Vector3();
        this.camera.matrixWorld.extractBasis(right, up, new THREE.Vector3());
        const scale = this.radius * 0.0015;
        this.target.addScaledVector(right, -dx * scale);
        this.target.addScaledVector(up, dy * scale);
      } else {
        this.theta -= dx * 0.008;
        this.phi = Math.min(3.1, Math.max(0.05, this.phi - dy * 0.008));
      }
      this.updateCamera();
    });
    this.canvas.addEventListener("wheel", (e) => {
      e.preventDefault();
      this.radius *= Math.exp(e.deltaY * 0.001);
      this.radius = Math.min(50, Math.max(0.05, this.radius));
      this.updateCamera();
    });
    this.canvas.addEventListener("contextmenu", (e) => e.preventDefault());
  }

  private updateCamera() {
    const sp = Math.sin(this.phi);
    this.camera.position.set(
      this.target.x + this.radius * sp * Math.cos(this.theta),
      this.target.y + this.radius * sp * Math.sin(this.theta),
      this.target.z + this.radius * Math.cos(this.phi),
    );
    this.camera.up.set(0, 0, 1);
    this.camera.lookAt(this.target);
    this.camera.updateMatrixWorld(true);
    this.render();
  }

  /** Frame the camera around the given flat-xyz points. */
  fitTo(points: Float32Array | number[]) {
    const box = new THREE.Box3();
    const v = new THREE.Vector3();
    for (let i = 0; i + 2 < points.length; i += 3) {
      box.expandByPoint(v.set(points[i], points[i + 1], points[i + 2]));
    }
    if (box.isEmpty()) return;
    box.getCenter(this.target);
    const size = box.getSize(new THREE.Vector3()).length();
    this.radius = Math.max(0.25, size * 0.9);
    this.markerScale = Math.max(0.003, size * 0.008);
    this.updateCamera();
  }

  /** Replace the displayed content with a point cloud. */
  showCloud(points: Float32Array) {
    this.clearContent();
    const geo = new THREE.BufferGeometry();
    geo.setAttribute("position", new THREE.BufferAttribute(points, 3));
    const mat = new THREE.PointsMaterial({ color: 0xb8c4d0, size: 0.004 });
    this.content.add(new THREE.Points(geo, mat));
    this.render();
  }

  /** Replace the displayed content with a mesh. */
  showMesh(vertices: number[][], faces: number[][], color = 0x7f9fc4) {
    this.clearContent();
    this.content.add(buildMesh(vertices, faces, color, false));
    this.render();
  }

  clearContent() {
    dispose(this.content);
    this.clearOverlays();
  }

  /** Numbered spheres at the picked points, colored by correspondence
   * index so pair i reads the same in both viewports. */
  setMarkers(points: Vec3[]) {
    dispose(this.markers);
    points.forEach((p, i) => {
      const mat = new THREE.MeshBasicMaterial({
        color: new THREE.Color(CLICK_COLORS[i % CLICK_COLORS.length]),
      });
      const ball = new THREE.Mesh(
        new THREE.SphereGeometry(this.markerScale, 12, 8),
        mat,
      );
      ball.position.set(p[0], p[1], p[2]);
      this.markers.add(ball);
    });
    this.render();
  }

  /** Wireframe mesh copies under the rough (amber) and refined (green)
   * poses, drawn over the scene cloud. */
  setAlignmentOverlays(
    vertices: number[][],
    faces: number[][],
    rough: { q: number[]; t: number[] } | null,
    refined: { q: number[]; t: number[] } | null,
  ) {
    this.clearOverlays();
    if (rough) this.overlays.add(posedWireframe(vertices, faces, rough, 0xd9a441));
    if (refined) this.overlays.add(posedWireframe(vertices, faces, refined, 0x55cf7d));
    this.render();
  }

  clearOverlays() {
    dispose(this.overlays);
    this.render();
  }

  /** World-space ray through a client-coordinates click. */
  pickRay(clientX: number, clientY: number): Ray {
    const r = this.rect();
    const ndc = new THREE.Vector2(
      ((clientX - r.left) / r.width) * 2 - 1,
      -(((clientY - r.top) / r.height) * 2 - 1),
    );
    const caster = new THREE.Raycaster();
    caster.setFromCamera(ndc, this.camera);
    const o = caster.ray.origin;
    const d = caster.ray.direction;
    return { origin: [o.x, o.y, o.z], dir: [d.x, d.y, d.z] };
  }

  /** Client coordinates of a world point under the current camera; used
   * by scripted sessions to aim clicks. */
  projectToScreen(p: Vec3): { x: number; y: number } {
    const v = new THREE.Vector3(p[0], p[1], p[2]).project(this.camera);
    const r = this.rect();
    return {
      x: r.left + ((v.x + 1) / 2) * r.width,
      y: r.top + ((1 - v.y) / 2) * r.height,
    };
  }

  render() {
    if (this.renderer) this.renderer.render(this.scene, this.camera);
  }
}

function buildMesh(
  vertices: number[][],
  faces: number[][],
  color: number,
  wireframe: boolean,
): THREE.Mesh {
  const geo = new THREE.BufferGeometry();
  const pos = new Float32Array(vertices.length * 3);
  vertices.forEach((v, i) => pos.set(v, 3 * i));
  const idx = new Uint32Array(faces.length * 3);
  faces.forEach((f, i) => idx.set(f, 3 * i));
  geo.setAttribute("position", new THREE.BufferAttribute(pos, 3));
  geo.setIndex(new THREE.BufferAttribute(idx, 1));
  geo.computeVertexNormals();
  const mat = wireframe
    ? new THREE.MeshBasicMaterial({ color, wireframe: true })
    : new THREE.MeshStandardMaterial({ color, flatShading: true });
  return new THREE.Mesh(geo, mat);
}

function posedWireframe(
  vertices: number[][],
  faces: number[][],
  pose: { q: number[]; t: number[] },
  color: number,
): THREE.Mesh {
  const mesh = buildMesh(vertices, faces, color, true);
  // service quaternions are [w, x, y, z]; three.js wants (x, y, z, w)
  mesh.quaternion.set(pose.q[1], pose.q[2], pose.q[3], pose.q[0]);
  mesh.position.set(pose.t[0], pose.t[1], pose.t[2]);
  return mesh;
}

function dispose(group: THREE.Group) {
  for (const child of [...group.children]) {
    group.remove(child);
    const obj = child as THREE.Mesh;
    if (obj.geometry) obj.geometry.dispose();
    const m = obj.material as THREE.Material | THREE.Material[] | undefined;
    if (Array.isArray(m)) m.forEach((x) => x.dispose());
    else if (m) m.dispose();
  }
}
