/** three.js point cloud viewer with orbit navigation and point picking. */

import * as THREE from "three";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";
import { RendererLike } from "./controller";

export class CloudViewer implements RendererLike {
  scene = new THREE.Scene();
  camera: THREE.PerspectiveCamera;
  renderer: THREE.WebGLRenderer;
  controls: OrbitControls;
  raycaster = new THREE.Raycaster();
  points: THREE.Points | null = null;
  markers = new THREE.Group();
  private geometry: THREE.BufferGeometry | null = null;
  private positions: Float32Array = new Float32Array(0);

  constructor(private canvas: HTMLCanvasElement) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: false });
    this.renderer.setPixelRatio(window.devicePixelRatio);
    this.camera = new THREE.PerspectiveCamera(55, 1, 0.01, 100);
    this.camera.position.set(3, -3, 2.5);
    this.camera.up.set(0, 0, 1);
    this.controls = new OrbitControls(this.camera, canvas);
    this.controls.enableDamping = true;
    this.scene.background = new THREE.Color(0x181a1f);
    this.scene.add(this.markers);
    this.raycaster.params.Points = { threshold: 0.025 };
    const animate = () => {
      requestAnimationFrame(animate);
      this.controls.update();
      this.resizeIfNeeded();
      this.renderer.render(this.scene, this.camera);
    };
    animate();
  }

  private resizeIfNeeded() {
    const w = this.canvas.clientWidth;
    const h = this.canvas.clientHeight;
    if (this.canvas.width !== w || this.canvas.height !== h) {
      this.renderer.setSize(w, h, false);
      this.camera.aspect = w / Math.max(h, 1);
      this.camera.updateProjectionMatrix();
    }
  }

  setCloud(positions: Float32Array, colors: Float32Array): void {
    if (this.points) {
      this.scene.remove(this.points);
      this.geometry?.dispose();
    }
    this.positions = positions;
    this.geometry = new THREE.BufferGeometry();
    this.geometry.setAttribute("position", new THREE.BufferAttribute(positions, 3));
    this.geometry.setAttribute("color", new THREE.BufferAttribute(colors.slice(), 3));
    this.geometry.computeBoundingSphere();
    const material = new THREE.PointsMaterial({ size: 0.022, vertexColors: true });
    this.points = new THREE.Points(this.geometry, material);
    this.scene.add(this.points);
    const center = this.geometry.boundingSphere!.center;
    this.controls.target.copy(center);
    this.camera.position.set(center.x + 2.8, center.y - 2.8, center.z + 2.2);
  }

  setColors(colors: Float32Array): void {
    if (!this.geometry) return;
    const attr = this.geometry.getAttribute("color") as THREE.BufferAttribute;
    (attr.array as Float32Array).set(colors);
    attr.needsUpdate = true;
  }

  /** Nearest rendered point under the cursor, or null outside the radius. */
  pick(clientX: number, clientY: number): number | null {
    if (!this.points) return null;
    const rect = this.canvas.getBoundingClientRect();
    const ndc = new THREE.Vector2(
      ((clientX - rect.left) / rect.width) * 2 - 1,
      -((clientY - rect.top) / rect.height) * 2 + 1,
    );
    this.raycaster.setFromCamera(ndc, this.camera);
    const hits = this.raycaster.intersectObject(this.points);
    if (hits.length === 0 || hits[0].index === undefined) return null;
    return hits[0].index;
  }

  highlight(indices: number[]): void {
    this.markers.clear();
    for (const idx of indices) {
      const sphere = new THREE.Mesh(
        new THREE.SphereGeometry(0.03, 10, 10),
        new THREE.MeshBasicMaterial({ color: 0xffee33, wireframe: true }),
      );
      sphere.position.set(this.positions[3 * idx], this.positions[3 * idx + 1],
                          this.positions[3 * idx + 2]);
      this.markers.add(sphere);
    }
  }
}
