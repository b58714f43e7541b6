/** Session controller: owns the client-side copy of the segmentation state
 * and drives the click -> submit -> diff loop. Rendering is injected so the
 * same logic runs in the browser and in headless tests. */

import { ApiClient, ClickDiff, FullState } from "./api";
import {
  ColorMode, ViewState, addPendingClick, applyDiff, clearPending, colorize,
  initialViewState, removePendingClick,
} from "./state";

export interface RendererLike {
  setCloud(positions: Float32Array, colors: Float32Array): void;
  setColors(colors: Float32Array): void;
  highlight(indices: number[]): void;
}

export interface MetricsSnapshot {
  miou: number | null;
  clickCount: number;
  rounds: number;
  pending: number;
  history: (number | null)[];
}

export class SessionController {
  api: ApiClient;
  renderer: RendererLike;
  palette: number[][] = [];
  classNames: string[] = [];

  sessionId = "";
  view: ViewState = initialViewState(0, 0);
  labels: Int32Array = new Int32Array(0);
  entropies: Float32Array = new Float32Array(0);
  rgb: Float32Array = new Float32Array(0);
  positions: Float32Array = new Float32Array(0);
  gtLabels: Int32Array | null = null;
  miou: number | null = null;
  miouHistory: (number | null)[] = [];
  clickCount = 0;
  rounds = 0;
  busy = false;

  constructor(api: ApiClient, renderer: RendererLike) {
    this.api = api;
    this.renderer = renderer;
  }

  async open(sceneName: string): Promise<void> {
    const info = await this.api.classes();
    this.palette = info.palette;
    this.classNames = info.names;
    const summary = await this.api.createSession({ scene: sceneName });
    this.sessionId = summary.id;
    await this.refetch();
    this.renderer.setCloud(this.positions, this.renderColors());
  }

  async refetch(): Promise<FullState> {
    const full = await this.api.getState(this.sessionId);
    this.view = { ...initialViewState(full.num_points, full.num_classes),
                  mode: this.view.mode, selectedClass: this.view.selectedClass };
    this.labels = full.labels;
    this.entropies = full.entropies;
    this.rgb = full.colors;
    this.positions = full.positions;
    this.gtLabels = full.gtLabels;
    this.miou = full.miou;
    this.miouHistory = full.miou_history;
    this.clickCount = full.click_count;
    this.rounds = full.rounds;
    return full;
  }

  renderColors(): Float32Array {
    return colorize({
      mode: this.view.mode,
      labels: this.labels,
      entropies: this.entropies,
      rgb: this.rgb,
      gtLabels: this.gtLabels,
      palette: this.palette,
      numClasses: this.view.numClasses,
    });
  }

  setMode(mode: ColorMode): void {
    this.view = { ...this.view, mode };
    this.renderer.setColors(this.renderColors());
  }

  selectClass(cls: number): void {
    if (cls >= 0 && cls < this.view.numClasses) {
      this.view = { ...this.view, selectedClass: cls };
    }
  }

  /** A pick from the viewer: queue the correction under the selected class. */
  queueClick(pointIndex: number, label = this.view.selectedClass): void {
    this.view = addPendingClick(this.view, pointIndex, label);
    this.renderer.highlight(this.view.pending.map((p) => p.pointIndex));
  }

  unqueueClick(pointIndex: number): void {
    this.view = removePendingClick(this.view, pointIndex);
    this.renderer.highlight(this.view.pending.map((p) => p.pointIndex));
  }

  /** Submit pending clicks; apply the returned diff without a refetch. */
  async submitRound(): Promise<ClickDiff> {
    if (this.view.pending.length === 0) {
      throw new Error("no pending clicks to submit");
    }
    if (this.busy) {
      throw new Error("a submit is already in flight");
    }
    this.busy = true;
    try {
      const clicks = this.view.pending.map((p) => ({
        point_index: p.pointIndex,
        corrected_label: p.label,
      }));
      const diff = await this.api.postClicks(this.sessionId, clicks);
      this.labels = applyDiff(this.labels, diff.changed_indices, diff.new_labels);
      this.miou = diff.miou;
      this.miouHistory = [...this.miouHistory, diff.miou];
      this.clickCount = diff.click_count;
      this.rounds = diff.rounds;
      this.view = clearPending(this.view);
      this.renderer.highlight([]);
      this.renderer.setColors(this.renderColors());
      return diff;
    } finally {
      this.busy = false;
    }
  }

  /** Entropies change every round but only arrive with a full state fetch. */
  async syncEntropies(): Promise<void> {
    const full = await this.api.getState(this.sessionId);
    this.entropies = full.entropies;
    if (this.view.mode === "entropy") {
      this.renderer.setColors(this.renderColors());
    }
  }

  async reset(): Promise<void> {
    await this.api.reset(this.sessionId);
    await this.refetch();
    this.renderer.highlight([]);
    this.renderer.setColors(this.renderColors());
  }

  metrics(): MetricsSnapshot {
    return {
      miou: this.miou,
      clickCount: this.clickCount,
      rounds: this.rounds,
      pending: this.view.pending.length,
      history: this.miouHistory,
    };
  }
}
