/** Typed client for the segmentation session service. */

export interface SessionSummary {
  id: string;
  scene: string;
  status: string;
  num_points: number;
  num_classes: number;
  click_count: number;
  rounds: number;
  miou: number | null;
  has_ground_truth: boolean;
  baseline_miou?: number | null;
}

export interface ClickRecord {
  point_index: number;
  corrected_label: number;
  round: number;
  source: string;
}

export interface FullState extends SessionSummary {
  clicks: ClickRecord[];
  miou_history: (number | null)[];
  positions: Float32Array;
  colors: Float32Array;
  labels: Int32Array;
  entropies: Float32Array;
  filterScores: Float32Array;
  gtLabels: Int32Array | null;
}

export interface EnergyRound {
  loss: number;
  correction: number;
  stabilization: number;
  labels_changed: number;
}

export interface ClickDiff {
  id: string;
  changed_indices: number[];
  new_labels: number[];
  energy_trace: EnergyRound[];
  miou: number | null;
  click_count: number;
  rounds: number;
  status: string;
}

export interface ClassInfo {
  names: string[];
  palette: number[][];
}

export class ApiError extends Error {
  status: number;
  body: Record<string, unknown>;

  constructor(status: number, body: Record<string, unknown>) {
    super(String(body["error"] ?? `HTTP ${status}`));
    this.status = status;
    this.body = body;
  }
}

function base64Bytes(text: string): Uint8Array<ArrayBuffer> {
  if (typeof atob === "function") {
    const raw = atob(text);
    const out = new Uint8Array(raw.length);
    for (let i = 0; i < raw.length; i++) out[i] = raw.charCodeAt(i);
    return out;
  }
  // node test environment; copy out of Buffer's pool so views stay aligned
  const buf = (globalThis as any).Buffer.from(text, "base64");
  return new Uint8Array(buf);
}

export function decodeFloat32(text: string): Float32Array<ArrayBuffer> {
  return new Float32Array(base64Bytes(text).buffer);
}

export function decodeInt32(text: string): Int32Array<ArrayBuffer> {
  return new Int32Array(base64Bytes(text).buffer);
}

export class ApiClient {
  base: string;

  constructor(base: string) {
    this.base = base.replace(/\/$/, "");
  }

  private async request(method: string, path: string, body?: unknown): Promise<any> {
    const resp = await fetch(this.base + path, {
      method,
      headers: { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const payload = await resp.json();
    if (!resp.ok) throw new ApiError(resp.status, payload);
    return payload;
  }

  scenes(): Promise<{ scenes: string[] }> {
    return this.request("GET", "/scenes");
  }

  classes(): Promise<ClassInfo> {
    return this.request("GET", "/classes");
  }

  createSession(body: { scene?: string; ply?: string; config?: object }): Promise<SessionSummary> {
    return this.request("POST", "/sessions", body);
  }

  async getState(id: string): Promise<FullState> {
    const raw = await this.request("GET", `/sessions/${id}/state?detail=full`);
    return {
      ...raw,
      positions: decodeFloat32(raw.positions),
      colors: decodeFloat32(raw.colors),
      labels: decodeInt32(raw.labels),
      entropies: decodeFloat32(raw.entropies),
      filterScores: decodeFloat32(raw.filter_scores),
      gtLabels: raw.gt_labels ? decodeInt32(raw.gt_labels) : null,
    };
  }

  getSummary(id: string): Promise<SessionSummary> {
    return this.request("GET", `/sessions/${id}/state`);
  }

  postClicks(id: string, clicks: { point_index: number; corrected_label: number }[]): Promise<ClickDiff> {
    return this.request("POST", `/sessions/${id}/clicks`, { clicks });
  }

  reset(id: string): Promise<SessionSummary> {
    return this.request("POST", `/sessions/${id}/reset`);
  }

  exportSession(id: string): Promise<Record<string, unknown>> {
    return this.request("GET", `/sessions/${id}/export`);
  }
}
