/** Pure view-state logic: color modes, pending clicks, diff application. */

export type ColorMode = "prediction" | "error" | "entropy" | "rgb";

export interface PendingClick {
  pointIndex: number;
  label: number;
}

export interface ViewState {
  mode: ColorMode;
  selectedClass: number;
  pending: PendingClick[];
  numPoints: number;
  numClasses: number;
}

export function initialViewState(numPoints: number, numClasses: number): ViewState {
  return { mode: "prediction", selectedClass: 0, pending: [], numPoints, numClasses };
}

/** Queue a click; rejects out-of-range indices/classes so the service never
 * sees them, and replaces an earlier pending click on the same point. */
export function addPendingClick(state: ViewState, pointIndex: number, label: number): ViewState {
  if (!Number.isInteger(pointIndex) || pointIndex < 0 || pointIndex >= state.numPoints) {
    throw new RangeError(`point index ${pointIndex} out of range`);
  }
  if (!Number.isInteger(label) || label < 0 || label >= state.numClasses) {
    throw new RangeError(`class ${label} out of range`);
  }
  const pending = state.pending.filter((p) => p.pointIndex !== pointIndex);
  pending.push({ pointIndex, label });
  return { ...state, pending };
}

export function removePendingClick(state: ViewState, pointIndex: number): ViewState {
  return { ...state, pending: state.pending.filter((p) => p.pointIndex !== pointIndex) };
}

export function clearPending(state: ViewState): ViewState {
  return { ...state, pending: [] };
}

/** Apply a refinement diff in place of a full refetch. */
export function applyDiff(
  labels: Int32Array,
  changedIndices: number[],
  newLabels: number[],
): Int32Array {
  if (changedIndices.length !== newLabels.length) {
    throw new Error("diff arrays disagree in length");
  }
  const out = labels.slice();
  for (let i = 0; i < changedIndices.length; i++) {
    out[changedIndices[i]] = newLabels[i];
  }
  return out;
}

// -- coloring ---------------------------------------------------------------

const COOL: [number, number, number] = [0.18, 0.28, 0.8];
const HOT: [number, number, number] = [0.95, 0.25, 0.1];

/** Cool at zero entropy, hot at the maximum (log of the class count). */
export function entropyColor(value: number, maxEntropy: number): [number, number, number] {
  const t = maxEntropy > 0 ? Math.min(Math.max(value / maxEntropy, 0), 1) : 0;
  return [
    COOL[0] + t * (HOT[0] - COOL[0]),
    COOL[1] + t * (HOT[1] - COOL[1]),
    COOL[2] + t * (HOT[2] - COOL[2]),
  ];
}

export interface ColorInputs {
  mode: ColorMode;
  labels: Int32Array;
  entropies: Float32Array;
  rgb: Float32Array; // N x 3 interleaved
  gtLabels: Int32Array | null;
  palette: number[][];
  numClasses: number;
}

const ERROR_COLOR: [number, number, number] = [0.9, 0.12, 0.12];
const OK_COLOR: [number, number, number] = [0.55, 0.78, 0.55];

/** Per-point render colors for the active mode, N x 3 interleaved. */
export function colorize(inp: ColorInputs): Float32Array {
  const n = inp.labels.length;
  const out = new Float32Array(n * 3);
  const maxEntropy = Math.log(inp.numClasses);
  for (let i = 0; i < n; i++) {
    let c: [number, number, number] | number[];
    switch (inp.mode) {
      case "prediction":
        c = inp.palette[inp.labels[i]] ?? [0.5, 0.5, 0.5];
        break;
      case "error":
        c = inp.gtLabels === null ? [0.6, 0.6, 0.6]
          : inp.gtLabels[i] === inp.labels[i] ? OK_COLOR : ERROR_COLOR;
        break;
      case "entropy":
        c = entropyColor(inp.entropies[i], maxEntropy);
        break;
      case "rgb":
        c = [inp.rgb[3 * i], inp.rgb[3 * i + 1], inp.rgb[3 * i + 2]];
        break;
    }
    out[3 * i] = c[0];
    out[3 * i + 1] = c[1];
    out[3 * i + 2] = c[2];
  }
  return out;
}
