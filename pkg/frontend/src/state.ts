// Session-side application state and the async flows that mutate it.
// Everything here is DOM-free so the behavior is unit-testable; the server
// stays the single source of truth and this module only mirrors responses.

import { Api, ApiError, MetricsEntry, PaletteEntry, PredictResponse, SceneInfo } from "./api.js";

export interface ChartPoint {
  retrain_index: number;
  label_count: number;
  pixel_accuracy: number;
  mean_iou: number;
}

export interface OverlayState {
  row0: number;
  col0: number;
  width: number;
  height: number;
  checksum: number;
  image: CanvasImageSource | null;
  confidence: CanvasImageSource | null;
  centerRow: number;
  centerCol: number;
}

export type Mode = "inspect" | "label";

export interface AppState {
  sessionId: string | null;
  scene: SceneInfo | null;
  method: string;
  palette: PaletteEntry[];
  selectedClass: number;
  mode: Mode;
  opacity: number;
  patchSize: number;
  overlay: OverlayState | null;
  chart: ChartPoint[];
  labelCount: number;
  retrainBusy: boolean;
  lastError: string | null;
  predictSeq: number;
  appliedPredictSeq: number;
}

export function initialState(): AppState {
  return {
    sessionId: null,
    scene: null,
    method: "last-1",
    palette: [],
    selectedClass: 0,
    mode: "inspect",
    opacity: 0.6,
    patchSize: 200,
    overlay: null,
    chart: [],
    labelCount: 0,
    retrainBusy: false,
    lastError: null,
    predictSeq: 0,
    appliedPredictSeq: 0,
  };
}

export type OverlayDecoder = (pngBase64: string) => Promise<CanvasImageSource | null>;

function chartPoint(entry: MetricsEntry, labelCount: number): ChartPoint {
  return {
    retrain_index: entry.retrain_index,
    label_count: labelCount,
    pixel_accuracy: entry.report.pixel_accuracy,
    mean_iou: entry.report.mean_iou,
  };
}

export async function startSession(
  api: Api,
  state: AppState,
  sceneId: string,
  method: string,
): Promise<void> {
  const info = await api.createSession(sceneId, method);
  state.sessionId = info.session_id;
  state.scene = info.scene;
  state.method = info.method;
  state.palette = info.scene.palette.slice();
  state.chart = [chartPoint(info.baseline, 0)];
  state.labelCount = 0;
  state.overlay = null;
  state.lastError = null;
}

// Rebuild the whole view from the server for an existing session id; a page
// reload goes through here and must reproduce the same numbers.
export async function hydrateSession(
  api: Api,
  state: AppState,
  sessionId: string,
  scene: SceneInfo,
  method: string,
): Promise<void> {
  state.sessionId = sessionId;
  state.scene = scene;
  state.method = method;
  state.palette = await api.palette(sessionId);
  const metrics = await api.metrics(sessionId);
  state.chart = metrics.history.map((entry) => chartPoint(entry, entry.label_count));
  state.labelCount = metrics.label_count;
  state.overlay = null;
}

// Request a prediction overlay centered at a scene pixel. Responses are
// applied in request order; anything overtaken by a newer request is
// dropped so the overlay never flickers backwards.
export async function requestPredict(
  api: Api,
  state: AppState,
  row: number,
  col: number,
  decode: OverlayDecoder,
): Promise<"applied" | "stale" | "error"> {
  if (!state.sessionId) return "error";
  const seq = ++state.predictSeq;
  let resp: PredictResponse;
  try {
    resp = await api.predict(state.sessionId, row, col, state.patchSize);
  } catch (err) {
    state.lastError = err instanceof Error ? err.message : String(err);
    return "error";
  }
  if (seq <= state.appliedPredictSeq) {
    return "stale";
  }
  state.appliedPredictSeq = seq;
  const image = resp.classes_png ? await decode(resp.classes_png) : null;
  const confidence = resp.confidence_png ? await decode(resp.confidence_png) : null;
  state.overlay = {
    row0: resp.row0,
    col0: resp.col0,
    width: resp.width,
    height: resp.height,
    checksum: resp.snapshot_checksum,
    image,
    confidence,
    centerRow: row,
    centerCol: col,
  };
  return "applied";
}

export async function submitLabel(
  api: Api,
  state: AppState,
  row: number,
  col: number,
): Promise<boolean> {
  if (!state.sessionId) return false;
  try {
    const out = await api.submitLabels(state.sessionId, [
      { row, col, cls: state.selectedClass },
    ]);
    state.labelCount = out.total_labels;
    return true;
  } catch (err) {
    state.lastError = err instanceof Error ? err.message : String(err);
    return false;
  }
}

// One retrain in flight, ever: the button stays disabled until the inflight
// call resolves, and exactly one chart point is appended per success.
export async function doRetrain(
  api: Api,
  state: AppState,
): Promise<"done" | "busy" | "error"> {
  if (!state.sessionId) return "error";
  if (state.retrainBusy) return "busy";
  state.retrainBusy = true;
  try {
    const out = await api.retrain(state.sessionId);
    state.chart.push({
      retrain_index: out.retrain_index,
      label_count: state.labelCount,
      pixel_accuracy: out.report.pixel_accuracy,
      mean_iou: out.report.mean_iou,
    });
    state.lastError = null;
    return "done";
  } catch (err) {
    if (err instanceof ApiError && err.code === "busy") {
      return "busy";
    }
    state.lastError = err instanceof Error ? err.message : String(err);
    return "error";
  } finally {
    state.retrainBusy = false;
  }
}

export async function addClass(
  api: Api,
  state: AppState,
  name: string,
  color: string,
): Promise<number | null> {
  if (!state.sessionId) return null;
  try {
    const out = await api.addClass(state.sessionId, name, color);
    state.palette = out.palette.slice();
    state.selectedClass = out.class_index;
    state.lastError = null;
    return out.class_index;
  } catch (err) {
    state.lastError = err instanceof Error ? err.message : String(err);
    return null;
  }
}

export async function resetSession(api: Api, state: AppState): Promise<void> {
  if (!state.sessionId || !state.scene) return;
  await api.reset(state.sessionId);
  state.palette = await api.palette(state.sessionId);
  const metrics = await api.metrics(state.sessionId);
  state.chart = metrics.history.map((entry) => chartPoint(entry, entry.label_count));
  state.labelCount = metrics.label_count;
  state.overlay = null;
  state.selectedClass = 0;
}
