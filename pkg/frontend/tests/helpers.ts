// Shared fakes: an in-memory Api double and a recording canvas context.

import { Api, ApiError, MetricsEntry, PaletteEntry, SceneInfo } from "../src/api.js";

export function sceneInfo(): SceneInfo {
  return {
    scene_id: "area-0",
    width: 128,
    height: 128,
    bands: 4,
    offset: 20,
    min_patch: 44,
    palette: [
      { index: 0, name: "water", color: "#2f6fd0" },
      { index: 1, name: "tree-canopy", color: "#1d6b33" },
      { index: 2, name: "low-vegetation", color: "#8fd06a" },
      { index: 3, name: "impervious", color: "#8a8a8a" },
    ],
  };
}

export function entry(index: number, acc: number, labels = 0): MetricsEntry {
  return {
    retrain_index: index,
    timestamp: 1000 + index,
    label_count: labels,
    report: {
      pixel_accuracy: acc,
      mean_iou: acc - 0.1,
      per_class_iou: {},
      confusion: [],
      evaluated_pixels: 1000,
      label_distribution: null,
    },
  };
}

export interface FakeCalls {
  predict: { row: number; col: number; size: number }[];
  labels: { row: number; col: number; cls: number }[][];
  retrains: number;
  resets: number;
}

export interface FakeApi {
  api: Api;
  calls: FakeCalls;
  resolveRetrain: (() => void) | null;
  holdRetrain: boolean;
}

// The fake mirrors server behavior closely enough for UI logic: predict
// echoes centered extents, retrain bumps the checksum, addClass grows the
// palette and rejects duplicates with the server's error code.
export function makeFakeApi(): FakeApi {
  const scene = sceneInfo();
  const palette: PaletteEntry[] = scene.palette.slice();
  const history: MetricsEntry[] = [entry(0, 0.7)];
  let labelTotal = 0;
  let checksum = 111;
  const holder: FakeApi = { api: null as unknown as Api, calls: {
    predict: [], labels: [], retrains: 0, resets: 0,
  }, resolveRetrain: null, holdRetrain: false };

  const api = {
    listScenes: async () => [scene],
    sceneImageUrl: (id: string) => `/api/scenes/${id}/image.png`,
    createSession: async (sceneId: string, method: string) => ({
      session_id: "session-1",
      scene,
      method,
      baseline: history[0],
    }),
    predict: async (_sid: string, row: number, col: number, size: number) => {
      holder.calls.predict.push({ row, col, size });
      const half = 12;
      return {
        row0: row - half,
        col0: col - half,
        height: 2 * half,
        width: 2 * half,
        offset: 20,
        snapshot_checksum: checksum,
        retrain_index: history.length - 1,
        classes_png: "ZmFrZQ==",
        confidence_png: "ZmFrZQ==",
      };
    },
    submitLabels: async (_sid: string, pts: { row: number; col: number; cls: number }[]) => {
      holder.calls.labels.push(pts);
      labelTotal += pts.length;
      return { accepted: pts.length, updated: 0, total_labels: labelTotal };
    },
    retrain: async () => {
      if (holder.holdRetrain) {
        await new Promise<void>((resolve) => {
          holder.resolveRetrain = resolve;
        });
      }
      holder.calls.retrains += 1;
      checksum += 1;
      const e = entry(history.length, 0.7 + 0.05 * history.length, labelTotal);
      history.push(e);
      return {
        retrain_index: e.retrain_index,
        snapshot_checksum: checksum,
        report: e.report,
      };
    },
    addClass: async (_sid: string, name: string, color: string) => {
      if (palette.some((p) => p.name === name)) {
        throw new ApiError("palette", `class '${name}' already in palette`, 400);
      }
      palette.push({ index: palette.length, name, color });
      return { class_index: palette.length - 1, palette: palette.slice() };
    },
    reset: async () => {
      holder.calls.resets += 1;
      labelTotal = 0;
      history.splice(1);
      palette.splice(4);
      return { ok: true, retrain_index: 0 };
    },
    metrics: async () => ({
      history: history.slice(),
      label_distribution: null,
      label_count: labelTotal,
    }),
    palette: async () => palette.slice(),
  };
  holder.api = api as unknown as Api;
  return holder;
}

export interface DrawCall {
  op: string;
  args: unknown[];
}

export class RecordingContext {
  calls: DrawCall[] = [];
  imageSmoothingEnabled = false;
  globalAlpha = 1;
  strokeStyle = "";
  fillStyle = "";
  lineWidth = 1;

  private rec(op: string, ...args: unknown[]): void {
    this.calls.push({ op, args });
  }

  clearRect(...a: unknown[]): void { this.rec("clearRect", ...a); }
  drawImage(...a: unknown[]): void { this.rec("drawImage", ...a); }
  strokeRect(...a: unknown[]): void { this.rec("strokeRect", ...a); }
  fillRect(...a: unknown[]): void { this.rec("fillRect", ...a); }
  beginPath(...a: unknown[]): void { this.rec("beginPath", ...a); }
  moveTo(...a: unknown[]): void { this.rec("moveTo", ...a); }
  lineTo(...a: unknown[]): void { this.rec("lineTo", ...a); }
  stroke(...a: unknown[]): void { this.rec("stroke", ...a); }
  fill(...a: unknown[]): void { this.rec("fill", ...a); }
  arc(...a: unknown[]): void { this.rec("arc", ...a); }

  drawImages(): DrawCall[] {
    return this.calls.filter((c) => c.op === "drawImage");
  }
}

export async function flush(times = 6): Promise<void> {
  for (let i = 0; i < times; i++) {
    await Promise.resolve();
  }
}
