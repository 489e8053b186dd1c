// Typed client for the fine-tuning service. The UI talks to the server
// exclusively through these calls and renders whatever they return.

export interface PaletteEntry {
  index: number;
  name: string;
  color: string;
}

export interface SceneInfo {
  scene_id: string;
  width: number;
  height: number;
  bands: number;
  offset: number;
  min_patch: number;
  palette: PaletteEntry[];
}

export interface Report {
  pixel_accuracy: number;
  mean_iou: number;
  per_class_iou: Record<string, number>;
  confusion: number[][];
  evaluated_pixels: number;
  label_distribution: Record<string, number> | null;
}

export interface MetricsEntry {
  retrain_index: number;
  timestamp: number;
  report: Report;
  label_count: number;
}

export interface SessionInfo {
  session_id: string;
  scene: SceneInfo;
  method: string;
  baseline: MetricsEntry;
}

export interface PredictResponse {
  row0: number;
  col0: number;
  height: number;
  width: number;
  offset: number;
  snapshot_checksum: number;
  retrain_index: number;
  classes_png?: string;
  confidence_png?: string;
  classes?: number[][];
  max_prob?: number[][];
}

export interface RetrainResponse {
  retrain_index: number;
  snapshot_checksum: number;
  report: Report;
}

export interface MetricsResponse {
  history: MetricsEntry[];
  label_distribution: Record<string, number> | null;
  label_count: number;
}

export class ApiError extends Error {
  constructor(
    public code: string,
    message: string,
    public status: number,
  ) {
    super(message);
  }
}

async function parse<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let code = "http_" + resp.status;
    let message = resp.statusText;
    try {
      const body = (await resp.json()) as { error?: { code: string; message: string } };
      if (body.error) {
        code = body.error.code;
        message = body.error.message;
      }
    } catch {
      // non-JSON error body: keep the status text
    }
    throw new ApiError(code, message, resp.status);
  }
  return (await resp.json()) as T;
}

export class Api {
  constructor(private base = "") {}

  private url(path: string): string {
    return this.base + path;
  }

  listScenes(): Promise<SceneInfo[]> {
    return fetch(this.url("/api/scenes")).then((r) => parse<SceneInfo[]>(r));
  }

  sceneImageUrl(sceneId: string): string {
    return this.url(`/api/scenes/${sceneId}/image.png`);
  }

  createSession(sceneId: string, method: string, toConvergence = true): Promise<SessionInfo> {
    return fetch(this.url("/api/sessions"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        scene_id: sceneId,
        method,
        to_convergence: toConvergence,
      }),
    }).then((r) => parse<SessionInfo>(r));
  }

  predict(
    sessionId: string,
    centerRow: number,
    centerCol: number,
    patchSize: number,
  ): Promise<PredictResponse> {
    return fetch(this.url(`/api/sessions/${sessionId}/predict`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        center_row: centerRow,
        center_col: centerCol,
        patch_size: patchSize,
        format: "png",
      }),
    }).then((r) => parse<PredictResponse>(r));
  }

  submitLabels(
    sessionId: string,
    points: { row: number; col: number; cls: number }[],
  ): Promise<{ accepted: number; updated: number; total_labels: number }> {
    return fetch(this.url(`/api/sessions/${sessionId}/labels`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ points }),
    }).then((r) => parse(r));
  }

  retrain(sessionId: string): Promise<RetrainResponse> {
    return fetch(this.url(`/api/sessions/${sessionId}/retrain`), {
      method: "POST",
    }).then((r) => parse<RetrainResponse>(r));
  }

  addClass(
    sessionId: string,
    name: string,
    color: string,
  ): Promise<{ class_index: number; palette: PaletteEntry[] }> {
    return fetch(this.url(`/api/sessions/${sessionId}/classes`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ name, color }),
    }).then((r) => parse(r));
  }

  reset(sessionId: string): Promise<{ ok: boolean; retrain_index: number }> {
    return fetch(this.url(`/api/sessions/${sessionId}/reset`), {
      method: "POST",
    }).then((r) => parse(r));
  }

  metrics(sessionId: string): Promise<MetricsResponse> {
    return fetch(this.url(`/api/sessions/${sessionId}/metrics`)).then((r) =>
      parse<MetricsResponse>(r),
    );
  }

  palette(sessionId: string): Promise<PaletteEntry[]> {
    return fetch(this.url(`/api/sessions/${sessionId}/palette`)).then((r) =>
      parse<PaletteEntry[]>(r),
    );
  }
}
