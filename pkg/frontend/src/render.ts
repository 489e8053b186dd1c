// Canvas drawing: scene image, aligned prediction overlay, label markers,
// and the metrics chart. Pixel art rules: nearest neighbor, no smoothing.

import { AppState } from "./state.js";
import { View, sceneToCanvas } from "./transform.js";

export interface Marker {
  row: number;
  col: number;
  cls: number;
}

export function drawMap(
  ctx: CanvasRenderingContext2D,
  state: AppState,
  view: View,
  sceneImage: CanvasImageSource | null,
  markers: Marker[],
  canvasWidth: number,
  canvasHeight: number,
): void {
  ctx.clearRect(0, 0, canvasWidth, canvasHeight);
  ctx.imageSmoothingEnabled = false;
  if (sceneImage && state.scene) {
    const at = sceneToCanvas(view, 0, 0);
    ctx.drawImage(
      sceneImage,
      at.x,
      at.y,
      state.scene.width * view.scale,
      state.scene.height * view.scale,
    );
  }
  const ov = state.overlay;
  if (ov && ov.image) {
    const at = sceneToCanvas(view, ov.col0, ov.row0);
    ctx.globalAlpha = state.opacity;
    ctx.drawImage(ov.image, at.x, at.y, ov.width * view.scale, ov.height * view.scale);
    ctx.globalAlpha = 1.0;
    ctx.strokeStyle = "#ffffff";
    ctx.lineWidth = 1;
    ctx.strokeRect(at.x, at.y, ov.width * view.scale, ov.height * view.scale);
  }
  for (const m of markers) {
    const at = sceneToCanvas(view, m.col + 0.5, m.row + 0.5);
    const color = state.palette[m.cls]?.color ?? "#ffffff";
    ctx.fillStyle = color;
    ctx.strokeStyle = "#000000";
    ctx.beginPath();
    ctx.arc(at.x, at.y, Math.max(3, view.scale * 0.4), 0, Math.PI * 2);
    ctx.fill();
    ctx.stroke();
  }
}

export function drawChart(
  ctx: CanvasRenderingContext2D,
  state: AppState,
  width: number,
  height: number,
): void {
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#182026";
  ctx.fillRect(0, 0, width, height);
  const pts = state.chart;
  if (pts.length === 0) return;
  const padding = 24;
  const innerW = width - 2 * padding;
  const innerH = height - 2 * padding;
  const xAt = (i: number) =>
    padding + (pts.length === 1 ? innerW / 2 : (i / (pts.length - 1)) * innerW);
  const yAt = (v: number) => padding + (1 - v) * innerH;

  ctx.strokeStyle = "#39464f";
  ctx.lineWidth = 1;
  for (const gy of [0, 0.25, 0.5, 0.75, 1]) {
    ctx.beginPath();
    ctx.moveTo(padding, yAt(gy));
    ctx.lineTo(width - padding, yAt(gy));
    ctx.stroke();
  }

  const series: ["pixel_accuracy" | "mean_iou", string][] = [
    ["pixel_accuracy", "#58a6ff"],
    ["mean_iou", "#7ee787"],
  ];
  for (const [key, color] of series) {
    ctx.strokeStyle = color;
    ctx.fillStyle = color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    pts.forEach((p, i) => {
      const x = xAt(i);
      const y = yAt(p[key]);
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
    pts.forEach((p, i) => {
      ctx.beginPath();
      ctx.arc(xAt(i), yAt(p[key]), 3, 0, Math.PI * 2);
      ctx.fill();
    });
  }
}

// Default PNG decoder for the browser; tests inject a fake instead.
export function decodePngBase64(b64: string): Promise<CanvasImageSource | null> {
  return new Promise((resolve) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => resolve(null);
    img.src = "data:image/png;base64," + b64;
  });
}
