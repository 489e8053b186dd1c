// DOM wiring. createApp() builds the whole interface inside a root element;
// tests drive it with a fake Api and fake decoders, the browser entry point
// at the bottom uses the real ones.

import { Api, SceneInfo } from "./api.js";
import { decodePngBase64, drawChart, drawMap, Marker } from "./render.js";
import {
  addClass,
  AppState,
  doRetrain,
  hydrateSession,
  initialState,
  OverlayDecoder,
  requestPredict,
  resetSession,
  startSession,
  submitLabel,
} from "./state.js";
import { canvasToScenePixel, fitScene, panBy, View, zoomAt } from "./transform.js";

export interface AppOptions {
  decodeOverlay?: OverlayDecoder;
  loadSceneImage?: (url: string) => Promise<CanvasImageSource | null>;
}

export interface AppHandles {
  state: AppState;
  view: View;
  markers: Marker[];
  elements: Record<string, HTMLElement>;
  redraw: () => void;
  handleMapClick: (canvasX: number, canvasY: number) => Promise<string>;
  handleWheel: (canvasX: number, canvasY: number, deltaY: number) => void;
  handlePan: (dx: number, dy: number) => void;
  handleKey: (key: string) => void;
  retrain: () => Promise<string>;
  submitAddClass: () => Promise<void>;
  selectScene: (sceneId: string, method: string) => Promise<void>;
}

const MAP_W = 760;
const MAP_H = 560;

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  attrs: Record<string, string> = {},
  text = "",
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text) node.textContent = text;
  return node;
}

export function createApp(root: HTMLElement, api: Api, opts: AppOptions = {}): AppHandles {
  const doc = root.ownerDocument;
  const state = initialState();
  const markers: Marker[] = [];
  let view: View = { scale: 4, originX: 0, originY: 0 };
  let sceneImage: CanvasImageSource | null = null;
  const decode = opts.decodeOverlay ?? decodePngBase64;
  const loadImage =
    opts.loadSceneImage ??
    ((url: string) =>
      new Promise<CanvasImageSource | null>((resolve) => {
        const img = new Image();
        img.onload = () => resolve(img);
        img.onerror = () => resolve(null);
        img.src = url;
      }));

  root.innerHTML = "";
  const bar = el(doc, "div", { id: "toolbar" });
  const sceneSelect = el(doc, "select", { id: "scene-select" });
  const methodSelect = el(doc, "select", { id: "method-select" });
  for (const m of ["last-1", "last-2", "group-params"]) {
    methodSelect.append(el(doc, "option", { value: m }, m));
  }
  const startBtn = el(doc, "button", { id: "start" }, "Start session");
  const inspectBtn = el(doc, "button", { id: "mode-inspect", class: "active" }, "Inspect [i]");
  const labelBtn = el(doc, "button", { id: "mode-label" }, "Label [x]");
  const retrainBtn = el(doc, "button", { id: "retrain", disabled: "" }, "Retrain [t]");
  const resetBtn = el(doc, "button", { id: "reset" }, "Reset");
  const opacity = el(doc, "input", {
    id: "opacity", type: "range", min: "0", max: "1", step: "0.05", value: "0.6",
  });
  const status = el(doc, "span", { id: "status" }, "no session");
  bar.append(sceneSelect, methodSelect, startBtn, inspectBtn, labelBtn,
             retrainBtn, resetBtn, el(doc, "label", {}, "overlay"), opacity, status);

  const mapCanvas = el(doc, "canvas", { id: "map", width: String(MAP_W), height: String(MAP_H) });
  const side = el(doc, "div", { id: "side" });
  const paletteBox = el(doc, "div", { id: "palette" });
  const addForm = el(doc, "div", { id: "add-class" });
  const newName = el(doc, "input", { id: "new-class-name", placeholder: "new class name" });
  const newColor = el(doc, "input", { id: "new-class-color", type: "color", value: "#d05fb8" });
  const addBtn = el(doc, "button", { id: "add-class-btn" }, "Add class");
  addForm.append(newName, newColor, addBtn);
  const chartCanvas = el(doc, "canvas", { id: "chart", width: "360", height: "220" });
  const readout = el(doc, "div", { id: "readout" });
  const legend = el(doc, "div", { id: "legend" });
  const errorBox = el(doc, "div", { id: "error" });
  side.append(paletteBox, addForm, chartCanvas, readout, legend, errorBox);

  const main = el(doc, "div", { id: "main" });
  main.append(mapCanvas, side);
  root.append(bar, main);

  const mapCtx = (mapCanvas as HTMLCanvasElement).getContext("2d");
  const chartCtx = (chartCanvas as HTMLCanvasElement).getContext("2d");

  function renderPalette(): void {
    paletteBox.innerHTML = "";
    legend.innerHTML = "";
    state.palette.forEach((entry, i) => {
      const btn = el(doc, "button", {
        class: "palette-btn" + (i === state.selectedClass ? " selected" : ""),
        "data-class": String(i),
      }, `${i + 1}: ${entry.name}`);
      btn.style.borderColor = entry.color;
      btn.addEventListener("click", () => {
        state.selectedClass = i;
        renderPalette();
      });
      paletteBox.append(btn);
      const item = el(doc, "div", { class: "legend-item" });
      const swatch = el(doc, "span", { class: "swatch" });
      swatch.style.background = entry.color;
      item.append(swatch, doc.createTextNode(" " + entry.name));
      legend.append(item);
    });
  }

  function renderReadout(): void {
    const last = state.chart[state.chart.length - 1];
    if (!last) {
      readout.textContent = "";
      return;
    }
    // metric values come from the server verbatim
    readout.textContent =
      `retrain #${last.retrain_index} | labels ${state.labelCount} | ` +
      `accuracy ${last.pixel_accuracy} | mean IoU ${last.mean_iou}`;
  }

  function renderStatus(): void {
    status.textContent = state.sessionId
      ? `session ${state.sessionId.slice(0, 8)} (${state.method}, ${state.mode})`
      : "no session";
    (retrainBtn as HTMLButtonElement).disabled = state.retrainBusy || !state.sessionId;
    errorBox.textContent = state.lastError ?? "";
    inspectBtn.className = state.mode === "inspect" ? "active" : "";
    labelBtn.className = state.mode === "label" ? "active" : "";
  }

  function redraw(): void {
    if (mapCtx) drawMap(mapCtx, state, view, sceneImage, markers, MAP_W, MAP_H);
    if (chartCtx) drawChart(chartCtx, state, 360, 220);
    renderReadout();
    renderStatus();
  }

  async function selectScene(sceneId: string, method: string): Promise<void> {
    await startSession(api, state, sceneId, method);
    markers.length = 0;
    if (state.scene) {
      view = fitScene(state.scene.width, state.scene.height, MAP_W, MAP_H);
      sceneImage = await loadImage(api.sceneImageUrl(sceneId));
      const hash = `#session=${state.sessionId}&scene=${sceneId}&method=${method}`;
      if (doc.defaultView) doc.defaultView.location.hash = hash;
    }
    renderPalette();
    redraw();
  }

  async function handleMapClick(canvasX: number, canvasY: number): Promise<string> {
    if (!state.scene) return "no-session";
    const px = canvasToScenePixel(view, canvasX, canvasY, state.scene.width, state.scene.height);
    if (!px) return "outside";
    if (state.mode === "label") {
      const ok = await submitLabel(api, state, px.row, px.col);
      if (ok) markers.push({ row: px.row, col: px.col, cls: state.selectedClass });
      redraw();
      return ok ? "labeled" : "label-error";
    }
    const outcome = await requestPredict(api, state, px.row, px.col, decode);
    redraw();
    return outcome;
  }

  function handleWheel(canvasX: number, canvasY: number, deltaY: number): void {
    view = zoomAt(view, canvasX, canvasY, deltaY < 0 ? 1.25 : 0.8);
    redraw();
  }

  function handlePan(dx: number, dy: number): void {
    view = panBy(view, dx, dy);
    redraw();
  }

  async function retrain(): Promise<string> {
    renderStatus();
    const before = state.retrainBusy;
    if (before) return "busy";
    const resultPromise = doRetrain(api, state);
    renderStatus();
    const result = await resultPromise;
    // refresh the overlay from the new snapshot
    if (result === "done" && state.overlay) {
      await requestPredict(api, state, state.overlay.centerRow, state.overlay.centerCol, decode);
    }
    redraw();
    return result;
  }

  async function submitAddClass(): Promise<void> {
    const name = (newName as HTMLInputElement).value.trim();
    const color = (newColor as HTMLInputElement).value;
    if (!name) return;
    const idx = await addClass(api, state, name, color);
    if (idx !== null) (newName as HTMLInputElement).value = "";
    renderPalette();
    redraw();
  }

  function handleKey(key: string): void {
    if (key === "i") state.mode = "inspect";
    else if (key === "x") state.mode = "label";
    else if (key === "t") void retrain();
    else {
      const digit = parseInt(key, 10);
      if (!Number.isNaN(digit) && digit >= 1 && digit <= state.palette.length) {
        state.selectedClass = digit - 1;
        renderPalette();
      }
    }
    renderStatus();
  }

  // DOM event plumbing
  let dragging = false;
  let moved = false;
  let lastX = 0;
  let lastY = 0;
  mapCanvas.addEventListener("mousedown", (ev) => {
    const e = ev as MouseEvent;
    dragging = true;
    moved = false;
    lastX = e.clientX;
    lastY = e.clientY;
  });
  mapCanvas.addEventListener("mousemove", (ev) => {
    if (!dragging) return;
    const e = ev as MouseEvent;
    const dx = e.clientX - lastX;
    const dy = e.clientY - lastY;
    if (Math.abs(dx) + Math.abs(dy) > 2) {
      moved = true;
      handlePan(dx, dy);
      lastX = e.clientX;
      lastY = e.clientY;
    }
  });
  mapCanvas.addEventListener("mouseup", (ev) => {
    const e = ev as MouseEvent;
    dragging = false;
    if (moved) return; // it was a pan, not a click
    const rect = (mapCanvas as HTMLCanvasElement).getBoundingClientRect();
    void handleMapClick(e.clientX - rect.left, e.clientY - rect.top);
  });
  mapCanvas.addEventListener("wheel", (ev) => {
    const e = ev as WheelEvent;
    e.preventDefault();
    const rect = (mapCanvas as HTMLCanvasElement).getBoundingClientRect();
    handleWheel(e.clientX - rect.left, e.clientY - rect.top, e.deltaY);
  });
  doc.addEventListener("keydown", (ev) => {
    const e = ev as KeyboardEvent;
    if ((e.target as HTMLElement | null)?.tagName === "INPUT") return;
    handleKey(e.key);
  });
  inspectBtn.addEventListener("click", () => { state.mode = "inspect"; renderStatus(); });
  labelBtn.addEventListener("click", () => { state.mode = "label"; renderStatus(); });
  retrainBtn.addEventListener("click", () => void retrain());
  resetBtn.addEventListener("click", () => {
    void resetSession(api, state).then(() => {
      markers.length = 0;
      renderPalette();
      redraw();
    });
  });
  addBtn.addEventListener("click", () => void submitAddClass());
  startBtn.addEventListener("click", () => {
    const sceneId = (sceneSelect as HTMLSelectElement).value;
    const method = (methodSelect as HTMLSelectElement).value;
    if (sceneId) void selectScene(sceneId, method);
  });
  opacity.addEventListener("input", () => {
    state.opacity = parseFloat((opacity as HTMLInputElement).value);
    redraw();
  });

  async function boot(): Promise<void> {
    const scenes = await api.listScenes();
    for (const s of scenes) {
      sceneSelect.append(el(doc, "option", { value: s.scene_id },
                            `${s.scene_id} (${s.width}x${s.height})`));
    }
    const hash = doc.defaultView?.location.hash ?? "";
    const params = new URLSearchParams(hash.replace(/^#/, ""));
    const sid = params.get("session");
    const sceneId = params.get("scene");
    if (sid && sceneId) {
      const scene = scenes.find((s: SceneInfo) => s.scene_id === sceneId);
      if (scene) {
        await hydrateSession(api, state, sid, scene, params.get("method") ?? "last-1");
        view = fitScene(scene.width, scene.height, MAP_W, MAP_H);
        sceneImage = await loadImage(api.sceneImageUrl(sceneId));
        renderPalette();
      }
    }
    redraw();
  }
  void boot();

  return {
    state,
    get view() { return view; },
    set view(v: View) { view = v; },
    markers,
    elements: {
      toolbar: bar, map: mapCanvas, chart: chartCanvas, palette: paletteBox,
      legend, readout, status, error: errorBox, retrainBtn, addBtn,
      newName, newColor, sceneSelect, methodSelect, startBtn,
    },
    redraw,
    handleMapClick,
    handleWheel,
    handlePan,
    handleKey,
    retrain,
    submitAddClass,
    selectScene,
  } as AppHandles;
}

declare global {
  interface Window {
    __LANDLOOP_TEST__?: boolean;
  }
}

if (typeof window !== "undefined" && !window.__LANDLOOP_TEST__) {
  const root = document.getElementById("app");
  if (root) createApp(root, new Api(""));
}
