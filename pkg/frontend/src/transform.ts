// Viewport math: the scene is drawn at `scale` with its (originX, originY)
// scene coordinate pinned to the canvas top-left corner. Rows are y, cols x.

export interface View {
  scale: number;
  originX: number;
  originY: number;
}

export const MIN_SCALE = 0.25;
export const MAX_SCALE = 32;

export function sceneToCanvas(view: View, sceneX: number, sceneY: number): { x: number; y: number } {
  return {
    x: (sceneX - view.originX) * view.scale,
    y: (sceneY - view.originY) * view.scale,
  };
}

export function canvasToScene(view: View, canvasX: number, canvasY: number): { x: number; y: number } {
  return {
    x: canvasX / view.scale + view.originX,
    y: canvasY / view.scale + view.originY,
  };
}

// Scene pixel under a canvas position, or null when outside the raster.
export function canvasToScenePixel(
  view: View,
  canvasX: number,
  canvasY: number,
  sceneWidth: number,
  sceneHeight: number,
): { row: number; col: number } | null {
  const pos = canvasToScene(view, canvasX, canvasY);
  const col = Math.floor(pos.x);
  const row = Math.floor(pos.y);
  if (row < 0 || col < 0 || row >= sceneHeight || col >= sceneWidth) {
    return null;
  }
  return { row, col };
}

// Rescale keeping the scene point under (canvasX, canvasY) fixed.
export function zoomAt(view: View, canvasX: number, canvasY: number, factor: number): View {
  const scale = Math.min(MAX_SCALE, Math.max(MIN_SCALE, view.scale * factor));
  const anchor = canvasToScene(view, canvasX, canvasY);
  return {
    scale,
    originX: anchor.x - canvasX / scale,
    originY: anchor.y - canvasY / scale,
  };
}

export function panBy(view: View, dxCanvas: number, dyCanvas: number): View {
  return {
    scale: view.scale,
    originX: view.originX - dxCanvas / view.scale,
    originY: view.originY - dyCanvas / view.scale,
  };
}

export function fitScene(sceneWidth: number, sceneHeight: number, canvasWidth: number, canvasHeight: number): View {
  const scale = Math.min(canvasWidth / sceneWidth, canvasHeight / sceneHeight);
  return { scale, originX: 0, originY: 0 };
}
