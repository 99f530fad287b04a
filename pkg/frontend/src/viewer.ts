/** Canvas rendering: slice image, mask overlay, and prompt markers. */

import type { BoxIn, PointIn } from "./api.js";
import { voxelToCanvas, type ViewTransform } from "./coords.js";

export interface Rgba {
  r: number;
  g: number;
  b: number;
  a: number;
}

export const OVERLAY_COLOR: Rgba = { r: 235, g: 80, b: 60, a: 110 };

/** Fill an RGBA buffer (length `ydim * xdim * 4`) for one overlay slice.
 *
 * Foreground voxels get `color`; background stays fully transparent. Pure so
 * the per-pixel logic is testable without a canvas.
 */
export function maskSliceRgba(
  overlay: Uint8Array,
  shape: [number, number, number],
  z: number,
  color: Rgba = OVERLAY_COLOR,
): Uint8ClampedArray {
  const [, ydim, xdim] = shape;
  const plane = ydim * xdim;
  const out = new Uint8ClampedArray(plane * 4);
  const base = z * plane;
  for (let i = 0; i < plane; i++) {
    if (overlay[base + i]) {
      out[i * 4] = color.r;
      out[i * 4 + 1] = color.g;
      out[i * 4 + 2] = color.b;
      out[i * 4 + 3] = color.a;
    }
  }
  return out;
}

/** Draw the slice image scaled up with crisp voxel edges. */
export function drawSlice(
  ctx: CanvasRenderingContext2D,
  image: CanvasImageSource,
  t: ViewTransform,
): void {
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, t.xdim * t.scale, t.ydim * t.scale);
  ctx.drawImage(image, 0, 0, t.xdim * t.scale, t.ydim * t.scale);
}

/** Composite one overlay slice on top of the already-drawn image. */
export function drawOverlay(
  ctx: CanvasRenderingContext2D,
  overlay: Uint8Array,
  shape: [number, number, number],
  z: number,
  t: ViewTransform,
): void {
  const [, ydim, xdim] = shape;
  const imageData = new ImageData(new Uint8ClampedArray(maskSliceRgba(overlay, shape, z)), xdim, ydim);
  const buffer = document.createElement("canvas");
  buffer.width = xdim;
  buffer.height = ydim;
  const bufferCtx = buffer.getContext("2d");
  if (bufferCtx === null) {
    return;
  }
  bufferCtx.putImageData(imageData, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(buffer, 0, 0, xdim * t.scale, ydim * t.scale);
}

/** Draw point prompts that live on the visible slice as small crosses. */
export function drawPoints(
  ctx: CanvasRenderingContext2D,
  points: PointIn[],
  z: number,
  t: ViewTransform,
): void {
  ctx.strokeStyle = "#3bd16f";
  ctx.lineWidth = 2;
  for (const point of points) {
    if (point.z !== z) {
      continue;
    }
    const { px, py } = voxelToCanvas({ y: point.y, x: point.x }, t);
    ctx.beginPath();
    ctx.moveTo(px - 5, py);
    ctx.lineTo(px + 5, py);
    ctx.moveTo(px, py - 5);
    ctx.lineTo(px, py + 5);
    ctx.stroke();
  }
}

/** Draw the box prompt if it lives on the visible slice. */
export function drawBox(ctx: CanvasRenderingContext2D, box: BoxIn, z: number, t: ViewTransform): void {
  if (box.z !== z) {
    return;
  }
  const corner = voxelToCanvas({ y: box.y_min, x: box.x_min }, t);
  ctx.strokeStyle = "#ffd23b";
  ctx.lineWidth = 2;
  ctx.strokeRect(
    corner.px,
    corner.py,
    (box.x_max - box.x_min) * t.scale,
    (box.y_max - box.y_min) * t.scale,
  );
}
