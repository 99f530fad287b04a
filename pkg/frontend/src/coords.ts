/** Mapping between canvas pixels and voxel coordinates.
 *
 * The viewer draws a `(ydim, xdim)` slice scaled by an integer factor, so a
 * canvas pixel `(px, py)` corresponds to the fractional voxel
 * `(y, x) = (py / scale, px / scale)`. The service accepts fractional
 * coordinates but rejects anything outside `[0, dim - 1]`, so conversions
 * clamp to that closed range.
 */

export interface ViewTransform {
  /** Canvas pixels per voxel. */
  scale: number;
  /** Slice height in voxels (y extent). */
  ydim: number;
  /** Slice width in voxels (x extent). */
  xdim: number;
}

export interface VoxelPoint {
  y: number;
  x: number;
}

export interface VoxelBox {
  y_min: number;
  x_min: number;
  y_max: number;
  x_max: number;
}

function clamp(value: number, low: number, high: number): number {
  return Math.min(Math.max(value, low), high);
}

/** Convert a canvas position to an in-bounds fractional voxel coordinate. */
export function canvasToVoxel(px: number, py: number, t: ViewTransform): VoxelPoint {
  return {
    y: clamp(py / t.scale, 0, t.ydim - 1),
    x: clamp(px / t.scale, 0, t.xdim - 1),
  };
}

/** Convert a voxel coordinate back to its canvas position. */
export function voxelToCanvas(point: VoxelPoint, t: ViewTransform): { px: number; py: number } {
  return { px: point.x * t.scale, py: point.y * t.scale };
}

/** Turn a drag gesture (two canvas corners) into an ordered, in-bounds box.
 *
 * Returns `null` for degenerate drags (zero extent along either axis after
 * clamping), which the caller should treat as an accidental click.
 */
export function dragToBox(
  start: { px: number; py: number },
  end: { px: number; py: number },
  t: ViewTransform,
): VoxelBox | null {
  const a = canvasToVoxel(start.px, start.py, t);
  const b = canvasToVoxel(end.px, end.py, t);
  const box = {
    y_min: Math.min(a.y, b.y),
    x_min: Math.min(a.x, b.x),
    y_max: Math.max(a.y, b.y),
    x_max: Math.max(a.x, b.x),
  };
  if (box.y_max <= box.y_min || box.x_max <= box.x_min) {
    return null;
  }
  return box;
}
