/** Per-slice run-length mask codec matching the service wire format.
 *
 * A slice is flattened row-major; `counts` alternate background/foreground
 * run lengths starting with background, so an all-background slice is
 * `[height * width]` and a slice that opens with foreground carries a
 * leading zero-length background run.
 */

export interface RleSlice {
  z: number;
  size: [number, number];
  counts: number[];
}

/** Decode one RLE slice to a flat `Uint8Array` of zeros and ones. */
export function decodeSlice(rle: { size: [number, number] | number[]; counts: number[] }): Uint8Array {
  const [height, width] = rle.size;
  if (height === undefined || width === undefined) {
    throw new Error(`RLE size must be [height, width], got ${JSON.stringify(rle.size)}`);
  }
  const total = rle.counts.reduce((a, b) => a + b, 0);
  if (total !== height * width) {
    throw new Error(`RLE counts sum to ${total}, expected ${height * width}`);
  }
  const flat = new Uint8Array(height * width);
  let pos = 0;
  let value = 0;
  for (const run of rle.counts) {
    if (value) {
      flat.fill(1, pos, pos + run);
    }
    pos += run;
    value ^= 1;
  }
  return flat;
}

/** Encode a flat binary slice back to RLE counts (inverse of `decodeSlice`). */
export function encodeSlice(flat: ArrayLike<number>, height: number, width: number): { size: [number, number]; counts: number[] } {
  if (flat.length !== height * width) {
    throw new Error(`slice has ${flat.length} values, expected ${height * width}`);
  }
  const counts: number[] = [];
  let value = 0;
  let run = 0;
  for (let i = 0; i < flat.length; i++) {
    const bit = flat[i]! > 0 ? 1 : 0;
    if (bit === value) {
      run += 1;
    } else {
      counts.push(run);
      value = bit;
      run = 1;
    }
  }
  if (flat.length > 0) {
    counts.push(run);
  }
  return { size: [height, width], counts };
}

/** Decode a list of per-slice RLEs into a flat z-major mask volume. */
export function decodeMask(slices: RleSlice[], shape: [number, number, number]): Uint8Array {
  const [zdim, ydim, xdim] = shape;
  const out = new Uint8Array(zdim * ydim * xdim);
  for (const item of slices) {
    if (!(item.z >= 0 && item.z < zdim)) {
      throw new Error(`slice index ${item.z} outside volume depth ${zdim}`);
    }
    const [h, w] = item.size;
    if (h !== ydim || w !== xdim) {
      throw new Error(`slice ${item.z} has size ${h}x${w}, expected ${ydim}x${xdim}`);
    }
    out.set(decodeSlice(item), item.z * ydim * xdim);
  }
  return out;
}

/** Number of foreground voxels an RLE slice encodes, without decoding it. */
export function foregroundCount(counts: number[]): number {
  let total = 0;
  for (let i = 1; i < counts.length; i += 2) {
    total += counts[i]!;
  }
  return total;
}
