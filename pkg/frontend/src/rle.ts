/** Run-length encoded binary mask: row-major, alternating background /
 * foreground run lengths, starting with background. */

export interface MaskRle {
  dims: [number, number]; // [height, width]
  runs: number[];
}

export class RleError extends Error {}

/** Throws unless runs are non-negative integers summing to h*w. */
export function validateRle(rle: MaskRle): void {
  const [h, w] = rle.dims;
  let total = 0;
  for (const run of rle.runs) {
    if (!Number.isInteger(run) || run < 0) {
      throw new RleError(`bad run length ${run}`);
    }
    total += run;
  }
  if (total !== h * w) {
    throw new RleError(`runs sum to ${total}, expected ${h * w}`);
  }
}

/** Decode to a flat row-major boolean mask of length h*w. */
export function decodeRle(rle: MaskRle): Uint8Array {
  validateRle(rle);
  const [h, w] = rle.dims;
  const out = new Uint8Array(h * w);
  let pos = 0;
  let foreground = false;
  for (const run of rle.runs) {
    if (foreground) {
      out.fill(1, pos, pos + run);
    }
    pos += run;
    foreground = !foreground;
  }
  return out;
}

export function foregroundCount(rle: MaskRle): number {
  validateRle(rle);
  let count = 0;
  for (let i = 1; i < rle.runs.length; i += 2) {
    count += rle.runs[i];
  }
  return count;
}
