/** Mask overlay rendering: RLE -> RGBA pixel buffer (50% opacity default). */

import { decodeRle, foregroundCount, type MaskRle } from "./rle.js";

export interface Rgba {
  r: number;
  g: number;
  b: number;
  a: number; // 0..255
}

export const OVERLAY_COLOR: Rgba = { r: 64, g: 160, b: 255, a: 128 };

/** RGBA buffer (h*w*4) with `color` on foreground pixels, transparent
 * elsewhere. Validation happens before any pixel is written, so a bad RLE
 * never produces a partial draw. */
export function renderOverlay(rle: MaskRle, color: Rgba = OVERLAY_COLOR): Uint8ClampedArray<ArrayBuffer> {
  const mask = decodeRle(rle); // throws RleError on invalid runs
  const out = new Uint8ClampedArray(mask.length * 4);
  for (let i = 0; i < mask.length; i++) {
    if (mask[i]) {
      out[4 * i] = color.r;
      out[4 * i + 1] = color.g;
      out[4 * i + 2] = color.b;
      out[4 * i + 3] = color.a;
    }
  }
  return out;
}

export function overlayPixelCount(rle: MaskRle): number {
  return foregroundCount(rle);
}
