/** Canvas <-> image-pixel coordinate mapping.
 *
 * Canvas coordinates are image coordinates scaled by an integer zoom and
 * shifted by a pan offset. Conversions keep real values; pixelation is a
 * separate explicit step so round trips stay within a pixel.
 */

export interface ViewTransform {
  zoom: number; // canvas pixels per image pixel
  offsetX: number;
  offsetY: number;
}

export function imageToCanvas(t: ViewTransform, x: number, y: number): [number, number] {
  return [x * t.zoom + t.offsetX, y * t.zoom + t.offsetY];
}

export function canvasToImage(t: ViewTransform, cx: number, cy: number): [number, number] {
  return [(cx - t.offsetX) / t.zoom, (cy - t.offsetY) / t.zoom];
}

export function clampPixel(value: number, extent: number): number {
  return Math.min(extent - 1, Math.max(0, Math.round(value)));
}

/** Canvas click -> integer image pixel, clamped into the image. */
export function canvasToPixel(
  t: ViewTransform, cx: number, cy: number, width: number, height: number,
): [number, number] {
  const [x, y] = canvasToImage(t, cx, cy);
  return [clampPixel(Math.floor(x), width), clampPixel(Math.floor(y), height)];
}

/** Canvas drag rectangle -> half-open image box [x0, y0, x1, y1]. */
export function dragToBox(
  t: ViewTransform,
  start: [number, number],
  end: [number, number],
  width: number,
  height: number,
): [number, number, number, number] {
  const [ax, ay] = canvasToImage(t, start[0], start[1]);
  const [bx, by] = canvasToImage(t, end[0], end[1]);
  const x0 = Math.max(0, Math.floor(Math.min(ax, bx)));
  const y0 = Math.max(0, Math.floor(Math.min(ay, by)));
  const x1 = Math.min(width, Math.ceil(Math.max(ax, bx)));
  const y1 = Math.min(height, Math.ceil(Math.max(ay, by)));
  return [x0, y0, Math.max(x1, x0 + 1), Math.max(y1, y0 + 1)];
}

/** Sub-threshold drags (under 2x2 canvas pixels) are ignored. */
export function dragLargeEnough(start: [number, number], end: [number, number]): boolean {
  return Math.abs(end[0] - start[0]) >= 2 && Math.abs(end[1] - start[1]) >= 2;
}
