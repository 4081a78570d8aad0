import { describe, expect, it } from "vitest";
import {
  canvasToImage,
  canvasToPixel,
  dragLargeEnough,
  dragToBox,
  imageToCanvas,
  type ViewTransform,
} from "../src/coords.js";

const zooms = [1, 2, 4];

describe("coordinate round trips", () => {
  it("image -> canvas -> image is identity within a pixel at zooms 1/2/4", () => {
    for (const zoom of zooms) {
      const t: ViewTransform = { zoom, offsetX: 7, offsetY: -3 };
      for (let x = 0; x < 64; x += 3) {
        for (let y = 0; y < 64; y += 5) {
          const [cx, cy] = imageToCanvas(t, x, y);
          const [bx, by] = canvasToImage(t, cx, cy);
          expect(Math.abs(bx - x)).toBeLessThan(1);
          expect(Math.abs(by - y)).toBeLessThan(1);
        }
      }
    }
  });

  it("canvas -> pixel -> canvas stays within one image pixel", () => {
    for (const zoom of zooms) {
      const t: ViewTransform = { zoom, offsetX: 0, offsetY: 0 };
      for (let cx = 0; cx < 64 * zoom; cx += 7) {
        const [px] = canvasToPixel(t, cx + 0.4, 0, 64, 64);
        const [back] = imageToCanvas(t, px, 0);
        expect(Math.abs(back - cx) / zoom).toBeLessThan(1);
      }
    }
  });
});

describe("drag to box", () => {
  it("full-canvas drag covers the full image", () => {
    const t: ViewTransform = { zoom: 2, offsetX: 0, offsetY: 0 };
    expect(dragToBox(t, [0, 0], [128, 128], 64, 64)).toEqual([0, 0, 64, 64]);
  });

  it("2x zoom halves drag coordinates", () => {
    const t: ViewTransform = { zoom: 2, offsetX: 0, offsetY: 0 };
    expect(dragToBox(t, [10, 10], [50, 50], 64, 64)).toEqual([5, 5, 25, 25]);
  });

  it("reversed drags normalize and clamp", () => {
    const t: ViewTransform = { zoom: 1, offsetX: 0, offsetY: 0 };
    expect(dragToBox(t, [30, 40], [10, 20], 64, 64)).toEqual([10, 20, 30, 40]);
    expect(dragToBox(t, [-5, -5], [70, 70], 64, 64)).toEqual([0, 0, 64, 64]);
  });

  it("degenerate boxes are widened to one pixel", () => {
    const t: ViewTransform = { zoom: 1, offsetX: 0, offsetY: 0 };
    const [x0, y0, x1, y1] = dragToBox(t, [5, 5], [5, 5], 64, 64);
    expect(x1).toBeGreaterThan(x0);
    expect(y1).toBeGreaterThan(y0);
  });

  it("sub-threshold drags are rejected", () => {
    expect(dragLargeEnough([0, 0], [1, 9])).toBe(false);
    expect(dragLargeEnough([0, 0], [9, 1])).toBe(false);
    expect(dragLargeEnough([0, 0], [2, 2])).toBe(true);
  });
});
