/** Browser wiring: load a volume, scroll slices, drag boxes, click points,
 * composite mask overlays. Logic lives in the imported modules; this file
 * only binds DOM events. */

import { SamriClient } from "./api.js";
import { canvasToPixel, dragLargeEnough, dragToBox, type ViewTransform } from "./coords.js";
import { renderOverlay } from "./overlay.js";
import { RleError, type MaskRle } from "./rle.js";
import { AnnotationSession } from "./state.js";

interface Elements {
  canvas: HTMLCanvasElement;
  file: HTMLInputElement;
  slice: HTMLInputElement;
  label: HTMLSelectElement;
  undo: HTMLButtonElement;
  redo: HTMLButtonElement;
  status: HTMLElement;
}

function grabElements(): Elements {
  const byId = <T extends HTMLElement>(id: string) =>
    document.getElementById(id) as T;
  return {
    canvas: byId("view"),
    file: byId("volume-file"),
    slice: byId("slice-index"),
    label: byId("point-label"),
    undo: byId("undo"),
    redo: byId("redo"),
    status: byId("status"),
  };
}

export async function boot(baseUrl: string): Promise<void> {
  const el = grabElements();
  const client = new SamriClient(baseUrl);
  const health = await client.health();
  const checkpointId = health.checkpoint_ids[0];
  el.status.textContent = `ready (checkpoint ${checkpointId})`;

  let session: AnnotationSession | null = null;
  let width = 0;
  let height = 0;
  let slicePixels: Uint8ClampedArray<ArrayBuffer> | null = null;
  const view: ViewTransform = { zoom: 4, offsetX: 0, offsetY: 0 };

  const ctx = el.canvas.getContext("2d")!;

  function redraw(mask: MaskRle | null): void {
    if (!slicePixels) {
      return;
    }
    const image = new ImageData(slicePixels, width, height);
    const off = new OffscreenCanvas(width, height);
    const offCtx = off.getContext("2d")!;
    offCtx.putImageData(image, 0, 0);
    if (mask) {
      try {
        const overlay = new ImageData(renderOverlay(mask), width, height);
        const layer = new OffscreenCanvas(width, height);
        layer.getContext("2d")!.putImageData(overlay, 0, 0);
        offCtx.drawImage(layer, 0, 0);
      } catch (error) {
        if (error instanceof RleError) {
          el.status.textContent = `bad mask payload: ${error.message}`;
          return; // no partial draw
        }
        throw error;
      }
    }
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, el.canvas.width, el.canvas.height);
    ctx.drawImage(off, view.offsetX, view.offsetY,
      width * view.zoom, height * view.zoom);
  }

  async function loadSlice(index: number): Promise<void> {
    if (!session) {
      return;
    }
    const slice = await client.getSlice(session.volumeId, index);
    width = slice.width;
    height = slice.height;
    const gray = Uint8Array.from(atob(slice.pixels_b64), (c) => c.charCodeAt(0));
    slicePixels = new Uint8ClampedArray(width * height * 4);
    for (let i = 0; i < gray.length; i++) {
      slicePixels[4 * i] = slicePixels[4 * i + 1] = slicePixels[4 * i + 2] = gray[i];
      slicePixels[4 * i + 3] = 255;
    }
    session.sliceIndex = index;
    redraw(null);
  }

  el.file.addEventListener("change", async () => {
    const file = el.file.files?.[0];
    if (!file) {
      return;
    }
    const info = await client.uploadVolume(await file.arrayBuffer());
    session = new AnnotationSession(client, info.volume_id, 0, checkpointId);
    session.onMask = (mask, response) => {
      el.status.textContent = `mask in ${response.latency_ms.toFixed(0)} ms`;
      redraw(mask);
    };
    session.onError = (error) => {
      el.status.textContent = String(error);
    };
    el.slice.max = String(info.slice_count - 1);
    el.slice.value = "0";
    await loadSlice(0);
  });

  el.slice.addEventListener("change", () => void loadSlice(Number(el.slice.value)));
  el.undo.addEventListener("click", () => void session?.undo());
  el.redo.addEventListener("click", () => void session?.redo());

  let dragStart: [number, number] | null = null;
  el.canvas.addEventListener("mousedown", (event) => {
    dragStart = [event.offsetX, event.offsetY];
  });
  el.canvas.addEventListener("mouseup", (event) => {
    if (!session || !dragStart) {
      return;
    }
    const dragEnd: [number, number] = [event.offsetX, event.offsetY];
    if (dragLargeEnough(dragStart, dragEnd)) {
      void session.drawBox(dragToBox(view, dragStart, dragEnd, width, height));
    } else if (session.buildRequest() !== null) {
      const [x, y] = canvasToPixel(view, dragEnd[0], dragEnd[1], width, height);
      const label = el.label.value === "background" ? "background" : "foreground";
      void session.addPoint(x, y, label);
    } else {
      el.status.textContent = "drag a box first";
    }
    dragStart = null;
  });
}
