/** Annotation session: prompt state, undo/redo history, and a serialized
 * segment-request queue (single in-flight request; later actions queue in
 * order so overlays never arrive out of order). */

import type { PointPayload, SegmentRequest, SegmentResponse } from "./api.js";
import type { MaskRle } from "./rle.js";

export interface PromptState {
  box: [number, number, number, number] | null; // half-open image box
  points: PointPayload[];
}

export interface SessionSnapshot {
  volumeId: string;
  sliceIndex: number;
  prompt: PromptState;
}

interface SegmentingClient {
  segment(request: SegmentRequest): Promise<SegmentResponse>;
}

function clonePrompt(prompt: PromptState): PromptState {
  return {
    box: prompt.box ? [...prompt.box] as PromptState["box"] : null,
    points: prompt.points.map((p) => ({ ...p })),
  };
}

export class AnnotationSession {
  private prompt: PromptState = { box: null, points: [] };
  private undoStack: PromptState[] = [];
  private redoStack: PromptState[] = [];
  private queue: SegmentRequest[] = [];
  private inFlight = false;

  lastMask: MaskRle | null = null;
  lastLatencyMs: number | null = null;
  lastResponse: SegmentResponse | null = null;
  requestLog: SegmentRequest[] = [];
  onMask: ((mask: MaskRle, response: SegmentResponse) => void) | null = null;
  onError: ((error: unknown) => void) | null = null;

  constructor(
    private readonly client: SegmentingClient,
    readonly volumeId: string,
    public sliceIndex: number,
    readonly checkpointId: string,
  ) {}

  snapshot(): SessionSnapshot {
    return {
      volumeId: this.volumeId,
      sliceIndex: this.sliceIndex,
      prompt: clonePrompt(this.prompt),
    };
  }

  serialized(): string {
    return JSON.stringify(this.snapshot());
  }

  /** Request body for the current prompt state; null when no box yet. */
  buildRequest(): SegmentRequest | null {
    if (!this.prompt.box) {
      return null;
    }
    return {
      volume_id: this.volumeId,
      slice: this.sliceIndex,
      box: [...this.prompt.box] as SegmentRequest["box"],
      points: this.prompt.points.map((p) => ({ ...p })),
      checkpoint_id: this.checkpointId,
    };
  }

  private pushHistory(): void {
    this.undoStack.push(clonePrompt(this.prompt));
    this.redoStack = [];
  }

  /** Commit a dragged box (half-open image coords); starts a fresh point set. */
  drawBox(box: [number, number, number, number]): Promise<void> {
    this.pushHistory();
    this.prompt = { box: [...box] as PromptState["box"], points: [] };
    return this.requestSegment();
  }

  /** Append a labeled refinement point; needs a committed box first. */
  addPoint(x: number, y: number, label: "foreground" | "background"): Promise<void> {
    if (!this.prompt.box) {
      return Promise.resolve();
    }
    this.pushHistory();
    this.prompt = {
      box: this.prompt.box,
      points: [...this.prompt.points, { x, y, label }],
    };
    return this.requestSegment();
  }

  /** Pop exactly one prompt action; re-segments the restored prompt set. */
  undo(): Promise<void> {
    const previous = this.undoStack.pop();
    if (previous === undefined) {
      return Promise.resolve();
    }
    this.redoStack.push(clonePrompt(this.prompt));
    this.prompt = previous;
    return this.requestSegment();
  }

  redo(): Promise<void> {
    const next = this.redoStack.pop();
    if (next === undefined) {
      return Promise.resolve();
    }
    this.undoStack.push(clonePrompt(this.prompt));
    this.prompt = next;
    return this.requestSegment();
  }

  /** Queue a request for the current state; drains strictly in order. */
  requestSegment(): Promise<void> {
    const request = this.buildRequest();
    if (request === null) {
      this.lastMask = null;
      return Promise.resolve();
    }
    this.queue.push(request);
    return this.drain();
  }

  private async drain(): Promise<void> {
    if (this.inFlight) {
      return;
    }
    this.inFlight = true;
    try {
      while (this.queue.length > 0) {
        const request = this.queue.shift()!;
        this.requestLog.push(request);
        try {
          const response = await this.client.segment(request);
          this.lastResponse = response;
          this.lastMask = response.mask;
          this.lastLatencyMs = response.latency_ms;
          this.onMask?.(response.mask, response);
        } catch (error) {
          this.onError?.(error);
        }
      }
    } finally {
      this.inFlight = false;
    }
  }

  /** Resolves after every queued request has been answered. */
  async settled(): Promise<void> {
    while (this.inFlight || this.queue.length > 0) {
      await new Promise((resolve) => setTimeout(resolve, 1));
    }
  }
}
