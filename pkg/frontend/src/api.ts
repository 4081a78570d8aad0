/** Typed client for the segmentation service's JSON API. */

import type { MaskRle } from "./rle.js";

export interface VolumeInfo {
  volume_id: string;
  dims: number[];
  slice_axis: number;
  slice_count: number;
}

export interface SlicePixels {
  width: number;
  height: number;
  pixels_b64: string;
}

export interface PointPayload {
  x: number;
  y: number;
  label: "foreground" | "background";
}

export interface SegmentRequest {
  volume_id: string;
  slice: number;
  box: [number, number, number, number]; // half-open
  points: PointPayload[];
  checkpoint_id: string;
}

export interface SegmentResponse {
  mask: MaskRle;
  lowres_logit_stats: { min: number; max: number };
  cache_hit: boolean;
  latency_ms: number;
}

export class ApiError extends Error {
  constructor(readonly status: number, readonly code: string, detail: string) {
    super(`${code}: ${detail}`);
  }
}

async function parseOrThrow<T>(response: Response): Promise<T> {
  const body = await response.json();
  if (!response.ok) {
    throw new ApiError(response.status, body.error ?? "HttpError",
      body.detail ?? response.statusText);
  }
  return body as T;
}

export class SamriClient {
  constructor(readonly baseUrl: string,
              private readonly fetchImpl: typeof fetch = fetch) {}

  async health(): Promise<{ status: string; checkpoint_ids: string[] }> {
    return parseOrThrow(await this.fetchImpl(`${this.baseUrl}/v1/health`));
  }

  async uploadVolume(body: ArrayBuffer | Uint8Array): Promise<VolumeInfo> {
    const response = await this.fetchImpl(`${this.baseUrl}/v1/volumes`, {
      method: "POST",
      headers: { "content-type": "application/octet-stream" },
      body: body as BodyInit,
    });
    return parseOrThrow(response);
  }

  async getSlice(volumeId: string, index: number): Promise<SlicePixels> {
    return parseOrThrow(
      await this.fetchImpl(`${this.baseUrl}/v1/volumes/${volumeId}/slices/${index}`));
  }

  async segment(request: SegmentRequest): Promise<SegmentResponse> {
    const response = await this.fetchImpl(`${this.baseUrl}/v1/segment`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
    return parseOrThrow(response);
  }
}
