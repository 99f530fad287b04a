/** Typed client for the voxelgrounder HTTP service. */

import type { RleSlice } from "./rle.js";

let baseUrl = "http://127.0.0.1:8000";

/** Point every subsequent request at a different service origin. */
export function configureApi(options: { baseUrl: string }): void {
  baseUrl = options.baseUrl.replace(/\/+$/, "");
}

export function apiBaseUrl(): string {
  return baseUrl;
}

export interface HealthResponse {
  status: string;
  checkpoint: string;
}

export interface UploadResponse {
  volume_id: string;
  shape: [number, number, number];
  classes: string[];
}

export interface PointIn {
  z: number;
  y: number;
  x: number;
}

export interface BoxIn {
  z: number;
  y_min: number;
  x_min: number;
  y_max: number;
  x_max: number;
}

export type SegmentationMode = "semantic" | "referring" | "interactive";

export interface SegmentationRequest {
  volume_id: string;
  instruction: string;
  mode: SegmentationMode;
  points?: PointIn[];
  box?: BoxIn;
}

export interface SegmentationResponse {
  text: string;
  shape: [number, number, number];
  mask_rle: RleSlice[];
  dice_vs_gt: number | null;
  dice_per_class: Record<string, number> | null;
  fingerprint: string;
}

export interface ChatResponse {
  answer: string;
}

/** Error raised for non-2xx responses, carrying the service's detail text. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(detail);
    this.name = "ApiError";
  }
}

async function asJson<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let detail = `${response.status} ${response.statusText}`;
    try {
      const body = (await response.json()) as { detail?: unknown };
      if (body.detail !== undefined) {
        detail = typeof body.detail === "string" ? body.detail : JSON.stringify(body.detail);
      }
    } catch {
      // non-JSON error body; keep the status line
    }
    throw new ApiError(response.status, detail);
  }
  return (await response.json()) as T;
}

export async function health(): Promise<HealthResponse> {
  return asJson(await fetch(`${baseUrl}/health`));
}

export async function listVolumes(): Promise<string[]> {
  const body = await asJson<{ volumes: string[] }>(await fetch(`${baseUrl}/volumes`));
  return body.volumes;
}

export async function uploadVolume(archive: Blob, filename = "volume.zip"): Promise<UploadResponse> {
  const form = new FormData();
  form.append("file", archive, filename);
  return asJson(await fetch(`${baseUrl}/volumes`, { method: "POST", body: form }));
}

export async function volumeInfo(volumeId: string): Promise<UploadResponse> {
  return asJson(await fetch(`${baseUrl}/volumes/${encodeURIComponent(volumeId)}`));
}

/** URL of the windowed grayscale PNG for one slice; usable as an `img.src`. */
export function sliceImageUrl(volumeId: string, z: number): string {
  return `${baseUrl}/volumes/${encodeURIComponent(volumeId)}/slices/${z}`;
}

export async function segment(request: SegmentationRequest): Promise<SegmentationResponse> {
  return asJson(
    await fetch(`${baseUrl}/segment`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(request),
    }),
  );
}

export async function chat(volumeId: string, question: string): Promise<ChatResponse> {
  return asJson(
    await fetch(`${baseUrl}/chat`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ volume_id: volumeId, question }),
    }),
  );
}
