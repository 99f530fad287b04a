/** DOM wiring: connects the controls and canvas to the API client.
 *
 * State lives in a single `AppState` updated through the pure reducer; every
 * dispatch re-renders. Slice images are cached per `(volume, z)` so scrubbing
 * through slices does not re-fetch.
 */

import * as api from "./api.js";
import { canvasToVoxel, dragToBox, type ViewTransform } from "./coords.js";
import { initialState, reduce, type Action, type AppState } from "./state.js";
import { drawBox, drawOverlay, drawPoints, drawSlice } from "./viewer.js";

const MAX_CANVAS_EDGE = 512;

function element<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (found === null) {
    throw new Error(`missing element #${id}`);
  }
  return found as T;
}

const canvas = element<HTMLCanvasElement>("slice-canvas");
const volumeSelect = element<HTMLSelectElement>("volume-select");
const uploadInput = element<HTMLInputElement>("upload-input");
const sliceSlider = element<HTMLInputElement>("slice-slider");
const sliceLabel = element<HTMLSpanElement>("slice-label");
const modeSelect = element<HTMLSelectElement>("mode-select");
const instructionInput = element<HTMLTextAreaElement>("instruction-input");
const runButton = element<HTMLButtonElement>("run-button");
const chatInput = element<HTMLInputElement>("chat-input");
const chatButton = element<HTMLButtonElement>("chat-button");
const clearButton = element<HTMLButtonElement>("clear-button");
const overlayToggle = element<HTMLInputElement>("overlay-toggle");
const statusLine = element<HTMLParagraphElement>("status-line");
const answerBox = element<HTMLPreElement>("answer-box");
const diceList = element<HTMLUListElement>("dice-list");
const healthBadge = element<HTMLSpanElement>("health-badge");

let state: AppState = initialState();
const imageCache = new Map<string, HTMLImageElement>();

function dispatch(action: Action): void {
  state = reduce(state, action);
  render();
}

function transform(): ViewTransform | null {
  if (state.shape === null) {
    return null;
  }
  const [, ydim, xdim] = state.shape;
  const scale = Math.max(1, Math.floor(MAX_CANVAS_EDGE / Math.max(ydim, xdim)));
  return { scale, ydim, xdim };
}

function sliceImage(volumeId: string, z: number): HTMLImageElement {
  const key = `${volumeId}/${z}`;
  let image = imageCache.get(key);
  if (image === undefined) {
    image = new Image();
    image.onload = render;
    image.src = api.sliceImageUrl(volumeId, z);
    imageCache.set(key, image);
  }
  return image;
}

function render(): void {
  const t = transform();
  sliceSlider.disabled = state.shape === null;
  runButton.disabled = state.busy || state.volumeId === null;
  chatButton.disabled = state.busy || state.volumeId === null;
  overlayToggle.checked = state.overlayVisible;
  modeSelect.value = state.mode;
  if (state.shape !== null) {
    sliceSlider.max = String(state.shape[0] - 1);
    sliceSlider.value = String(state.z);
    sliceLabel.textContent = `slice ${state.z} / ${state.shape[0] - 1}`;
  } else {
    sliceLabel.textContent = "no volume";
  }

  statusLine.textContent = state.busy ? "working…" : (state.error ?? "ready");
  statusLine.classList.toggle("error", state.error !== null);
  answerBox.textContent = state.lastText;

  diceList.replaceChildren();
  if (state.dicePerClass !== null) {
    for (const [name, value] of Object.entries(state.dicePerClass).sort()) {
      const item = document.createElement("li");
      item.textContent = `${name}: ${value.toFixed(3)}`;
      diceList.appendChild(item);
    }
  }

  const ctx = canvas.getContext("2d");
  if (ctx === null || t === null || state.volumeId === null || state.shape === null) {
    return;
  }
  canvas.width = t.xdim * t.scale;
  canvas.height = t.ydim * t.scale;
  const image = sliceImage(state.volumeId, state.z);
  if (image.complete && image.naturalWidth > 0) {
    drawSlice(ctx, image, t);
  }
  if (state.overlayVisible && state.overlay !== null) {
    drawOverlay(ctx, state.overlay, state.shape, state.z, t);
  }
  drawPoints(ctx, state.draft.points, state.z, t);
  if (state.draft.box !== null) {
    drawBox(ctx, state.draft.box, state.z, t);
  }
}

async function refreshVolumeList(selected: string | null): Promise<void> {
  const ids = await api.listVolumes();
  volumeSelect.replaceChildren();
  for (const id of ids) {
    const option = document.createElement("option");
    option.value = id;
    option.textContent = id;
    volumeSelect.appendChild(option);
  }
  if (selected !== null) {
    volumeSelect.value = selected;
  }
}

async function selectVolume(volumeId: string): Promise<void> {
  try {
    const info = await api.volumeInfo(volumeId);
    dispatch({ kind: "volume-loaded", volumeId: info.volume_id, shape: info.shape, classes: info.classes });
    instructionInput.placeholder =
      info.classes.length > 0
        ? `e.g. Segment the ${info.classes[0]}.`
        : "e.g. Segment the lesion.";
  } catch (err) {
    dispatch({ kind: "request-failed", message: String(err) });
  }
}

function canvasPosition(event: MouseEvent): { px: number; py: number } {
  const rect = canvas.getBoundingClientRect();
  return { px: event.clientX - rect.left, py: event.clientY - rect.top };
}

let dragStart: { px: number; py: number } | null = null;

canvas.addEventListener("mousedown", (event) => {
  dragStart = canvasPosition(event);
});

canvas.addEventListener("mouseup", (event) => {
  const t = transform();
  if (dragStart === null || t === null || state.mode !== "interactive") {
    dragStart = null;
    return;
  }
  const dragEnd = canvasPosition(event);
  const box = dragToBox(dragStart, dragEnd, t);
  if (box !== null) {
    dispatch({ kind: "set-box", box: { z: state.z, ...box } });
  } else {
    const point = canvasToVoxel(dragEnd.px, dragEnd.py, t);
    dispatch({ kind: "add-point", point: { z: state.z, y: point.y, x: point.x } });
  }
  dragStart = null;
});

canvas.addEventListener("wheel", (event) => {
  event.preventDefault();
  dispatch({ kind: "set-slice", z: state.z + Math.sign(event.deltaY) });
});

sliceSlider.addEventListener("input", () => {
  dispatch({ kind: "set-slice", z: Number(sliceSlider.value) });
});

modeSelect.addEventListener("change", () => {
  dispatch({ kind: "set-mode", mode: modeSelect.value as api.SegmentationMode });
});

instructionInput.addEventListener("input", () => {
  dispatch({ kind: "set-instruction", text: instructionInput.value });
});

clearButton.addEventListener("click", () => {
  dispatch({ kind: "clear-prompts" });
});

overlayToggle.addEventListener("change", () => {
  dispatch({ kind: "toggle-overlay" });
});

uploadInput.addEventListener("change", async () => {
  const file = uploadInput.files?.[0];
  if (file === undefined) {
    return;
  }
  dispatch({ kind: "request-started" });
  try {
    const info = await api.uploadVolume(file, file.name);
    await refreshVolumeList(info.volume_id);
    dispatch({ kind: "volume-loaded", volumeId: info.volume_id, shape: info.shape, classes: info.classes });
  } catch (err) {
    dispatch({ kind: "request-failed", message: String(err) });
  }
});

volumeSelect.addEventListener("change", () => {
  void selectVolume(volumeSelect.value);
});

runButton.addEventListener("click", async () => {
  if (state.volumeId === null) {
    return;
  }
  const request: api.SegmentationRequest = {
    volume_id: state.volumeId,
    instruction: instructionInput.value,
    mode: state.mode,
  };
  if (state.mode === "interactive") {
    if (state.draft.points.length > 0) {
      request.points = state.draft.points;
    }
    if (state.draft.box !== null) {
      request.box = state.draft.box;
    }
    if (request.points === undefined && request.box === undefined) {
      dispatch({ kind: "request-failed", message: "interactive mode needs a point or box on the slice" });
      return;
    }
  }
  dispatch({ kind: "request-started" });
  try {
    dispatch({ kind: "segmentation-received", response: await api.segment(request) });
  } catch (err) {
    dispatch({ kind: "request-failed", message: String(err) });
  }
});

chatButton.addEventListener("click", async () => {
  if (state.volumeId === null || chatInput.value.trim() === "") {
    return;
  }
  dispatch({ kind: "request-started" });
  try {
    const reply = await api.chat(state.volumeId, chatInput.value);
    dispatch({ kind: "chat-received", answer: reply.answer });
  } catch (err) {
    dispatch({ kind: "request-failed", message: String(err) });
  }
});

async function start(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const override = params.get("api");
  if (override !== null) {
    api.configureApi({ baseUrl: override });
  }
  try {
    const status = await api.health();
    healthBadge.textContent = `service ok · ${status.checkpoint.slice(0, 8)}`;
    healthBadge.classList.add("ok");
  } catch {
    healthBadge.textContent = "service unreachable";
    healthBadge.classList.add("error");
  }
  try {
    await refreshVolumeList(null);
    if (volumeSelect.options.length > 0) {
      const first = volumeSelect.options[0];
      if (first !== undefined) {
        await selectVolume(first.value);
      }
    }
  } catch {
    // no volumes yet; upload remains available
  }
  render();
}

void start();
