/** Pure application state and reducer for the viewer UI.
 *
 * All UI transitions funnel through `reduce`, which never mutates its input;
 * DOM code dispatches actions and re-renders from the returned state. Keeping
 * this pure makes every interaction testable without a browser.
 */

import type { BoxIn, PointIn, SegmentationMode, SegmentationResponse } from "./api.js";
import { decodeMask } from "./rle.js";

export interface PromptDraft {
  points: PointIn[];
  box: BoxIn | null;
}

export interface AppState {
  volumeId: string | null;
  shape: [number, number, number] | null;
  classes: string[];
  z: number;
  mode: SegmentationMode;
  instruction: string;
  draft: PromptDraft;
  /** Decoded z-major binary mask volume from the last segmentation. */
  overlay: Uint8Array | null;
  overlayVisible: boolean;
  lastText: string;
  dicePerClass: Record<string, number> | null;
  busy: boolean;
  error: string | null;
}

export type Action =
  | { kind: "volume-loaded"; volumeId: string; shape: [number, number, number]; classes: string[] }
  | { kind: "set-slice"; z: number }
  | { kind: "set-mode"; mode: SegmentationMode }
  | { kind: "set-instruction"; text: string }
  | { kind: "add-point"; point: PointIn }
  | { kind: "set-box"; box: BoxIn }
  | { kind: "clear-prompts" }
  | { kind: "toggle-overlay" }
  | { kind: "request-started" }
  | { kind: "segmentation-received"; response: SegmentationResponse }
  | { kind: "chat-received"; answer: string }
  | { kind: "request-failed"; message: string };

const EMPTY_DRAFT: PromptDraft = { points: [], box: null };

export function initialState(): AppState {
  return {
    volumeId: null,
    shape: null,
    classes: [],
    z: 0,
    mode: "semantic",
    instruction: "",
    draft: EMPTY_DRAFT,
    overlay: null,
    overlayVisible: true,
    lastText: "",
    dicePerClass: null,
    busy: false,
    error: null,
  };
}

function clampSlice(z: number, shape: [number, number, number] | null): number {
  if (shape === null) {
    return 0;
  }
  return Math.min(Math.max(Math.round(z), 0), shape[0] - 1);
}

export function reduce(state: AppState, action: Action): AppState {
  switch (action.kind) {
    case "volume-loaded":
      return {
        ...initialState(),
        volumeId: action.volumeId,
        shape: action.shape,
        classes: action.classes,
        z: Math.floor(action.shape[0] / 2),
        mode: state.mode,
        instruction: state.instruction,
        overlayVisible: state.overlayVisible,
      };
    case "set-slice":
      return { ...state, z: clampSlice(action.z, state.shape) };
    case "set-mode":
      return { ...state, mode: action.mode, draft: EMPTY_DRAFT };
    case "set-instruction":
      return { ...state, instruction: action.text };
    case "add-point":
      return { ...state, draft: { ...state.draft, points: [...state.draft.points, action.point] } };
    case "set-box":
      return { ...state, draft: { ...state.draft, box: action.box } };
    case "clear-prompts":
      return { ...state, draft: EMPTY_DRAFT };
    case "toggle-overlay":
      return { ...state, overlayVisible: !state.overlayVisible };
    case "request-started":
      return { ...state, busy: true, error: null };
    case "segmentation-received":
      return {
        ...state,
        busy: false,
        error: null,
        overlay: decodeMask(action.response.mask_rle, action.response.shape),
        lastText: action.response.text,
        dicePerClass: action.response.dice_per_class,
      };
    case "chat-received":
      return { ...state, busy: false, error: null, lastText: action.answer };
    case "request-failed":
      return { ...state, busy: false, error: action.message };
  }
}
