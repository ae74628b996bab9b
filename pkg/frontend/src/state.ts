/** Pure session-state logic: strokes, balance hints, basket rules.
 *
 * The UI never computes image numerics; this module only manipulates
 * coordinates and selections that the service validates again.
 */

import type { MarkerSetJson, Pick } from "./api.js";

export type Axis = "z" | "y" | "x";

export interface Brush {
  markerId: number;
  label: "ED" | "ET" | "NC" | "OTHER";
  size: number;
}

export interface RunEntry {
  runId: string;
  n1: number;
  n2: number;
  status: string;
  candidates: Record<string, number>;
}

export interface UiSessionState {
  sessionId: string;
  images: string[];
  imageId: string;
  modality: "FLAIR" | "T1Gd";
  axis: Axis;
  sliceIndex: number;
  extent: number;
  brush: Brush;
  /** marker id -> set of "z,y,x" voxel keys */
  strokes: Map<number, Set<string>>;
  markerLabels: Map<number, string>;
  unsaved: boolean;
  runs: RunEntry[];
  basket: Pick[];
  basketCap: number;
}

export function newState(sessionId: string, images: string[], extent: number): UiSessionState {
  return {
    sessionId,
    images,
    imageId: images[0] ?? "",
    modality: "FLAIR",
    axis: "z",
    sliceIndex: Math.floor(extent / 2),
    extent,
    brush: { markerId: 1, label: "ED", size: 2 },
    strokes: new Map(),
    markerLabels: new Map(),
    unsaved: false,
    runs: [],
    basket: [],
    basketCap: 16,
  };
}

export function voxelKey(v: [number, number, number]): string {
  return v.join(",");
}

/** Map a 2D slice-plane point to a 3D voxel for the current axis/slice. */
export function planeToVoxel(
  axis: Axis,
  sliceIndex: number,
  row: number,
  col: number,
): [number, number, number] {
  if (axis === "z") return [sliceIndex, row, col];
  if (axis === "y") return [row, sliceIndex, col];
  return [row, col, sliceIndex];
}

/** Disk of voxels around a pointer position on the current slice, clipped
 * to the image bounds. Radius in voxels; size=1 paints one voxel. */
export function rasterizeStroke(
  axis: Axis,
  sliceIndex: number,
  row: number,
  col: number,
  size: number,
  extent: number,
): [number, number, number][] {
  const out: [number, number, number][] = [];
  const r = Math.max(0, size - 1);
  for (let dr = -r; dr <= r; dr++) {
    for (let dc = -r; dc <= r; dc++) {
      if (dr * dr + dc * dc > r * r) continue;
      const rr = row + dr;
      const cc = col + dc;
      if (rr < 0 || cc < 0 || rr >= extent || cc >= extent) continue; // clip
      out.push(planeToVoxel(axis, sliceIndex, rr, cc));
    }
  }
  return out;
}

export function addStroke(state: UiSessionState, voxels: [number, number, number][]): void {
  let set = state.strokes.get(state.brush.markerId);
  if (!set) {
    set = new Set();
    state.strokes.set(state.brush.markerId, set);
    state.markerLabels.set(state.brush.markerId, state.brush.label);
  }
  for (const v of voxels) set.add(voxelKey(v));
  if (voxels.length) state.unsaved = true;
}

export function markerSizes(state: UiSessionState): Map<number, number> {
  const sizes = new Map<number, number>();
  for (const [id, set] of state.strokes) sizes.set(id, set.size);
  return sizes;
}

/** Same rule as the backend balance check: warn when max/min > 2. */
export function balanceWarning(state: UiSessionState): boolean {
  const sizes = [...markerSizes(state).values()].filter((n) => n > 0);
  if (sizes.length < 2) return false;
  return Math.max(...sizes) / Math.min(...sizes) > 2;
}

export function toMarkerBody(state: UiSessionState): MarkerSetJson {
  const markers = [...state.strokes.entries()]
    .filter(([, set]) => set.size > 0)
    .sort(([a], [b]) => a - b)
    .map(([id, set]) => ({
      id,
      label: state.markerLabels.get(id) ?? "OTHER",
      voxels: [...set].sort().map((key) => key.split(",").map(Number)),
    }));
  return { image_id: state.imageId, modality: state.modality, markers };
}

export function pickKey(p: Pick): string {
  return `${p.run}|${p.image}|${p.index}`;
}

/** Toggle a candidate in the basket; returns false when the cap blocks it. */
export function toggleBasket(state: UiSessionState, pick: Pick): boolean {
  const key = pickKey(pick);
  const at = state.basket.findIndex((p) => pickKey(p) === key);
  if (at >= 0) {
    state.basket.splice(at, 1);
    return true;
  }
  if (state.basket.length >= state.basketCap) return false;
  state.basket.push(pick);
  return true;
}
