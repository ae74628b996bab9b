/** Filter-studio page: scribble on slices, launch clustering runs, inspect
 * activations, assemble the first-layer filter bank. */

import { StudioApi, RunStatus } from "./api.js";
import { blendHeatmap } from "./heatmap.js";
import {
  addStroke,
  balanceWarning,
  newState,
  rasterizeStroke,
  toggleBasket,
  toMarkerBody,
  UiSessionState,
  Axis,
} from "./state.js";

const api = new StudioApi("");
const SCALE = 8; // canvas pixels per voxel

const LABEL_COLORS: Record<string, string> = {
  ED: "#4caf50",
  ET: "#2196f3",
  NC: "#f44336",
  OTHER: "#ffc107",
};

let state: UiSessionState;
let extent = 48;

function el<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

function status(text: string, isError = false): void {
  const bar = el<HTMLDivElement>("status");
  bar.textContent = text;
  bar.className = isError ? "error" : "";
}

async function refreshSlice(): Promise<void> {
  const img = new Image();
  img.src = api.sliceUrl(state.imageId, state.modality, state.axis, state.sliceIndex);
  await img.decode().catch(() => undefined);
  extent = img.naturalWidth || extent;
  state.extent = extent;
  const canvas = el<HTMLCanvasElement>("slice");
  canvas.width = extent * SCALE;
  canvas.height = extent * SCALE;
  const ctx = canvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(img, 0, 0, canvas.width, canvas.height);
  drawStrokes(ctx);
}

function drawStrokes(ctx: CanvasRenderingContext2D): void {
  for (const [id, voxels] of state.strokes) {
    ctx.fillStyle = LABEL_COLORS[state.markerLabels.get(id) ?? "OTHER"] + "b0";
    for (const key of voxels) {
      const [z, y, x] = key.split(",").map(Number);
      let row: number, col: number, on: boolean;
      if (state.axis === "z") [on, row, col] = [z === state.sliceIndex, y, x];
      else if (state.axis === "y") [on, row, col] = [y === state.sliceIndex, z, x];
      else [on, row, col] = [x === state.sliceIndex, z, y];
      if (on) ctx.fillRect(col * SCALE, row * SCALE, SCALE, SCALE);
    }
  }
}

function updateMarkerPanel(): void {
  const list = el<HTMLUListElement>("markers");
  list.innerHTML = "";
  for (const [id, voxels] of [...state.strokes.entries()].sort(([a], [b]) => a - b)) {
    const item = document.createElement("li");
    const label = state.markerLabels.get(id) ?? "OTHER";
    item.textContent = `#${id} ${label}: ${voxels.size} voxels`;
    item.style.borderLeft = `6px solid ${LABEL_COLORS[label]}`;
    list.appendChild(item);
  }
  el<HTMLSpanElement>("balance").hidden = !balanceWarning(state);
  el<HTMLSpanElement>("unsaved").hidden = !state.unsaved;
}

function canvasHandler(event: PointerEvent): void {
  if (event.buttons !== 1) return;
  const canvas = el<HTMLCanvasElement>("slice");
  const rect = canvas.getBoundingClientRect();
  const col = Math.floor(((event.clientX - rect.left) / rect.width) * extent);
  const row = Math.floor(((event.clientY - rect.top) / rect.height) * extent);
  const voxels = rasterizeStroke(
    state.axis, state.sliceIndex, row, col, state.brush.size, extent,
  );
  addStroke(state, voxels);
  updateMarkerPanel();
  void refreshSlice();
}

async function saveMarkers(): Promise<void> {
  const body = toMarkerBody(state);
  if (!body.markers.length) {
    status("nothing to save yet");
    return;
  }
  try {
    const result = await api.putMarkers(state.sessionId, body);
    state.unsaved = false;
    updateMarkerPanel();
    status(`saved ${result.voxels} marker voxels for ${state.imageId}/${state.modality}`);
  } catch (err) {
    status(`save failed: ${err} — fix and retry`, true);
  }
}

async function launchRun(n1: number, n2: number): Promise<void> {
  if (state.unsaved) {
    status("save markers before launching a run", true);
    return;
  }
  try {
    const seed = Number(el<HTMLInputElement>("seed").value) || 0;
    const { run_id } = await api.launchRun(state.sessionId, n1, n2, seed, state.modality);
    state.runs.push({ runId: run_id, n1, n2, status: "pending", candidates: {} });
    renderRuns();
    void trackRun(run_id);
  } catch (err) {
    status(`run launch failed: ${err}`, true);
  }
}

async function trackRun(runId: string): Promise<void> {
  let final: RunStatus;
  try {
    final = await api.waitRun(runId);
  } catch (err) {
    status(`${runId}: ${err}`, true);
    return;
  }
  const entry = state.runs.find((r) => r.runId === runId);
  if (entry) {
    entry.status = final.status;
    entry.candidates = final.candidates;
  }
  renderRuns();
  if (final.status === "done") renderGallery(runId, final);
  else status(`${runId} failed: ${final.error}`, true);
}

function renderRuns(): void {
  const list = el<HTMLUListElement>("runs");
  list.innerHTML = "";
  for (const run of state.runs) {
    const item = document.createElement("li");
    const total = Object.values(run.candidates).reduce((a, b) => a + b, 0);
    item.textContent = `${run.runId} (${run.n1}x${run.n2}): ${run.status}` +
      (run.status === "done" ? `, ${total} candidates` : "");
    item.className = run.status;
    list.appendChild(item);
  }
}

function renderGallery(runId: string, run: RunStatus): void {
  const gallery = el<HTMLDivElement>("gallery");
  const section = document.createElement("section");
  const heading = document.createElement("h3");
  heading.textContent = `${runId} — click to toggle into the bank`;
  section.appendChild(heading);
  const grid = document.createElement("div");
  grid.className = "grid";
  for (const [image, count] of Object.entries(run.candidates)) {
    for (let k = 0; k < count; k++) {
      const tile = document.createElement("canvas");
      tile.width = tile.height = 96;
      tile.title = `${image} candidate ${k}`;
      void drawTile(tile, runId, k, image);
      tile.addEventListener("click", () => {
        const ok = toggleBasket(state, { run: runId, image, index: k });
        if (!ok) status(`bank is capped at ${state.basketCap} filters`, true);
        tile.classList.toggle("picked", state.basket.some(
          (p) => p.run === runId && p.image === image && p.index === k,
        ));
        renderBasket();
      });
      grid.appendChild(tile);
    }
  }
  section.appendChild(grid);
  gallery.prepend(section);
}

async function drawTile(
  tile: HTMLCanvasElement, runId: string, k: number, image: string,
): Promise<void> {
  const ctx = tile.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;
  const anatomy = new Image();
  anatomy.src = api.sliceUrl(image, state.modality, state.axis, state.sliceIndex);
  await anatomy.decode().catch(() => undefined);
  ctx.drawImage(anatomy, 0, 0, tile.width, tile.height);
  const act = new Image();
  act.src = api.activationUrl(runId, k, image, state.axis, state.sliceIndex);
  await act.decode().catch(() => undefined);
  blendHeatmap(ctx, act, tile.width, tile.height);
}

function renderBasket(): void {
  const list = el<HTMLUListElement>("basket");
  list.innerHTML = "";
  for (const pick of state.basket) {
    const item = document.createElement("li");
    item.textContent = `${pick.run} ${pick.image} #${pick.index}`;
    list.appendChild(item);
  }
  el<HTMLSpanElement>("basket-count").textContent =
    `${state.basket.length}/${state.basketCap}`;
}

async function exportBank(): Promise<void> {
  try {
    await api.postBank(state.sessionId, state.basket, state.modality, state.basketCap);
    const blob = new Blob([await api.exportBank(state.sessionId, state.modality)]);
    const link = document.createElement("a");
    link.href = URL.createObjectURL(blob);
    link.download = `bank_${state.modality.toLowerCase()}.fb`;
    link.click();
    status(`exported ${state.basket.length} filters`);
  } catch (err) {
    status(`export failed: ${err}`, true);
  }
}

async function boot(): Promise<void> {
  const session = await api.createSession();
  state = newState(session.session_id, session.images, extent);
  const picker = el<HTMLSelectElement>("image");
  for (const id of session.images) {
    const option = document.createElement("option");
    option.value = option.textContent = id;
    picker.appendChild(option);
  }
  picker.addEventListener("change", () => {
    state.imageId = picker.value;
    state.strokes.clear();
    state.markerLabels.clear();
    updateMarkerPanel();
    void refreshSlice();
  });
  el<HTMLSelectElement>("modality").addEventListener("change", (e) => {
    state.modality = (e.target as HTMLSelectElement).value as "FLAIR" | "T1Gd";
    state.strokes.clear();
    state.markerLabels.clear();
    updateMarkerPanel();
    void refreshSlice();
  });
  el<HTMLSelectElement>("axis").addEventListener("change", (e) => {
    state.axis = (e.target as HTMLSelectElement).value as Axis;
    void refreshSlice();
  });
  const slider = el<HTMLInputElement>("slice-index");
  slider.addEventListener("input", () => {
    state.sliceIndex = Number(slider.value);
    el<HTMLSpanElement>("slice-label").textContent = slider.value;
    void refreshSlice();
  });
  el<HTMLInputElement>("marker-id").addEventListener("change", (e) => {
    state.brush.markerId = Number((e.target as HTMLInputElement).value);
  });
  el<HTMLSelectElement>("label").addEventListener("change", (e) => {
    state.brush.label = (e.target as HTMLSelectElement).value as never;
  });
  el<HTMLInputElement>("brush-size").addEventListener("change", (e) => {
    state.brush.size = Number((e.target as HTMLInputElement).value);
  });
  el<HTMLCanvasElement>("slice").addEventListener("pointerdown", canvasHandler);
  el<HTMLCanvasElement>("slice").addEventListener("pointermove", canvasHandler);
  el<HTMLButtonElement>("save").addEventListener("click", () => void saveMarkers());
  el<HTMLButtonElement>("run-custom").addEventListener("click", () => {
    void launchRun(
      Number(el<HTMLInputElement>("n1").value),
      Number(el<HTMLInputElement>("n2").value),
    );
  });
  // the two grid settings highlighted in the method description
  el<HTMLButtonElement>("preset-a").addEventListener("click", () => void launchRun(10, 5));
  el<HTMLButtonElement>("preset-b").addEventListener("click", () => void launchRun(10, 50));
  el<HTMLButtonElement>("export").addEventListener("click", () => void exportBank());

  state.imageId = session.images[0];
  await refreshSlice();
  slider.max = String(extent - 1);
  slider.value = String(Math.floor(extent / 2));
  state.sliceIndex = Math.floor(extent / 2);
  status(`session ${state.sessionId} ready; ${session.images.length} marked images`);
}

void boot();
