/** DOM wiring. All session logic lives in state.ts; this file renders a
 * SessionState and forwards events. Requests go through a FIFO so only
 * one is in flight at a time. */

import { ApiClient } from './api.js';
import type { Mode } from './api.js';
import {
  beginPrompt,
  initialState,
  resolvePrompt,
  setImage,
  setMode,
  setOverlayOpacity,
  setThreshold,
} from './state.js';
import type { ImageRef, PromptEntry, SessionState } from './state.js';
import { composeOverlay, decodeBase64, grayFromRgba, overlayMatchesMask } from './overlay.js';
import { buildPanels, canCompare, comparableEntries, identityViewport, panViewport, zoomViewport } from './compare.js';
import type { ComparePanel, Viewport } from './compare.js';
import { RequestQueue } from './queue.js';

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el as T;
};

const fileInput = $<HTMLInputElement>('file-input');
const promptForm = $<HTMLFormElement>('prompt-form');
const promptInput = $<HTMLInputElement>('prompt-input');
const submitBtn = $<HTMLButtonElement>('submit-btn');
const thresholdInput = $<HTMLInputElement>('threshold');
const thresholdValue = $<HTMLSpanElement>('threshold-value');
const modeSelect = $<HTMLSelectElement>('mode');
const opacityInput = $<HTMLInputElement>('opacity');
const opacityValue = $<HTMLSpanElement>('opacity-value');
const banner = $<HTMLDivElement>('banner');
const toast = $<HTMLDivElement>('toast');
const toastText = $<HTMLSpanElement>('toast-text');
const toastRetry = $<HTMLButtonElement>('toast-retry');
const queueNote = $<HTMLSpanElement>('queue-note');
const viewCanvas = $<HTMLCanvasElement>('view-canvas');
const viewerEmpty = $<HTMLDivElement>('viewer-empty');
const historyList = $<HTMLUListElement>('history-list');
const compareBtn = $<HTMLButtonElement>('compare-btn');
const compareGrid = $<HTMLDivElement>('compare-grid');
const healthNote = $<HTMLSpanElement>('health');

const api = new ApiClient('');

let session: SessionState = initialState();
let imageBlob: Blob | null = null;
let imageEl: HTMLImageElement | null = null;
let activeEntryId: number | null = null;
let viewport: Viewport = identityViewport();
const compareSelection = new Set<number>();

interface QueuedRequest {
  prompt: string;
  threshold: number;
  mode: Mode;
}

let lastFailed: QueuedRequest | null = null;

// decoded masks and tinted overlays, keyed by the entry's base64 string
const maskCache = new Map<string, { gray: Uint8Array; width: number; height: number }>();
const overlayCache = new Map<string, HTMLCanvasElement>();

function resetCaches(): void {
  maskCache.clear();
  overlayCache.clear();
}

async function decodeMask(b64: string): Promise<{ gray: Uint8Array; width: number; height: number }> {
  const hit = maskCache.get(b64);
  if (hit) return hit;
  const img = new Image();
  await new Promise<void>((resolve, reject) => {
    img.onload = () => resolve();
    img.onerror = () => reject(new Error('mask PNG failed to decode'));
    img.src = `data:image/png;base64,${b64}`;
  });
  const canvas = document.createElement('canvas');
  canvas.width = img.naturalWidth;
  canvas.height = img.naturalHeight;
  const ctx = canvas.getContext('2d')!;
  ctx.drawImage(img, 0, 0);
  const data = ctx.getImageData(0, 0, canvas.width, canvas.height);
  const entry = {
    gray: grayFromRgba(data.data, canvas.width, canvas.height),
    width: canvas.width,
    height: canvas.height,
  };
  maskCache.set(b64, entry);
  return entry;
}

async function overlayCanvasFor(b64: string, opacity: number): Promise<HTMLCanvasElement | null> {
  if (opacity === 0) return null;
  const key = `${opacity}:${b64}`;
  const hit = overlayCache.get(key);
  if (hit) return hit;
  const { gray, width, height } = await decodeMask(b64);
  const rgba = composeOverlay(gray, width, height, undefined, opacity);
  if (!overlayMatchesMask(rgba, gray)) {
    throw new Error('overlay drifted from mask foreground');
  }
  const canvas = document.createElement('canvas');
  canvas.width = width;
  canvas.height = height;
  canvas.getContext('2d')!.putImageData(new ImageData(rgba, width, height), 0, 0);
  overlayCache.set(key, canvas);
  return canvas;
}

function drawEntry(
  ctx: CanvasRenderingContext2D,
  entry: PromptEntry | null,
  overlay: HTMLCanvasElement | null,
  vp: Viewport,
): void {
  if (!imageEl) return;
  ctx.setTransform(1, 0, 0, 1, 0, 0);
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  ctx.setTransform(vp.scale, 0, 0, vp.scale, vp.offsetX, vp.offsetY);
  ctx.imageSmoothingEnabled = vp.scale < 2;
  ctx.drawImage(imageEl, 0, 0);
  if (overlay) ctx.drawImage(overlay, 0, 0);
  if (entry && entry.response) {
    ctx.lineWidth = Math.max(1, 2 / vp.scale);
    ctx.strokeStyle = '#ff8f00';
    ctx.fillStyle = '#ff8f00';
    ctx.font = `${Math.max(10, 12 / vp.scale)}px sans-serif`;
    for (const box of entry.response.boxes) {
      ctx.strokeRect(box.x_min, box.y_min, box.x_max - box.x_min, box.y_max - box.y_min);
      ctx.fillText(box.score.toFixed(3), box.x_min + 2, Math.max(10, box.y_min - 3));
    }
  }
}

async function renderViewer(): Promise<void> {
  const hasImage = session.image !== null && imageEl !== null;
  viewerEmpty.style.display = hasImage ? 'none' : 'block';
  viewCanvas.style.display = hasImage ? 'block' : 'none';
  if (!hasImage || !session.image) return;

  viewCanvas.width = session.image.width;
  viewCanvas.height = session.image.height;
  const entry = session.history.find((e) => e.id === activeEntryId) ?? null;
  let overlay: HTMLCanvasElement | null = null;
  if (entry && entry.status === 'done' && entry.response) {
    overlay = await overlayCanvasFor(entry.response.mask, session.overlayOpacity);
  }
  drawEntry(viewCanvas.getContext('2d')!, entry, overlay, identityViewport());

  if (entry && entry.status === 'no_detection') {
    const score = entry.bestScore === null ? 'none' : entry.bestScore.toFixed(4);
    banner.textContent = `no detection above threshold, best score ${score}`;
    banner.style.display = 'block';
  } else {
    banner.style.display = 'none';
  }
}

function statusLabel(entry: PromptEntry): string {
  switch (entry.status) {
    case 'pending':
      return '…';
    case 'done': {
      const score = entry.response?.boxes[0]?.score ?? 0;
      const ms = entry.response?.timing_ms.total ?? 0;
      return `score ${score.toFixed(3)} · ${ms.toFixed(1)} ms`;
    }
    case 'no_detection':
      return entry.bestScore === null
        ? 'below threshold'
        : `below threshold (best ${entry.bestScore.toFixed(3)})`;
    case 'failed':
      return 'failed';
  }
}

function renderHistory(): void {
  historyList.replaceChildren();
  for (const entry of [...session.history].reverse()) {
    const li = document.createElement('li');
    li.className = `entry ${entry.status}${entry.id === activeEntryId ? ' active' : ''}`;

    const check = document.createElement('input');
    check.type = 'checkbox';
    check.disabled = entry.status !== 'done';
    check.checked = compareSelection.has(entry.id);
    check.addEventListener('change', () => {
      if (check.checked) compareSelection.add(entry.id);
      else compareSelection.delete(entry.id);
      renderCompareControls();
    });

    const label = document.createElement('span');
    label.className = 'entry-label';
    label.textContent = `#${entry.id} "${entry.prompt}" @${entry.threshold.toFixed(2)}/${entry.mode}`;
    const status = document.createElement('span');
    status.className = 'entry-status';
    status.textContent = statusLabel(entry);

    li.append(check, label, status);
    li.addEventListener('click', (ev) => {
      if (ev.target === check) return;
      activeEntryId = entry.id;
      void render();
    });
    historyList.append(li);
  }
}

function renderCompareControls(): void {
  compareBtn.disabled = !canCompare(session);
  compareBtn.title = canCompare(session)
    ? 'compare selected results side by side'
    : 'needs at least two finished prompts';
}

function panelIds(): number[] {
  const done = comparableEntries(session).map((e) => e.id);
  const selected = done.filter((id) => compareSelection.has(id));
  return selected.length >= 2 ? selected : done.slice(-2);
}

async function renderCompare(): Promise<void> {
  if (compareGrid.style.display === 'none') return;
  let panels: ComparePanel[];
  try {
    panels = buildPanels(session, panelIds());
  } catch {
    compareGrid.style.display = 'none';
    return;
  }
  compareGrid.replaceChildren();
  for (const panel of panels) {
    const cell = document.createElement('figure');
    cell.className = 'panel';
    const canvas = document.createElement('canvas');
    canvas.width = session.image?.width ?? 0;
    canvas.height = session.image?.height ?? 0;
    attachViewportHandlers(canvas);
    const caption = document.createElement('figcaption');
    caption.textContent =
      `"${panel.prompt}" · score ${panel.score.toFixed(3)} · ` +
      `${panel.timingMs.total.toFixed(1)} ms (detect ${panel.timingMs.detect.toFixed(1)}, ` +
      `segment ${panel.timingMs.segment.toFixed(1)}) · @${panel.threshold.toFixed(2)}/${panel.mode}`;
    cell.append(canvas, caption);
    compareGrid.append(cell);

    const entry = session.history.find((e) => e.id === panel.entryId) ?? null;
    const overlay = await overlayCanvasFor(panel.mask, session.overlayOpacity);
    drawEntry(canvas.getContext('2d')!, entry, overlay, viewport);
  }
}

// Pan/zoom is shared: any panel's gesture moves the one viewport, and the
// whole grid redraws with it.
function attachViewportHandlers(canvas: HTMLCanvasElement): void {
  canvas.addEventListener('wheel', (ev) => {
    ev.preventDefault();
    const rect = canvas.getBoundingClientRect();
    const factor = ev.deltaY < 0 ? 1.2 : 1 / 1.2;
    viewport = zoomViewport(viewport, ev.clientX - rect.left, ev.clientY - rect.top, factor);
    void renderCompare();
  });
  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener('pointerdown', (ev) => {
    dragging = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
    canvas.setPointerCapture(ev.pointerId);
  });
  canvas.addEventListener('pointermove', (ev) => {
    if (!dragging) return;
    viewport = panViewport(viewport, ev.clientX - lastX, ev.clientY - lastY);
    lastX = ev.clientX;
    lastY = ev.clientY;
    void renderCompare();
  });
  canvas.addEventListener('pointerup', () => {
    dragging = false;
  });
}

function renderQueueNote(): void {
  if (!requests.busy && requests.pending === 0) {
    queueNote.textContent = '';
  } else {
    const waiting = requests.pending > 0 ? `, ${requests.pending} queued` : '';
    queueNote.textContent = `request running${waiting}`;
  }
  submitBtn.disabled = session.image === null;
}

async function render(): Promise<void> {
  renderHistory();
  renderCompareControls();
  renderQueueNote();
  await renderViewer();
  await renderCompare();
}

// -- request pipeline ---------------------------------------------------

const requests = new RequestQueue<QueuedRequest>(async (request) => {
  if (!imageBlob || !session.image) return;
  toast.style.display = 'none';

  const begun = beginPrompt(session, request.prompt, {
    threshold: request.threshold,
    mode: request.mode,
  });
  session = begun.state;
  await render();

  const outcome = await api.segment(imageBlob, session.image.name, {
    prompt: request.prompt,
    threshold: request.threshold,
    mode: request.mode,
  });
  session = resolvePrompt(session, begun.id, outcome);
  if (outcome.kind === 'ok' || outcome.kind === 'no_detection') {
    activeEntryId = begun.id;
  }
  if (outcome.kind === 'network') {
    lastFailed = request;
    toastText.textContent = `request failed: ${outcome.message}`;
    toast.style.display = 'flex';
  } else if (outcome.kind === 'error') {
    lastFailed = null;
    toastText.textContent = `service error ${outcome.status}: ${outcome.detail}`;
    toast.style.display = 'flex';
  }
  await render();
});

// -- event wiring --------------------------------------------------------

fileInput.addEventListener('change', () => {
  const file = fileInput.files?.[0];
  if (!file) return;
  const reader = new FileReader();
  reader.onload = () => {
    const dataUrl = reader.result as string;
    const img = new Image();
    img.onload = () => {
      imageEl = img;
      imageBlob = file;
      const ref: ImageRef = {
        name: file.name,
        width: img.naturalWidth,
        height: img.naturalHeight,
        dataUrl,
      };
      session = setImage(session, ref);
      activeEntryId = null;
      compareSelection.clear();
      viewport = identityViewport();
      compareGrid.style.display = 'none';
      resetCaches();
      void render();
    };
    img.src = dataUrl;
  };
  reader.readAsDataURL(file);
});

promptForm.addEventListener('submit', (ev) => {
  ev.preventDefault();
  const prompt = promptInput.value.trim();
  if (prompt === '' || session.image === null) return;
  requests.push({ prompt, threshold: session.threshold, mode: session.mode });
  renderQueueNote();
});

thresholdInput.addEventListener('input', () => {
  const value = Number(thresholdInput.value);
  session = setThreshold(session, value);
  thresholdValue.textContent = value.toFixed(2);
});

modeSelect.addEventListener('change', () => {
  session = setMode(session, modeSelect.value as Mode);
});

opacityInput.addEventListener('input', () => {
  const value = Number(opacityInput.value);
  session = setOverlayOpacity(session, value);
  opacityValue.textContent = value.toFixed(2);
  void render();
});

toastRetry.addEventListener('click', () => {
  toast.style.display = 'none';
  if (lastFailed) {
    requests.push(lastFailed);
    lastFailed = null;
  }
});

compareBtn.addEventListener('click', () => {
  compareGrid.style.display = compareGrid.style.display === 'none' ? 'grid' : 'none';
  void renderCompare();
});

void (async () => {
  const health = await api.health();
  healthNote.textContent = health
    ? `service ok · backends: ${health.backends.join(', ') || 'none loaded'}`
    : 'service unreachable';
  await render();
})();
