/**
 * Side-by-side comparison of finished prompts, plus the shared viewport
 * model that keeps pan/zoom synchronized across every panel.
 */

import type { BoxOut, TimingMs } from './api.js';
import type { PromptEntry, SessionState } from './state.js';

export interface ComparePanel {
  readonly entryId: number;
  readonly prompt: string;
  readonly threshold: number;
  readonly mode: string;
  /** Score of the top box (panels come from successful entries only). */
  readonly score: number;
  readonly timingMs: TimingMs;
  readonly mask: string;
  readonly boxes: readonly BoxOut[];
}

export function comparableEntries(state: SessionState): PromptEntry[] {
  return state.history.filter((e) => e.status === 'done');
}

/** The compare control stays disabled until two prompts have results. */
export function canCompare(state: SessionState): boolean {
  return comparableEntries(state).length >= 2;
}

export function buildPanels(state: SessionState, ids: readonly number[]): ComparePanel[] {
  if (ids.length < 2) {
    throw new RangeError(`comparison needs at least 2 entries, got ${ids.length}`);
  }
  return ids.map((id) => {
    const entry = state.history.find((e) => e.id === id);
    if (entry === undefined) {
      throw new Error(`no history entry ${id}`);
    }
    if (entry.status !== 'done' || entry.response === null) {
      throw new Error(`history entry ${id} has no result to compare`);
    }
    return {
      entryId: entry.id,
      prompt: entry.prompt,
      threshold: entry.threshold,
      mode: entry.mode,
      score: entry.response.boxes[0]?.score ?? 0,
      timingMs: entry.response.timing_ms,
      mask: entry.response.mask,
      boxes: entry.response.boxes,
    };
  });
}

// -- shared pan/zoom ---------------------------------------------------

const MIN_SCALE = 0.25;
const MAX_SCALE = 16;

/** screen = world * scale + offset; one instance drives all panels. */
export interface Viewport {
  readonly scale: number;
  readonly offsetX: number;
  readonly offsetY: number;
}

export function identityViewport(): Viewport {
  return { scale: 1, offsetX: 0, offsetY: 0 };
}

export function panViewport(v: Viewport, dx: number, dy: number): Viewport {
  return { scale: v.scale, offsetX: v.offsetX + dx, offsetY: v.offsetY + dy };
}

/** Zoom by `factor` keeping the screen point (ax, ay) over the same pixel. */
export function zoomViewport(v: Viewport, ax: number, ay: number, factor: number): Viewport {
  const scale = Math.min(MAX_SCALE, Math.max(MIN_SCALE, v.scale * factor));
  const applied = scale / v.scale;
  return {
    scale,
    offsetX: ax - (ax - v.offsetX) * applied,
    offsetY: ay - (ay - v.offsetY) * applied,
  };
}

export function toScreen(v: Viewport, x: number, y: number): [number, number] {
  return [x * v.scale + v.offsetX, y * v.scale + v.offsetY];
}

export function toWorld(v: Viewport, sx: number, sy: number): [number, number] {
  return [(sx - v.offsetX) / v.scale, (sy - v.offsetY) / v.scale];
}
