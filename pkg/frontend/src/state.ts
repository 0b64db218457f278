/**
 * Session state: the loaded image, the settings panel, and an ordered
 * prompt history. Pure data + pure transitions; the DOM layer calls these
 * and re-renders from the returned snapshot.
 *
 * Two invariants the rest of the UI leans on:
 *  - a history entry is frozen the moment its outcome arrives, so the
 *    comparison view can trust old panels never shift under it;
 *  - the whole session is a fold over (image, ordered request list), so
 *    `replaySession` reproduces any state from its recorded requests.
 */

import type { Mode, SegmentOutcome, SegmentResponse } from './api.js';

export type EntryStatus = 'pending' | 'done' | 'no_detection' | 'failed';

export interface ImageRef {
  readonly name: string;
  readonly width: number;
  readonly height: number;
  /** data: URL used both for display and for resubmitting the file. */
  readonly dataUrl: string;
}

export interface PromptEntry {
  readonly id: number;
  readonly prompt: string;
  readonly threshold: number;
  readonly mode: Mode;
  readonly status: EntryStatus;
  readonly response: SegmentResponse | null;
  readonly bestScore: number | null;
  readonly error: string | null;
}

export interface SessionState {
  readonly image: ImageRef | null;
  readonly history: readonly PromptEntry[];
  readonly threshold: number;
  readonly mode: Mode;
  readonly overlayOpacity: number;
  readonly nextId: number;
}

export const DEFAULT_THRESHOLD = 0.3;
export const DEFAULT_OPACITY = 0.45;

export function initialState(): SessionState {
  return Object.freeze({
    image: null,
    history: Object.freeze([]) as readonly PromptEntry[],
    threshold: DEFAULT_THRESHOLD,
    mode: 'best' as Mode,
    overlayOpacity: DEFAULT_OPACITY,
    nextId: 1,
  });
}

function withPatch(state: SessionState, patch: Partial<SessionState>): SessionState {
  return Object.freeze({ ...state, ...patch });
}

/** Recursively freeze a response so nothing downstream can touch the mask. */
export function deepFreeze<T>(value: T): T {
  if (value !== null && typeof value === 'object' && !Object.isFrozen(value)) {
    Object.freeze(value);
    for (const key of Object.getOwnPropertyNames(value)) {
      deepFreeze((value as Record<string, unknown>)[key]);
    }
  }
  return value;
}

/** Loading (or clearing) the image invalidates every past result. */
export function setImage(state: SessionState, image: ImageRef | null): SessionState {
  return withPatch(state, {
    image: image === null ? null : deepFreeze({ ...image }),
    history: Object.freeze([]) as readonly PromptEntry[],
    nextId: 1,
  });
}

export function setThreshold(state: SessionState, value: number): SessionState {
  if (!Number.isFinite(value) || value <= 0 || value > 1) {
    throw new RangeError(`threshold must be in (0, 1], got ${value}`);
  }
  return withPatch(state, { threshold: value });
}

export function setMode(state: SessionState, mode: Mode): SessionState {
  return withPatch(state, { mode });
}

export function setOverlayOpacity(state: SessionState, value: number): SessionState {
  if (!Number.isFinite(value) || value < 0 || value > 1) {
    throw new RangeError(`opacity must be in [0, 1], got ${value}`);
  }
  return withPatch(state, { overlayOpacity: value });
}

/**
 * Open a new history entry for `prompt`, snapshotting the current
 * threshold and mode (so later slider moves cannot rewrite it). A retry
 * passes explicit values to reuse a failed entry's settings without
 * touching the live controls.
 */
export function beginPrompt(
  state: SessionState,
  prompt: string,
  overrides: { threshold?: number; mode?: Mode } = {},
): { state: SessionState; id: number } {
  if (state.image === null) {
    throw new Error('no image loaded');
  }
  const trimmed = prompt.trim();
  if (trimmed === '') {
    throw new Error('prompt must be nonempty');
  }
  const entry: PromptEntry = deepFreeze({
    id: state.nextId,
    prompt: trimmed,
    threshold: overrides.threshold ?? state.threshold,
    mode: overrides.mode ?? state.mode,
    status: 'pending' as EntryStatus,
    response: null,
    bestScore: null,
    error: null,
  });
  const next = withPatch(state, {
    history: Object.freeze([...state.history, entry]),
    nextId: state.nextId + 1,
  });
  return { state: next, id: entry.id };
}

/**
 * Attach the service outcome to a pending entry. The entry becomes final:
 * resolving it a second time is a bug and throws.
 */
export function resolvePrompt(
  state: SessionState,
  id: number,
  outcome: SegmentOutcome,
): SessionState {
  const index = state.history.findIndex((e) => e.id === id);
  if (index < 0) {
    throw new Error(`no history entry ${id}`);
  }
  const entry = state.history[index];
  if (entry.status !== 'pending') {
    throw new Error(`history entry ${id} is final`);
  }
  let resolved: PromptEntry;
  switch (outcome.kind) {
    case 'ok':
      resolved = { ...entry, status: 'done', response: outcome.response };
      break;
    case 'no_detection':
      resolved = { ...entry, status: 'no_detection', bestScore: outcome.bestScore };
      break;
    case 'error':
      resolved = { ...entry, status: 'failed', error: `${outcome.error}: ${outcome.detail}` };
      break;
    case 'network':
      resolved = { ...entry, status: 'failed', error: outcome.message };
      break;
  }
  const history = state.history.slice();
  history[index] = deepFreeze(resolved);
  return withPatch(state, { history: Object.freeze(history) });
}

/** One line of the request log; enough to rebuild the session. */
export interface RecordedRequest {
  readonly prompt: string;
  readonly threshold: number;
  readonly mode: Mode;
  readonly outcome: SegmentOutcome | null;
}

export function recordedRequests(state: SessionState): RecordedRequest[] {
  return state.history.map((entry) => ({
    prompt: entry.prompt,
    threshold: entry.threshold,
    mode: entry.mode,
    outcome: outcomeOf(entry),
  }));
}

function outcomeOf(entry: PromptEntry): SegmentOutcome | null {
  switch (entry.status) {
    case 'pending':
      return null;
    case 'done':
      return { kind: 'ok', response: entry.response as SegmentResponse };
    case 'no_detection':
      return { kind: 'no_detection', bestScore: entry.bestScore, detail: '' };
    case 'failed':
      return { kind: 'network', message: entry.error ?? '' };
  }
}

/**
 * Rebuild a session from its inputs. Display settings (threshold, mode)
 * end up as the last request's values, matching what the user saw.
 */
export function replaySession(
  image: ImageRef | null,
  requests: readonly RecordedRequest[],
): SessionState {
  let state = initialState();
  if (image !== null) {
    state = setImage(state, image);
  }
  for (const request of requests) {
    state = setThreshold(state, request.threshold);
    state = setMode(state, request.mode);
    const begun = beginPrompt(state, request.prompt);
    state = begun.state;
    if (request.outcome !== null) {
      state = resolvePrompt(state, begun.id, request.outcome);
    }
  }
  return state;
}
