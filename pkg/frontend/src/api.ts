/**
 * Thin client for the segmentation service. One request shape in, one
 * discriminated outcome out; no retries, no caching, no model logic.
 *
 * The service contract: multipart POST /api/segment with fields `image`,
 * `prompt`, `threshold`, `mode`. Errors come back as structured JSON
 * {error, detail}; 422 additionally carries `best_score` when every box
 * fell below the threshold.
 */

export type Mode = 'best' | 'all';

export interface BoxOut {
  x_min: number;
  y_min: number;
  x_max: number;
  y_max: number;
  score: number;
  phrase: string;
}

export interface TimingMs {
  detect: number;
  segment: number;
  total: number;
}

export interface ModelInfo {
  detector: string;
  masker: string;
  checkpoint: string | null;
}

export interface SegmentResponse {
  boxes: BoxOut[];
  /** Base64-encoded PNG, single channel, nonzero = foreground. */
  mask: string;
  timing_ms: TimingMs;
  model_info: ModelInfo;
}

export interface HealthResponse {
  status: string;
  backends: string[];
}

export interface SegmentParams {
  prompt: string;
  threshold: number;
  mode: Mode;
}

export type SegmentOutcome =
  | { kind: 'ok'; response: SegmentResponse }
  | { kind: 'no_detection'; bestScore: number | null; detail: string }
  | { kind: 'error'; status: number; error: string; detail: string }
  | { kind: 'network'; message: string };

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly base: string = '',
    private readonly fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  /**
   * Submit one segmentation request. Never throws: transport failures
   * surface as {kind: 'network'} so the caller can offer a retry.
   */
  async segment(image: Blob, filename: string, params: SegmentParams): Promise<SegmentOutcome> {
    const form = new FormData();
    form.append('image', image, filename);
    form.append('prompt', params.prompt);
    form.append('threshold', String(params.threshold));
    form.append('mode', params.mode);

    let resp: Response;
    try {
      resp = await this.fetchImpl(`${this.base}/api/segment`, { method: 'POST', body: form });
    } catch (err) {
      return { kind: 'network', message: err instanceof Error ? err.message : String(err) };
    }

    let body: unknown;
    try {
      body = await resp.json();
    } catch {
      return {
        kind: 'error',
        status: resp.status,
        error: 'bad_payload',
        detail: 'service response was not JSON',
      };
    }

    if (resp.ok) {
      return { kind: 'ok', response: body as SegmentResponse };
    }
    const errBody = body as { error?: string; detail?: string; best_score?: number | null };
    if (resp.status === 422) {
      return {
        kind: 'no_detection',
        bestScore: errBody.best_score ?? null,
        detail: errBody.detail ?? '',
      };
    }
    return {
      kind: 'error',
      status: resp.status,
      error: errBody.error ?? 'unknown',
      detail: errBody.detail ?? '',
    };
  }

  async health(): Promise<HealthResponse | null> {
    try {
      const resp = await this.fetchImpl(`${this.base}/api/health`);
      if (!resp.ok) return null;
      return (await resp.json()) as HealthResponse;
    } catch {
      return null;
    }
  }
}
