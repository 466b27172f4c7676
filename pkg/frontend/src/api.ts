/** HTTP client for the engine service. */

export interface PlanDict {
  module: 'GEN' | 'EDIT';
  queries: Record<string, unknown>;
  provenance: string;
}

export interface CommandResponse {
  plan: PlanDict;
  version: number;
  scene_hash: string;
  manifest: Record<string, unknown>;
  frames: number;
}

export interface HistoryEntry {
  index: number;
  command: string;
  plan?: PlanDict;
  version: number;
  scene_hash: string;
}

export interface HistoryResponse {
  history: HistoryEntry[];
  versions: number;
  frames: number;
}

export interface StructuredError {
  module: string;
  code: string;
  message: string;
}

/** Error carrying the service's structured {module, code, message} payload. */
export class EngineApiError extends Error {
  readonly detail: StructuredError;

  constructor(detail: StructuredError, status: number) {
    super(`[${detail.module}/${detail.code}] ${detail.message} (HTTP ${status})`);
    this.detail = detail;
  }
}

async function parseError(resp: Response): Promise<EngineApiError> {
  let detail: StructuredError;
  try {
    detail = (await resp.json()) as StructuredError;
  } catch {
    detail = { module: 'engine-service', code: 'http_error', message: resp.statusText };
  }
  return new EngineApiError(detail, resp.status);
}

export interface CameraParams {
  cam: 'fixed' | 'orbit';
  az: number;
  el: number;
  r: number;
}

export class EngineClient {
  constructor(readonly baseUrl: string, private readonly fetchFn: typeof fetch = fetch) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, '') + path;
  }

  async createSession(overrides: Record<string, unknown> = {}): Promise<{ id: string; frames: number }> {
    const resp = await this.fetchFn(this.url('/sessions'), {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(overrides),
    });
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as { id: string; frames: number };
  }

  async command(sessionId: string, text: string): Promise<CommandResponse> {
    const resp = await this.fetchFn(this.url(`/sessions/${sessionId}/command`), {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ text }),
    });
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as CommandResponse;
  }

  async history(sessionId: string): Promise<HistoryResponse> {
    const resp = await this.fetchFn(this.url(`/sessions/${sessionId}/history`));
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as HistoryResponse;
  }

  async undo(sessionId: string): Promise<{ versions: number; scene_hash: string }> {
    const resp = await this.fetchFn(this.url(`/sessions/${sessionId}/undo`), { method: 'POST' });
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as { versions: number; scene_hash: string };
  }

  frameUrl(sessionId: string, frame: number, camera: CameraParams): string {
    const qs = new URLSearchParams({
      t: String(frame),
      cam: camera.cam,
      az: String(camera.az),
      el: String(camera.el),
      r: String(camera.r),
    });
    return this.url(`/sessions/${sessionId}/frame?${qs}`);
  }

  /** Fetch one rendered frame as PNG bytes; abortable for supersession. */
  async fetchFrame(
    sessionId: string,
    frame: number,
    camera: CameraParams,
    signal?: AbortSignal,
  ): Promise<Uint8Array> {
    const resp = await this.fetchFn(this.frameUrl(sessionId, frame, camera), { signal });
    if (!resp.ok) throw await parseError(resp);
    return new Uint8Array(await resp.arrayBuffer());
  }

  async health(): Promise<boolean> {
    try {
      const resp = await this.fetchFn(this.url('/healthz'));
      return resp.ok;
    } catch {
      return false;
    }
  }
}
