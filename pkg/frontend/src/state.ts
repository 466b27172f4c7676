/** Headless application core.
 *
 * Owns the view state and every server interaction; the DOM layer only
 * renders this state and forwards user events. The UI never mutates scene
 * state locally: each transition round-trips through the API.
 */

import { CommandResponse, EngineClient, EngineApiError, HistoryEntry, PlanDict } from './api.js';
import { Debouncer } from './debounce.js';

export interface CommandRecord {
  command: string;
  status: 'ok' | 'error';
  plan?: PlanDict;
  error?: string;
}

export interface ViewState {
  sessionId: string | null;
  frames: number;
  frame: number;
  azimuth: number;
  elevation: number;
  radius: number;
  cameraMode: 'fixed' | 'orbit';
  history: CommandRecord[];
  lastManifest: Record<string, unknown> | null;
  lastError: string | null;
  currentImage: Uint8Array | null;
  busy: boolean;
}

export const DEFAULT_DEBOUNCE_MS = 60;

export class AppCore {
  readonly state: ViewState = {
    sessionId: null,
    frames: 1,
    frame: 0,
    azimuth: 0,
    elevation: 0,
    radius: 9,
    cameraMode: 'fixed',
    history: [],
    lastManifest: null,
    lastError: null,
    currentImage: null,
    busy: false,
  };

  private readonly debouncer: Debouncer;
  private fetchGeneration = 0;
  private abort: AbortController | null = null;
  private listeners: Array<(s: ViewState) => void> = [];

  constructor(
    private readonly client: EngineClient,
    debounceMs: number = DEFAULT_DEBOUNCE_MS,
  ) {
    this.debouncer = new Debouncer(debounceMs);
  }

  onChange(listener: (s: ViewState) => void): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const l of this.listeners) l(this.state);
  }

  async openSession(overrides: Record<string, unknown> = {}): Promise<void> {
    const created = await this.client.createSession(overrides);
    this.state.sessionId = created.id;
    this.state.frames = created.frames;
    this.state.frame = 0;
    this.notify();
  }

  /** Submit a command; empty input is rejected client-side with no request. */
  async submitCommand(text: string): Promise<CommandRecord | null> {
    const trimmed = text.trim();
    if (!trimmed) {
      this.state.lastError = 'empty command';
      this.notify();
      return null;
    }
    if (!this.state.sessionId) throw new Error('no open session');
    if (this.state.busy) return null; // one in-flight command per session
    this.state.busy = true;
    this.state.lastError = null;
    this.notify();
    let record: CommandRecord;
    try {
      const resp: CommandResponse = await this.client.command(this.state.sessionId, trimmed);
      record = { command: trimmed, status: 'ok', plan: resp.plan };
      this.state.frames = resp.frames;
      this.state.frame = Math.min(this.state.frame, this.state.frames - 1);
      this.state.lastManifest = resp.manifest;
      this.state.history.push(record);
      this.state.busy = false;
      this.notify();
      await this.refreshFrame();
    } catch (err) {
      const message = err instanceof EngineApiError ? err.message : String(err);
      record = { command: trimmed, status: 'error', error: message };
      this.state.history.push(record);
      this.state.lastError = message;
      this.state.busy = false;
      this.notify();
    }
    return record;
  }

  async undo(): Promise<void> {
    if (!this.state.sessionId) throw new Error('no open session');
    this.state.lastError = null;
    try {
      await this.client.undo(this.state.sessionId);
      this.state.history.push({ command: '<undo>', status: 'ok' });
      this.notify();
      await this.refreshFrame();
    } catch (err) {
      const message = err instanceof EngineApiError ? err.message : String(err);
      this.state.lastError = message;
      this.state.history.push({ command: '<undo>', status: 'error', error: message });
      this.notify();
    }
  }

  /** Move the playhead; out-of-range frames clamp client-side. */
  scrub(frame: number): void {
    const clamped = Math.max(0, Math.min(this.state.frames - 1, Math.round(frame)));
    this.state.frame = clamped;
    this.notify();
    this.debouncer.schedule(() => void this.refreshFrame());
  }

  orbit(azimuth: number, elevation: number, radius: number): void {
    if (radius <= 0) throw new RangeError('orbit radius must be positive');
    this.state.cameraMode = 'orbit';
    this.state.azimuth = azimuth;
    this.state.elevation = elevation;
    this.state.radius = radius;
    this.notify();
    this.debouncer.schedule(() => void this.refreshFrame());
  }

  /** Fetch the current frame; newer requests supersede in-flight ones. */
  async refreshFrame(): Promise<void> {
    if (!this.state.sessionId) return;
    const generation = ++this.fetchGeneration;
    this.abort?.abort();
    this.abort = new AbortController();
    try {
      const bytes = await this.client.fetchFrame(
        this.state.sessionId,
        this.state.frame,
        {
          cam: this.state.cameraMode,
          az: this.state.azimuth,
          el: this.state.elevation,
          r: this.state.radius,
        },
        this.abort.signal,
      );
      if (generation === this.fetchGeneration) {
        this.state.currentImage = bytes;
        this.notify();
      }
    } catch (err) {
      if ((err as Error).name === 'AbortError') return;
      if (generation !== this.fetchGeneration) return;
      this.state.lastError = err instanceof EngineApiError ? err.message : String(err);
      this.notify();
    }
  }

  async serverHistory(): Promise<HistoryEntry[]> {
    if (!this.state.sessionId) return [];
    return (await this.client.history(this.state.sessionId)).history;
  }
}
