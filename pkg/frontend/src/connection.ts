/**
 * WebSocket session against the render service, with automatic reconnect.
 *
 * The socket construction and the retry scheduler are injected so tests can
 * run against fake sockets with a recorded clock; the browser entry point
 * passes the native WebSocket and setTimeout.
 */

import {
  decodeFrame,
  ipdMessage,
  manipMessage,
  parseServerMessage,
  poseMessage,
  settingsMessage,
  type DecodedFrame,
  type HelloMessage,
  type ManipUpdate,
  type Quat,
  type SettingsUpdate,
  type StatsMessage,
  type Vec3,
} from "./protocol.js";

/** The subset of the WebSocket surface the viewer actually touches. */
export interface SocketLike {
  binaryType: string;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  send(data: string): void;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;
export type Scheduler = (fn: () => void, delayMs: number) => void;

export interface ConnectionEvents {
  onHello?: (msg: HelloMessage) => void;
  onStats?: (msg: StatsMessage) => void;
  onError?: (message: string) => void;
  onFrame?: (frame: DecodedFrame) => void;
  onStatus?: (status: ConnectionStatus) => void;
}

export type ConnectionStatus = "connecting" | "open" | "closed";

export interface ConnectionOptions {
  reconnectDelayMs?: number;
  maxDelayMs?: number;
  schedule?: Scheduler;
}

export class ViewerConnection {
  readonly url: string;
  attempts = 0;

  private readonly factory: SocketFactory;
  private readonly events: ConnectionEvents;
  private readonly baseDelayMs: number;
  private readonly maxDelayMs: number;
  private readonly schedule: Scheduler;
  private socket: SocketLike | null = null;
  private open = false;
  private stopped = false;

  constructor(
    url: string,
    factory: SocketFactory,
    events: ConnectionEvents = {},
    opts: ConnectionOptions = {},
  ) {
    this.url = url;
    this.factory = factory;
    this.events = events;
    this.baseDelayMs = opts.reconnectDelayMs ?? 500;
    this.maxDelayMs = opts.maxDelayMs ?? 4000;
    this.schedule = opts.schedule ?? ((fn, ms) => setTimeout(fn, ms));
  }

  get isOpen(): boolean {
    return this.open;
  }

  connect(): void {
    if (this.stopped) return;
    this.attempts += 1;
    this.events.onStatus?.("connecting");
    const socket = this.factory(this.url);
    this.socket = socket;
    socket.binaryType = "arraybuffer";
    socket.onopen = () => {
      this.open = true;
      this.attempts = 0;
      this.events.onStatus?.("open");
    };
    socket.onmessage = (ev) => this.handleMessage(ev.data);
    socket.onerror = () => {
      // onclose follows; reconnect is handled there.
    };
    socket.onclose = () => {
      const wasOpen = this.open;
      this.open = false;
      this.socket = null;
      this.events.onStatus?.("closed");
      if (!this.stopped) {
        const delay = wasOpen ? this.baseDelayMs : this.backoffDelay();
        this.schedule(() => this.connect(), delay);
      }
    };
  }

  /** Stop for good: no further reconnect attempts. */
  close(): void {
    this.stopped = true;
    this.socket?.close();
    this.socket = null;
    this.open = false;
  }

  sendPose(position: Vec3, rotation: Quat): void {
    this.sendText(poseMessage(position, rotation));
  }

  sendIpd(value: number): void {
    this.sendText(ipdMessage(value));
  }

  sendSettings(update: SettingsUpdate): void {
    this.sendText(settingsMessage(update));
  }

  sendManip(update: ManipUpdate): void {
    this.sendText(manipMessage(update));
  }

  private sendText(text: string): void {
    if (this.open && this.socket) {
      this.socket.send(text);
    }
  }

  private backoffDelay(): number {
    const exponent = Math.min(this.attempts, 8);
    return Math.min(this.baseDelayMs * 2 ** Math.max(0, exponent - 1), this.maxDelayMs);
  }

  private handleMessage(data: unknown): void {
    try {
      if (typeof data === "string") {
        const msg = parseServerMessage(data);
        if (msg.type === "hello") this.events.onHello?.(msg);
        else if (msg.type === "stats") this.events.onStats?.(msg);
        else this.events.onError?.(msg.message);
        return;
      }
      if (data instanceof ArrayBuffer) {
        this.events.onFrame?.(decodeFrame(data));
        return;
      }
      // Node's ws hands Buffer (a Uint8Array view); normalise to ArrayBuffer.
      if (ArrayBuffer.isView(data)) {
        const view = data as Uint8Array;
        const copy = view.buffer.slice(view.byteOffset, view.byteOffset + view.byteLength);
        this.events.onFrame?.(decodeFrame(copy as ArrayBuffer));
        return;
      }
      this.events.onError?.(`unexpected message payload ${Object.prototype.toString.call(data)}`);
    } catch (e) {
      this.events.onError?.(String(e));
    }
  }
}
