/**
 * Wire protocol shared with the render service.
 *
 * Binary server->client frames: a 24-byte little-endian header
 * (magic "NGFR", u32 frame id, u8 eye, u16 width, u16 height, u8 upscale,
 * u8 encoding, 1 pad byte, u64 timestamp in microseconds) followed by the
 * payload: raw rgb8 rows (encoding 0) or a PNG file (encoding 1).
 *
 * Text client->server control messages are JSON objects with a "type" of
 * "pose" | "ipd" | "settings" | "aabb" | "manip"; the server applies the
 * newest message of each type at the next frame boundary. The server sends
 * "hello" on connect, "stats" about once a second, and "error" replies.
 */

export const HEADER_SIZE = 24;
export const MAGIC = "NGFR";
export const EYE_LEFT = 0;
export const EYE_RIGHT = 1;
export const ENCODING_RAW = 0;
export const ENCODING_PNG = 1;
export const MAX_PAYLOAD = 64 * 1024 * 1024;

export class ProtocolError extends Error {}

export interface DecodedFrame {
  frameId: number;
  eye: number;
  width: number;
  height: number;
  upscale: number;
  encoding: number;
  timestampUs: number;
  payload: Uint8Array;
}

export function decodeFrame(buffer: ArrayBuffer): DecodedFrame {
  if (buffer.byteLength < HEADER_SIZE) {
    throw new ProtocolError(
      `${buffer.byteLength} bytes is shorter than the ${HEADER_SIZE}-byte header`,
    );
  }
  const view = new DataView(buffer);
  const magic = String.fromCharCode(
    view.getUint8(0),
    view.getUint8(1),
    view.getUint8(2),
    view.getUint8(3),
  );
  if (magic !== MAGIC) {
    throw new ProtocolError(`bad magic ${JSON.stringify(magic)}, expected ${MAGIC}`);
  }
  const frameId = view.getUint32(4, true);
  const eye = view.getUint8(8);
  const width = view.getUint16(9, true);
  const height = view.getUint16(11, true);
  const upscale = view.getUint8(13);
  const encoding = view.getUint8(14);
  const timestampUs = Number(view.getBigUint64(16, true));
  if (eye !== EYE_LEFT && eye !== EYE_RIGHT) {
    throw new ProtocolError(`bad eye ${eye}`);
  }
  if (encoding !== ENCODING_RAW && encoding !== ENCODING_PNG) {
    throw new ProtocolError(`unknown encoding ${encoding}`);
  }
  if (width * height * 3 > MAX_PAYLOAD) {
    throw new ProtocolError(`${width}x${height} frame exceeds the payload cap`);
  }
  const payload = new Uint8Array(buffer, HEADER_SIZE);
  if (encoding === ENCODING_RAW && payload.byteLength !== width * height * 3) {
    throw new ProtocolError(
      `raw payload is ${payload.byteLength} bytes, header implies ${width * height * 3}`,
    );
  }
  return { frameId, eye, width, height, upscale, encoding, timestampUs, payload };
}

/** rgb8 rows -> RGBA bytes ready for ImageData, alpha forced opaque. */
export function rgbToRgba(payload: Uint8Array, width: number, height: number) {
  const out = new Uint8ClampedArray(width * height * 4);
  for (let i = 0, j = 0; i < width * height; i++, j += 3) {
    out[i * 4] = payload[j]!;
    out[i * 4 + 1] = payload[j + 1]!;
    out[i * 4 + 2] = payload[j + 2]!;
    out[i * 4 + 3] = 255;
  }
  return out;
}

export type Vec3 = [number, number, number];
export type Quat = [number, number, number, number]; // x, y, z, w

export function poseMessage(position: Vec3, rotation: Quat): string {
  return JSON.stringify({ type: "pose", position, rotation });
}

export function ipdMessage(value: number): string {
  return JSON.stringify({ type: "ipd", value });
}

export interface SettingsUpdate {
  width?: number;
  height?: number;
  samplesPerRay?: number;
  upscale?: number;
}

export function settingsMessage(update: SettingsUpdate): string {
  const doc: Record<string, number> = {};
  if (update.width !== undefined) doc["width"] = update.width;
  if (update.height !== undefined) doc["height"] = update.height;
  if (update.samplesPerRay !== undefined) doc["samples_per_ray"] = update.samplesPerRay;
  if (update.upscale !== undefined) doc["upscale"] = update.upscale;
  return JSON.stringify({ type: "settings", ...doc });
}

export interface ManipUpdate {
  scale?: number;
  rotation?: Quat;
  translation?: Vec3;
}

export function manipMessage(update: ManipUpdate): string {
  return JSON.stringify({ type: "manip", ...update });
}

export interface HelloMessage {
  type: "hello";
  protocol: string;
  version: number;
  width: number;
  height: number;
  upscale: number;
  samples_per_ray: number;
  encoding: number;
  ipd: number;
  fov_y: number;
  aabb: { min: Vec3; max: Vec3 };
}

export interface StatsMessage {
  type: "stats";
  frame_id: number;
  frame_ms: number | null;
  fps: number | null;
  clients: number;
}

export interface ErrorMessage {
  type: "error";
  message: string;
}

export type ServerMessage = HelloMessage | StatsMessage | ErrorMessage;

export function parseServerMessage(text: string): ServerMessage {
  let doc: unknown;
  try {
    doc = JSON.parse(text);
  } catch (e) {
    throw new ProtocolError(`server text frame is not JSON: ${e}`);
  }
  if (
    typeof doc !== "object" ||
    doc === null ||
    !("type" in doc) ||
    typeof (doc as { type: unknown }).type !== "string"
  ) {
    throw new ProtocolError("server text frame has no type");
  }
  const type = (doc as { type: string }).type;
  if (type !== "hello" && type !== "stats" && type !== "error") {
    throw new ProtocolError(`unknown server message type ${type}`);
  }
  return doc as ServerMessage;
}
