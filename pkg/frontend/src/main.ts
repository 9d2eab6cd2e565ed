/**
 * Browser entry point: connects to the render service, paints the stereo
 * pair onto two canvases, and wires keyboard flight plus the control panel.
 */

import {
  ViewerConnection,
  type ConnectionStatus,
  type SocketLike,
} from "./connection.js";
import { FpsMeter } from "./fpsmeter.js";
import { BoundedQueue } from "./framebuffer.js";
import { createPanel } from "./panel.js";
import { PoseController } from "./pose.js";
import {
  ENCODING_PNG,
  EYE_LEFT,
  rgbToRgba,
  type DecodedFrame,
  type Vec3,
} from "./protocol.js";

const POSE_SEND_INTERVAL_MS = 33;

function canvasFor(doc: Document, id: string): HTMLCanvasElement {
  const canvas = doc.getElementById(id);
  if (!(canvas instanceof HTMLCanvasElement)) {
    throw new Error(`missing canvas #${id}`);
  }
  return canvas;
}

async function paintFrame(canvas: HTMLCanvasElement, frame: DecodedFrame): Promise<void> {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  if (canvas.width !== frame.width || canvas.height !== frame.height) {
    canvas.width = frame.width;
    canvas.height = frame.height;
  }
  if (frame.encoding === ENCODING_PNG) {
    const blob = new Blob([frame.payload.slice()], { type: "image/png" });
    const bitmap = await createImageBitmap(blob);
    ctx.drawImage(bitmap, 0, 0);
    bitmap.close();
  } else {
    const rgba = rgbToRgba(frame.payload, frame.width, frame.height);
    ctx.putImageData(new ImageData(rgba, frame.width, frame.height), 0, 0);
  }
}

export function start(doc: Document, url: string): void {
  const leftCanvas = canvasFor(doc, "left-eye");
  const rightCanvas = canvasFor(doc, "right-eye");
  const queues = {
    left: new BoundedQueue<DecodedFrame>(2),
    right: new BoundedQueue<DecodedFrame>(2),
  };
  const meter = new FpsMeter();
  const pose = new PoseController([0, 0, 1.5]);

  const panel = createPanel(doc, {
    onResolution: (w, h) => connection.sendSettings({ width: w, height: h }),
    onUpscale: (factor) => connection.sendSettings({ upscale: factor }),
    onSamples: (n) => connection.sendSettings({ samplesPerRay: n }),
    onIpd: (value) => connection.sendIpd(value),
  });
  const mount = doc.getElementById("panel");
  mount?.appendChild(panel.root);

  const connection = new ViewerConnection(
    url,
    (u) => new WebSocket(u) as unknown as SocketLike,
    {
      onStatus: (status: ConnectionStatus) => panel.setStatus(status),
      onHello: (msg) => {
        panel.setResolution(msg.width, msg.height);
        panel.setUpscale(msg.upscale);
        panel.setIpd(msg.ipd);
        const centre = msg.aabb.min.map((lo, i) => (lo + msg.aabb.max[i]!) / 2) as Vec3;
        const span = msg.aabb.max[0]! - msg.aabb.min[0]!;
        pose.position = [centre[0], centre[1], centre[2] + 0.9 * span];
      },
      onStats: (msg) => panel.setServerStats(msg.fps, msg.frame_ms),
      onError: (message) => panel.setStatus(`error: ${message}`),
      onFrame: (frame) => {
        if (frame.eye === EYE_LEFT) {
          meter.record(performance.now());
          queues.left.push(frame);
        } else {
          queues.right.push(frame);
        }
      },
    },
  );
  connection.connect();

  doc.addEventListener("keydown", (ev) => {
    if (pose.keyDown(ev.code)) ev.preventDefault();
  });
  doc.addEventListener("keyup", (ev) => pose.keyUp(ev.code));

  let lastTick = performance.now();
  let lastPoseSend = 0;
  let painting = false;

  function loop(now: number): void {
    pose.tick((now - lastTick) / 1000);
    lastTick = now;

    if (connection.isOpen && now - lastPoseSend >= POSE_SEND_INTERVAL_MS) {
      const { position, rotation } = pose.pose();
      connection.sendPose(position, rotation);
      lastPoseSend = now;
    }

    if (!painting) {
      const left = queues.left.takeLatest();
      const right = queues.right.takeLatest();
      if (left || right) {
        painting = true;
        const jobs: Promise<void>[] = [];
        if (left) jobs.push(paintFrame(leftCanvas, left));
        if (right) jobs.push(paintFrame(rightCanvas, right));
        void Promise.all(jobs)
          .catch(() => {})
          .finally(() => {
            painting = false;
          });
      }
    }

    panel.setViewerFps(meter.fps());
    requestAnimationFrame(loop);
  }
  requestAnimationFrame(loop);
}

declare global {
  interface Window {
    __viewerAutostart?: boolean;
  }
}

if (typeof window !== "undefined" && window.__viewerAutostart !== false) {
  const params = new URLSearchParams(window.location.search);
  const url =
    params.get("ws") ?? `ws://${window.location.hostname || "localhost"}:8765`;
  window.addEventListener("DOMContentLoaded", () => start(document, url));
}
