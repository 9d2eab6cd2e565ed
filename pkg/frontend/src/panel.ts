/**
 * Control panel DOM: status line, fps readouts, and the render controls
 * (resolution, upscale, samples, IPD). Pure DOM construction so it runs
 * under happy-dom in tests as well as in the browser.
 */

export interface PanelCallbacks {
  onResolution?: (width: number, height: number) => void;
  onUpscale?: (factor: number) => void;
  onSamples?: (samplesPerRay: number) => void;
  onIpd?: (value: number) => void;
}

export interface Panel {
  root: HTMLElement;
  setStatus(text: string): void;
  setViewerFps(fps: number): void;
  setServerStats(fps: number | null, frameMs: number | null): void;
  setResolution(width: number, height: number): void;
  setUpscale(factor: number): void;
  setIpd(value: number): void;
  elements: {
    resolution: HTMLSelectElement;
    upscale: HTMLSelectElement;
    samples: HTMLSelectElement;
    ipd: HTMLInputElement;
  };
}

export const RESOLUTION_CHOICES: ReadonlyArray<readonly [number, number]> = [
  [320, 240],
  [640, 480],
  [1280, 720],
];

export const UPSCALE_CHOICES: readonly number[] = [1, 2, 4];
export const SAMPLE_CHOICES: readonly number[] = [8, 16, 32, 64, 128];

function labelled(doc: Document, text: string, control: HTMLElement): HTMLLabelElement {
  const label = doc.createElement("label");
  const span = doc.createElement("span");
  span.textContent = text;
  label.appendChild(span);
  label.appendChild(control);
  return label;
}

export function createPanel(doc: Document, callbacks: PanelCallbacks = {}): Panel {
  const root = doc.createElement("div");
  root.className = "panel";

  const status = doc.createElement("div");
  status.className = "status";
  status.textContent = "connecting";
  root.appendChild(status);

  const fpsLine = doc.createElement("div");
  fpsLine.className = "fps";
  fpsLine.textContent = "viewer: -- fps";
  root.appendChild(fpsLine);

  const serverLine = doc.createElement("div");
  serverLine.className = "server-fps";
  serverLine.textContent = "server: --";
  root.appendChild(serverLine);

  const resolution = doc.createElement("select");
  for (const [w, h] of RESOLUTION_CHOICES) {
    const opt = doc.createElement("option");
    opt.value = `${w}x${h}`;
    opt.textContent = `${w} x ${h}`;
    resolution.appendChild(opt);
  }
  resolution.addEventListener("change", () => {
    const [w, h] = resolution.value.split("x").map(Number);
    if (w && h) callbacks.onResolution?.(w, h);
  });
  root.appendChild(labelled(doc, "resolution", resolution));

  const upscale = doc.createElement("select");
  for (const factor of UPSCALE_CHOICES) {
    const opt = doc.createElement("option");
    opt.value = String(factor);
    opt.textContent = `${factor}x`;
    upscale.appendChild(opt);
  }
  upscale.addEventListener("change", () => {
    callbacks.onUpscale?.(Number(upscale.value));
  });
  root.appendChild(labelled(doc, "upscale", upscale));

  const samples = doc.createElement("select");
  for (const n of SAMPLE_CHOICES) {
    const opt = doc.createElement("option");
    opt.value = String(n);
    opt.textContent = String(n);
    samples.appendChild(opt);
  }
  samples.addEventListener("change", () => {
    callbacks.onSamples?.(Number(samples.value));
  });
  root.appendChild(labelled(doc, "samples per ray", samples));

  const ipd = doc.createElement("input");
  ipd.type = "number";
  ipd.min = "0";
  ipd.max = "0.2";
  ipd.step = "0.001";
  ipd.value = "0.063";
  ipd.addEventListener("change", () => {
    const value = Number(ipd.value);
    if (Number.isFinite(value) && value >= 0) callbacks.onIpd?.(value);
  });
  root.appendChild(labelled(doc, "ipd (m)", ipd));

  const help = doc.createElement("div");
  help.className = "help";
  help.textContent = "move: W/A/S/D, up/down: R/F, look: arrow keys";
  root.appendChild(help);

  return {
    root,
    setStatus: (text) => {
      status.textContent = text;
    },
    setViewerFps: (fps) => {
      fpsLine.textContent = `viewer: ${fps.toFixed(1)} fps`;
    },
    setServerStats: (fps, frameMs) => {
      serverLine.textContent =
        fps === null || frameMs === null
          ? "server: --"
          : `server: ${fps.toFixed(1)} fps, ${frameMs.toFixed(1)} ms/frame`;
    },
    setResolution: (width, height) => {
      resolution.value = `${width}x${height}`;
    },
    setUpscale: (factor) => {
      upscale.value = String(factor);
    },
    setIpd: (value) => {
      ipd.value = String(value);
    },
    elements: { resolution, upscale, samples, ipd },
  };
}
