import { buildRenderUrl, fetchInfo, ServerInfo } from "./api.js";
import { integerGridViewpoints, padToViewpoint, viewpointToPad, ViewRanges } from "./pad.js";
import { createViewerCore, Frame, ViewerCore } from "./viewer.js";

const PAD_SIZE = 280;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function drawPad(canvas: HTMLCanvasElement, ranges: ViewRanges, u: number, v: number) {
  const ctx = canvas.getContext("2d")!;
  ctx.fillStyle = "#14161a";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#3a3f46";
  ctx.strokeRect(0.5, 0.5, canvas.width - 1, canvas.height - 1);
  ctx.fillStyle = "#6d7680";
  for (const vp of integerGridViewpoints(ranges)) {
    const p = viewpointToPad(vp.u, vp.v, canvas.width, canvas.height, ranges);
    const original = Math.abs(vp.u) <= 2 && Math.abs(vp.v) <= 2;
    ctx.beginPath();
    ctx.arc(p.x, p.y, original ? 3 : 1.5, 0, Math.PI * 2);
    ctx.fill();
  }
  const knob = viewpointToPad(u, v, canvas.width, canvas.height, ranges);
  ctx.fillStyle = "#e8b339";
  ctx.beginPath();
  ctx.arc(knob.x, knob.y, 6, 0, Math.PI * 2);
  ctx.fill();
}

function showFrame(frame: Frame) {
  const lum = el<HTMLImageElement>("view-lum");
  const dep = el<HTMLImageElement>("view-depth");
  const setImage = (img: HTMLImageElement, blob: unknown) => {
    const old = img.dataset.url;
    const url = URL.createObjectURL(blob as Blob);
    img.src = url;
    img.dataset.url = url;
    if (old) URL.revokeObjectURL(old);
  };
  if (frame.luminance !== undefined) setImage(lum, frame.luminance);
  if (frame.depth !== undefined) setImage(dep, frame.depth);
  lum.style.display = frame.mode === "depth" ? "none" : "";
  dep.style.display = frame.mode === "luminance" ? "none" : "";
  el<HTMLSpanElement>("readout").textContent =
    `u=${frame.u.toFixed(2)}  v=${frame.v.toFixed(2)}  [${frame.mode}]`;
}

async function requestPng(base: string, u: number, v: number, depth: boolean,
                          signal: AbortSignal): Promise<Blob> {
  const resp = await fetch(buildRenderUrl(base, u, v, depth), { signal });
  if (!resp.ok) throw new Error(`render failed: HTTP ${resp.status}`);
  return await resp.blob();
}

function wirePad(core: ViewerCore, canvas: HTMLCanvasElement, ranges: ViewRanges) {
  let dragging = false;
  const steerTo = (ev: PointerEvent) => {
    const rect = canvas.getBoundingClientRect();
    const vp = padToViewpoint(ev.clientX - rect.left, ev.clientY - rect.top,
                              rect.width, rect.height, ranges);
    const clamped = core.steer(vp.u, vp.v);
    drawPad(canvas, ranges, clamped.u, clamped.v);
  };
  canvas.addEventListener("pointerdown", (ev) => {
    dragging = true;
    canvas.setPointerCapture(ev.pointerId);
    steerTo(ev);
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (dragging) steerTo(ev);
  });
  canvas.addEventListener("pointerup", () => {
    dragging = false;
  });
}

async function connect(base: string) {
  const banner = el<HTMLDivElement>("banner");
  let info: ServerInfo;
  try {
    info = await fetchInfo(base);
  } catch (err) {
    banner.textContent = `cannot reach render service: ${(err as Error).message}`;
    banner.style.display = "";
    return;
  }
  banner.style.display = "none";
  const ranges: ViewRanges = { u: info.u_range, v: info.v_range };
  el<HTMLSpanElement>("ranges").textContent =
    `${info.W}x${info.H}px, u in [${info.u_range[0]}, ${info.u_range[1]}], ` +
    `v in [${info.v_range[0]}, ${info.v_range[1]}], t in [${info.t_min}, ${info.t_max}]`;

  const canvas = el<HTMLCanvasElement>("pad");
  canvas.width = canvas.height = PAD_SIZE;
  const core = createViewerCore({
    ranges,
    request: (u, v, depth, signal) => requestPng(base, u, v, depth, signal),
    display: showFrame,
  });
  wirePad(core, canvas, ranges);
  el<HTMLButtonElement>("mode").addEventListener("click", () => {
    const mode = core.toggleDepth();
    el<HTMLButtonElement>("mode").textContent = `mode: ${mode}`;
  });
  drawPad(canvas, ranges, 0, 0);
  core.steer(0, 0);
}

const base = "";
el<HTMLButtonElement>("retry").addEventListener("click", () => void connect(base));
void connect(base);
