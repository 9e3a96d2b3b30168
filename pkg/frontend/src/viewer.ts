import { createRequestGate } from "./gate.js";
import { clampViewpoint, ViewRanges, Viewpoint } from "./pad.js";

export type DisplayMode = "luminance" | "depth" | "side-by-side";

const MODE_CYCLE: DisplayMode[] = ["luminance", "depth", "side-by-side"];

export function nextMode(mode: DisplayMode): DisplayMode {
  return MODE_CYCLE[(MODE_CYCLE.indexOf(mode) + 1) % MODE_CYCLE.length]!;
}

export interface RenderRequest {
  (u: number, v: number, depth: boolean, signal: AbortSignal): Promise<unknown>;
}

export interface Frame {
  u: number;
  v: number;
  luminance?: unknown;
  depth?: unknown;
  mode: DisplayMode;
}

export interface ViewerCoreOptions {
  ranges: ViewRanges;
  request: RenderRequest;
  display: (frame: Frame) => void;
  debounceMs?: number;
  schedule?: (fn: () => void, ms: number) => unknown;
  cancelScheduled?: (handle: unknown) => void;
}

export interface ViewerCore {
  steer: (u: number, v: number) => Viewpoint;
  toggleDepth: () => DisplayMode;
  viewpoint: () => Viewpoint;
  mode: () => DisplayMode;
  flush: () => Promise<void>;
  stats: () => { issued: number; inFlight: number; displayed: number };
}

/** Drag/steer state machine: debounced, aborting, latest-wins rendering.
 *
 * At most one render request is outstanding at any time: issuing a new one
 * aborts the previous controller first, and side-by-side fetches its two
 * images sequentially under the same token.
 */
export function createViewerCore(opts: ViewerCoreOptions): ViewerCore {
  const debounceMs = opts.debounceMs ?? 50;
  const schedule = opts.schedule ?? ((fn, ms) => setTimeout(fn, ms));
  const cancelScheduled = opts.cancelScheduled ?? ((h) => clearTimeout(h as number));
  const gate = createRequestGate();

  let current: Viewpoint = clampViewpoint(0, 0, opts.ranges);
  let mode: DisplayMode = "luminance";
  let pending: unknown = null;
  let controller: AbortController | null = null;
  let issued = 0;
  let inFlight = 0;
  let displayed = 0;
  let settled: Promise<void> = Promise.resolve();

  async function run(token: number, target: Viewpoint, wanted: DisplayMode) {
    controller?.abort();
    controller = new AbortController();
    const signal = controller.signal;
    const frame: Frame = { u: target.u, v: target.v, mode: wanted };
    try {
      if (wanted === "luminance" || wanted === "side-by-side") {
        issued += 1;
        inFlight += 1;
        try {
          frame.luminance = await opts.request(target.u, target.v, false, signal);
        } finally {
          inFlight -= 1;
        }
      }
      if (!gate.isLatest(token)) return;
      if (wanted === "depth" || wanted === "side-by-side") {
        issued += 1;
        inFlight += 1;
        try {
          frame.depth = await opts.request(target.u, target.v, true, signal);
        } finally {
          inFlight -= 1;
        }
      }
    } catch (err) {
      if ((err as Error | undefined)?.name === "AbortError") return;
      throw err;
    }
    // show only the response that still matches the current state
    if (gate.isLatest(token)) {
      displayed += 1;
      opts.display(frame);
    }
  }

  function requestRender() {
    // run() executes synchronously up to its first await, so the previous
    // controller is aborted before the new request goes out
    settled = run(gate.next(), current, mode);
  }

  function scheduleRender() {
    if (pending !== null) {
      cancelScheduled(pending);
    }
    pending = schedule(() => {
      pending = null;
      requestRender();
    }, debounceMs);
  }

  return {
    steer(u, v) {
      current = clampViewpoint(u, v, opts.ranges);
      scheduleRender();
      return current;
    },
    toggleDepth() {
      mode = nextMode(mode);
      scheduleRender();
      return mode;
    },
    viewpoint: () => current,
    mode: () => mode,
    async flush() {
      // tests: run the debounced work that is already scheduled
      await settled;
    },
    stats: () => ({ issued, inFlight, displayed }),
  };
}
