export interface ViewRanges {
  u: [number, number];
  v: [number, number];
}

export interface Viewpoint {
  u: number;
  v: number;
}

function clamp(x: number, lo: number, hi: number): number {
  return Math.max(lo, Math.min(hi, x));
}

export function clampViewpoint(u: number, v: number, ranges: ViewRanges): Viewpoint {
  return {
    u: clamp(u, ranges.u[0], ranges.u[1]),
    v: clamp(v, ranges.v[0], ranges.v[1]),
  };
}

/** Pad pixel (px, py) in a w-by-h pad maps affinely onto the viewpoint
 *  rectangle; positions outside the pad clamp to the boundary. */
export function padToViewpoint(
  px: number,
  py: number,
  w: number,
  h: number,
  ranges: ViewRanges,
): Viewpoint {
  const fx = clamp(px / w, 0, 1);
  const fy = clamp(py / h, 0, 1);
  return {
    u: ranges.u[0] + fx * (ranges.u[1] - ranges.u[0]),
    v: ranges.v[0] + fy * (ranges.v[1] - ranges.v[0]),
  };
}

export function viewpointToPad(
  u: number,
  v: number,
  w: number,
  h: number,
  ranges: ViewRanges,
): { x: number; y: number } {
  return {
    x: ((u - ranges.u[0]) / (ranges.u[1] - ranges.u[0])) * w,
    y: ((v - ranges.v[0]) / (ranges.v[1] - ranges.v[0])) * h,
  };
}

/** Integer viewpoints inside the ranges: the camera's original grid dots. */
export function integerGridViewpoints(ranges: ViewRanges): Viewpoint[] {
  const out: Viewpoint[] = [];
  for (let u = Math.ceil(ranges.u[0]); u <= Math.floor(ranges.u[1]); u++) {
    for (let v = Math.ceil(ranges.v[0]); v <= Math.floor(ranges.v[1]); v++) {
      out.push({ u, v });
    }
  }
  return out;
}
