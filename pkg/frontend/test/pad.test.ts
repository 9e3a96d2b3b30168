import { describe, expect, it } from "vitest";

import {
  clampViewpoint,
  integerGridViewpoints,
  padToViewpoint,
  viewpointToPad,
  ViewRanges,
} from "../src/pad.js";

const RANGES: ViewRanges = { u: [-3, 3], v: [-3, 3] };

describe("pad <-> viewpoint affine mapping", () => {
  it("is exact at the corners", () => {
    expect(padToViewpoint(0, 0, 280, 280, RANGES)).toEqual({ u: -3, v: -3 });
    expect(padToViewpoint(280, 0, 280, 280, RANGES)).toEqual({ u: 3, v: -3 });
    expect(padToViewpoint(0, 280, 280, 280, RANGES)).toEqual({ u: -3, v: 3 });
    expect(padToViewpoint(280, 280, 280, 280, RANGES)).toEqual({ u: 3, v: 3 });
  });

  it("is exact at the center", () => {
    expect(padToViewpoint(140, 140, 280, 280, RANGES)).toEqual({ u: 0, v: 0 });
  });

  it("round-trips through viewpointToPad", () => {
    for (const [u, v] of [[-3, -3], [0, 0], [1.5, -2.25], [3, 3]] as const) {
      const p = viewpointToPad(u, v, 280, 280, RANGES);
      const vp = padToViewpoint(p.x, p.y, 280, 280, RANGES);
      expect(vp.u).toBeCloseTo(u, 12);
      expect(vp.v).toBeCloseTo(v, 12);
    }
  });

  it("clamps drags beyond the pad edge", () => {
    expect(padToViewpoint(-50, 400, 280, 280, RANGES)).toEqual({ u: -3, v: 3 });
    expect(clampViewpoint(99, -99, RANGES)).toEqual({ u: 3, v: -3 });
  });

  it("asymmetric ranges map affinely", () => {
    const r: ViewRanges = { u: [-1, 2], v: [0, 4] };
    expect(padToViewpoint(0, 0, 100, 100, r)).toEqual({ u: -1, v: 0 });
    expect(padToViewpoint(100, 100, 100, 100, r)).toEqual({ u: 2, v: 4 });
    expect(padToViewpoint(50, 50, 100, 100, r)).toEqual({ u: 0.5, v: 2 });
  });

  it("lists the integer camera-grid dots", () => {
    const dots = integerGridViewpoints(RANGES);
    expect(dots).toHaveLength(49);
    expect(dots).toContainEqual({ u: 0, v: 0 });
    expect(dots).toContainEqual({ u: -3, v: 3 });
  });
});
