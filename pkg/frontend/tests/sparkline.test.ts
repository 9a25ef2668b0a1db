import { describe, expect, it } from "vitest";

import { sparklinePoints } from "../src/sparkline.js";

describe("sparklinePoints", () => {
  it("returns an empty string for no data", () => {
    expect(sparklinePoints([], 100, 40)).toBe("");
  });

  it("centers a single point at the left edge", () => {
    expect(sparklinePoints([3.5], 100, 40)).toBe("0.00,20.00");
  });

  it("draws constant losses as a flat mid line", () => {
    expect(sparklinePoints([2, 2, 2], 100, 40)).toBe("0.00,20.00 50.00,20.00 100.00,20.00");
  });

  it("maps the minimum to the bottom and maximum to the top", () => {
    const points = sparklinePoints([4, 3, 2], 100, 40);
    expect(points).toBe("0.00,0.00 50.00,20.00 100.00,40.00");
  });
});
