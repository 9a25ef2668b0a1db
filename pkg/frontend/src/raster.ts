import { CanvasState, Point, Stroke } from "./canvas.js";

// Pure software rasterizer so exports are bit-identical everywhere,
// independent of browser canvas antialiasing. Gray 255 = paper, 0 = ink.

function segmentDistance(px: number, py: number, a: Point, b: Point): number {
  const dx = b.x - a.x;
  const dy = b.y - a.y;
  const lengthSq = dx * dx + dy * dy;
  let t = 0;
  if (lengthSq > 0) {
    t = ((px - a.x) * dx + (py - a.y) * dy) / lengthSq;
    t = Math.max(0, Math.min(1, t));
  }
  const cx = a.x + t * dx;
  const cy = a.y + t * dy;
  return Math.sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy));
}

function stampStroke(pixels: Uint8Array, width: number, height: number, stroke: Stroke): void {
  const radius = stroke.width / 2;
  const value = stroke.erase ? 255 : 0;
  const segments: Array<[Point, Point]> = [];
  if (stroke.points.length === 1) {
    segments.push([stroke.points[0], stroke.points[0]]);
  } else {
    for (let i = 1; i < stroke.points.length; i++) {
      segments.push([stroke.points[i - 1], stroke.points[i]]);
    }
  }
  for (const [a, b] of segments) {
    const x0 = Math.max(0, Math.floor(Math.min(a.x, b.x) - radius - 1));
    const x1 = Math.min(width - 1, Math.ceil(Math.max(a.x, b.x) + radius + 1));
    const y0 = Math.max(0, Math.floor(Math.min(a.y, b.y) - radius - 1));
    const y1 = Math.min(height - 1, Math.ceil(Math.max(a.y, b.y) + radius + 1));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        if (segmentDistance(x + 0.5, y + 0.5, a, b) <= radius) {
          pixels[y * width + x] = value;
        }
      }
    }
  }
}

export function rasterize(canvas: CanvasState): Uint8Array {
  const pixels = new Uint8Array(canvas.width * canvas.height).fill(255);
  for (const stroke of canvas.strokeList) {
    stampStroke(pixels, canvas.width, canvas.height, stroke);
  }
  return pixels;
}
