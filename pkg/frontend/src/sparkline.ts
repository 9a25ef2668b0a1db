// Maps per-step losses onto SVG polyline points, lowest loss at the bottom.

export function sparklinePoints(losses: number[], width: number, height: number): string {
  if (losses.length === 0) return "";
  const min = Math.min(...losses);
  const max = Math.max(...losses);
  const span = max - min;
  const points: string[] = [];
  for (let i = 0; i < losses.length; i++) {
    const x = losses.length === 1 ? 0 : (i / (losses.length - 1)) * width;
    const y = span === 0 ? height / 2 : height - ((losses[i] - min) / span) * height;
    points.push(`${x.toFixed(2)},${y.toFixed(2)}`);
  }
  return points.join(" ");
}
