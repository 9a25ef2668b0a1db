export interface Point {
  x: number;
  y: number;
}

export interface Stroke {
  points: Point[];
  width: number;
  erase: boolean;
}

function copyStrokes(strokes: Stroke[]): Stroke[] {
  return strokes.map((s) => ({
    points: s.points.map((p) => ({ x: p.x, y: p.y })),
    width: s.width,
    erase: s.erase,
  }));
}

export class CanvasState {
  readonly width: number;
  readonly height: number;
  private strokes: Stroke[] = [];
  private undoStack: Stroke[][] = [];

  constructor(width = 512, height = 512) {
    if (width < 1 || height < 1) throw new Error("canvas size must be positive");
    this.width = width;
    this.height = height;
  }

  get strokeList(): Stroke[] {
    return copyStrokes(this.strokes);
  }

  get isEmpty(): boolean {
    return this.strokes.length === 0;
  }

  addStroke(stroke: Stroke): void {
    if (stroke.points.length === 0) throw new Error("stroke needs at least one point");
    if (stroke.width <= 0) throw new Error("stroke width must be positive");
    this.undoStack.push(copyStrokes(this.strokes));
    this.strokes.push(copyStrokes([stroke])[0]);
  }

  clear(): void {
    if (this.strokes.length === 0) return;
    this.undoStack.push(copyStrokes(this.strokes));
    this.strokes = [];
  }

  undo(): boolean {
    const previous = this.undoStack.pop();
    if (previous === undefined) return false;
    this.strokes = previous;
    return true;
  }
}
