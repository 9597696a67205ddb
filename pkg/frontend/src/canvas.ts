import { WireBox } from "./types.js";

interface Drag {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

// Drag-to-draw box editor for one image. Pure state machine: the DOM layer
// feeds it pointer coordinates and reads boxes back for rendering and
// submission. Coordinates are clamped to the image; boxes are rounded to
// integer pixels when committed and zero-area drags are discarded.
export class BoxEditor {
  private drag: Drag | null = null;
  private committed: WireBox[] = [];
  private label: string;

  constructor(
    readonly width: number,
    readonly height: number,
    readonly vocabulary: string[],
  ) {
    if (width <= 0 || height <= 0) {
      throw new Error(`bad image size ${width}x${height}`);
    }
    if (vocabulary.length === 0) {
      throw new Error("empty class vocabulary");
    }
    this.label = vocabulary[0];
  }

  get activeClass(): string {
    return this.label;
  }

  setClass(label: string): void {
    if (!this.vocabulary.includes(label)) {
      throw new Error(`class ${label} is not in the scenario vocabulary`);
    }
    this.label = label;
  }

  beginDrag(x: number, y: number): void {
    const [cx, cy] = this.clamp(x, y);
    this.drag = { x0: cx, y0: cy, x1: cx, y1: cy };
  }

  moveDrag(x: number, y: number): void {
    if (this.drag === null) {
      return;
    }
    [this.drag.x1, this.drag.y1] = this.clamp(x, y);
  }

  // Commit the drag as a box, or discard it when rounding leaves no area.
  endDrag(): WireBox | null {
    const box = this.pendingBox();
    this.drag = null;
    if (box !== null) {
      this.committed.push(box);
    }
    return box;
  }

  // The in-progress drag as an integer-pixel box, for live preview.
  pendingBox(): WireBox | null {
    if (this.drag === null) {
      return null;
    }
    const x = Math.round(Math.min(this.drag.x0, this.drag.x1));
    const y = Math.round(Math.min(this.drag.y0, this.drag.y1));
    const w = Math.round(Math.max(this.drag.x0, this.drag.x1)) - x;
    const h = Math.round(Math.max(this.drag.y0, this.drag.y1)) - y;
    if (w < 1 || h < 1) {
      return null;
    }
    return { class: this.label, x, y, w, h };
  }

  undo(): WireBox | null {
    return this.committed.pop() ?? null;
  }

  clear(): void {
    this.committed = [];
    this.drag = null;
  }

  get count(): number {
    return this.committed.length;
  }

  boxes(): WireBox[] {
    return this.committed.map((b) => ({ ...b }));
  }

  private clamp(x: number, y: number): [number, number] {
    return [
      Math.min(Math.max(x, 0), this.width),
      Math.min(Math.max(y, 0), this.height),
    ];
  }
}
