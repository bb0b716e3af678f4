/** Binary brush/eraser over a mask buffer with undo/redo.
 *
 * The editor works at native mask resolution on a {0,1} buffer; the
 * display layer scales with nearest-neighbor, so exported pixels are
 * exactly the edited ones. Undo history keeps at least 20 strokes.
 */

import { decodePgm, encodePgm, type Graymap } from "./pgm.js";

const HISTORY_LIMIT = 50;

export class MaskEditor {
  readonly width: number;
  readonly height: number;
  private data: Uint8Array;
  private undoStack: Uint8Array[] = [];
  private redoStack: Uint8Array[] = [];
  private strokeBase: Uint8Array | null = null;

  constructor(width: number, height: number, initial?: Uint8Array) {
    this.width = width;
    this.height = height;
    this.data = new Uint8Array(width * height);
    if (initial) {
      if (initial.length !== width * height) {
        throw new Error("initial mask size does not match dimensions");
      }
      for (let i = 0; i < initial.length; i++) this.data[i] = initial[i] ? 1 : 0;
    }
  }

  static fromPgm(bytes: Uint8Array): MaskEditor {
    const map = decodePgm(bytes);
    return new MaskEditor(map.width, map.height, map.pixels);
  }

  /** Current {0,1} pixels (a copy). */
  snapshot(): Uint8Array {
    return new Uint8Array(this.data);
  }

  get(x: number, y: number): number {
    return this.data[y * this.width + x];
  }

  foregroundCount(): number {
    let count = 0;
    for (let i = 0; i < this.data.length; i++) count += this.data[i];
    return count;
  }

  beginStroke(): void {
    this.strokeBase = new Uint8Array(this.data);
  }

  /** Paint (value 1) or erase (value 0) a disk of the given radius. */
  applyBrush(cx: number, cy: number, radius: number, value: 0 | 1): void {
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(cx - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + radius));
    const y0 = Math.max(0, Math.floor(cy - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + radius));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy <= r2) {
          this.data[y * this.width + x] = value;
        }
      }
    }
  }

  endStroke(): void {
    if (!this.strokeBase) return;
    const changed = this.strokeBase.some((v, i) => v !== this.data[i]);
    if (changed) {
      this.undoStack.push(this.strokeBase);
      if (this.undoStack.length > HISTORY_LIMIT) this.undoStack.shift();
      this.redoStack = [];
    }
    this.strokeBase = null;
  }

  /** Convenience: one whole stroke in a single call. */
  stroke(cx: number, cy: number, radius: number, value: 0 | 1): void {
    this.beginStroke();
    this.applyBrush(cx, cy, radius, value);
    this.endStroke();
  }

  get undoDepth(): number {
    return this.undoStack.length;
  }

  undo(): boolean {
    const previous = this.undoStack.pop();
    if (!previous) return false;
    this.redoStack.push(new Uint8Array(this.data));
    this.data = previous;
    return true;
  }

  redo(): boolean {
    const next = this.redoStack.pop();
    if (!next) return false;
    this.undoStack.push(new Uint8Array(this.data));
    this.data = next;
    return true;
  }

  /** Export as a {0,255} P5 graymap, exactly the displayed pixels. */
  exportPgm(): Uint8Array {
    const pixels = new Uint8Array(this.data.length);
    for (let i = 0; i < this.data.length; i++) pixels[i] = this.data[i] ? 255 : 0;
    const map: Graymap = { width: this.width, height: this.height, pixels };
    return encodePgm(map);
  }

  equals(other: MaskEditor): boolean {
    if (other.width !== this.width || other.height !== this.height) return false;
    return this.data.every((v, i) => v === other.data[i]);
  }
}
