import { describe, expect, it } from "vitest";

import { MaskEditor } from "../src/maskEditor.js";
import { decodePgm, encodePgm } from "../src/pgm.js";

describe("pgm codec", () => {
  it("round-trips byte-identically", () => {
    const pixels = new Uint8Array([0, 255, 128, 7, 0, 255]);
    const bytes = encodePgm({ width: 3, height: 2, pixels });
    const decoded = decodePgm(bytes);
    expect(decoded.width).toBe(3);
    expect(decoded.height).toBe(2);
    expect([...decoded.pixels]).toEqual([...pixels]);
    expect([...encodePgm(decoded)]).toEqual([...bytes]);
  });

  it("rejects non-P5 data", () => {
    expect(() => decodePgm(new Uint8Array([0x50, 0x36, 0x0a]))).toThrow(/P5/);
  });

  it("parses header comments", () => {
    const raw = new TextEncoder().encode("P5\n# c\n2 1\n255\n");
    const bytes = new Uint8Array([...raw, 9, 200]);
    const decoded = decodePgm(bytes);
    expect([...decoded.pixels]).toEqual([9, 200]);
  });
});

describe("mask editor", () => {
  it("paint then erase the same region restores the original", () => {
    const editor = new MaskEditor(16, 16);
    const before = editor.snapshot();
    editor.stroke(8, 8, 3, 1);
    editor.stroke(8, 8, 3, 0);
    expect([...editor.snapshot()]).toEqual([...before]);
  });

  it("export dimensions equal the mask dimensions", () => {
    const editor = new MaskEditor(24, 18);
    editor.stroke(5, 5, 2, 1);
    const decoded = decodePgm(editor.exportPgm());
    expect(decoded.width).toBe(24);
    expect(decoded.height).toBe(18);
  });

  it("export -> import -> export is byte-identical", () => {
    const editor = new MaskEditor(12, 12);
    editor.stroke(4, 4, 2, 1);
    editor.stroke(9, 9, 1, 1);
    const exported = editor.exportPgm();
    const reimported = MaskEditor.fromPgm(exported);
    expect([...reimported.exportPgm()]).toEqual([...exported]);
    expect(reimported.equals(editor)).toBe(true);
  });

  it("supports at least 20 undo levels", () => {
    const editor = new MaskEditor(32, 32);
    const snapshots: Uint8Array[] = [editor.snapshot()];
    for (let i = 0; i < 25; i++) {
      editor.stroke(i, i, 1, 1);
      snapshots.push(editor.snapshot());
    }
    expect(editor.undoDepth).toBeGreaterThanOrEqual(20);
    for (let i = 0; i < 20; i++) {
      expect(editor.undo()).toBe(true);
    }
    expect([...editor.snapshot()]).toEqual([...snapshots[5]]);
    for (let i = 0; i < 20; i++) {
      expect(editor.redo()).toBe(true);
    }
    expect([...editor.snapshot()]).toEqual([...snapshots[25]]);
  });

  it("undo after no change is a no-op", () => {
    const editor = new MaskEditor(8, 8);
    editor.beginStroke();
    editor.endStroke(); // nothing painted
    expect(editor.undoDepth).toBe(0);
    expect(editor.undo()).toBe(false);
  });

  it("brush clips at the borders", () => {
    const editor = new MaskEditor(8, 8);
    editor.stroke(0, 0, 3, 1);
    expect(editor.get(0, 0)).toBe(1);
    expect(editor.foregroundCount()).toBeGreaterThan(0);
  });
});
