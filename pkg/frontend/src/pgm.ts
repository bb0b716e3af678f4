/** Binary P5 graymap encode/decode plus base64 helpers.
 *
 * Masks leave the editor as {0,255} graymaps and come back from the
 * server the same way, so export -> import -> export is byte-identical.
 */

export interface Graymap {
  width: number;
  height: number;
  /** Row-major pixel bytes, length width*height. */
  pixels: Uint8Array;
}

export function encodePgm(map: Graymap): Uint8Array {
  const header = `P5\n${map.width} ${map.height}\n255\n`;
  const head = new TextEncoder().encode(header);
  const out = new Uint8Array(head.length + map.pixels.length);
  out.set(head, 0);
  out.set(map.pixels, head.length);
  return out;
}

export function decodePgm(bytes: Uint8Array): Graymap {
  if (bytes[0] !== 0x50 || bytes[1] !== 0x35) {
    throw new Error("not a P5 graymap");
  }
  let pos = 2;
  const fields: number[] = [];
  while (fields.length < 3) {
    while (pos < bytes.length && isSpace(bytes[pos])) pos++;
    if (bytes[pos] === 0x23) {
      // comment runs to end of line
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      continue;
    }
    let start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos])) pos++;
    const token = new TextDecoder().decode(bytes.subarray(start, pos));
    const value = Number(token);
    if (!Number.isInteger(value)) throw new Error(`bad header field ${token}`);
    fields.push(value);
  }
  pos++; // the single whitespace byte after maxval
  const [width, height, maxval] = fields;
  if (maxval !== 255) throw new Error(`maxval must be 255, got ${maxval}`);
  const pixels = bytes.subarray(pos, pos + width * height);
  if (pixels.length !== width * height) throw new Error("truncated graymap payload");
  return { width, height, pixels: new Uint8Array(pixels) };
}

function isSpace(byte: number): boolean {
  return byte === 0x20 || byte === 0x0a || byte === 0x0d || byte === 0x09;
}

export function bytesToBase64(bytes: Uint8Array): string {
  if (typeof btoa === "function") {
    let bin = "";
    for (let i = 0; i < bytes.length; i++) bin += String.fromCharCode(bytes[i]);
    return btoa(bin);
  }
  return Buffer.from(bytes).toString("base64");
}

export function base64ToBytes(encoded: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(encoded);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  return new Uint8Array(Buffer.from(encoded, "base64"));
}
