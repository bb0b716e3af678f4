/** Compose radiograph + mask layers into an RGBA buffer.
 *
 * With both layers off the output is the untouched grayscale image, so
 * toggling overlays is lossless.
 */

export interface OverlayOptions {
  lungOpacity: number; // 0..1, outline tint strength
  infectionOpacity: number; // 0..1, fill strength
}

export const DEFAULT_OVERLAY: OverlayOptions = { lungOpacity: 0.5, infectionOpacity: 0.45 };

export function composeOverlay(
  gray: Uint8Array,
  width: number,
  height: number,
  lung: Uint8Array | null,
  infection: Uint8Array | null,
  options: OverlayOptions = DEFAULT_OVERLAY,
): Uint8ClampedArray {
  const out = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < width * height; i++) {
    const g = gray[i];
    let r = g;
    let gg = g;
    let b = g;
    if (lung && lung[i] && isBoundary(lung, width, height, i)) {
      const a = options.lungOpacity;
      r = r * (1 - a);
      gg = gg * (1 - a) + 197 * a;
      b = b * (1 - a) + 255 * a;
    }
    if (infection && infection[i]) {
      const a = options.infectionOpacity;
      r = r * (1 - a) + 255 * a;
      gg = gg * (1 - a) + 51 * a;
      b = b * (1 - a) + 26 * a;
    }
    out[4 * i] = r;
    out[4 * i + 1] = gg;
    out[4 * i + 2] = b;
    out[4 * i + 3] = 255;
  }
  return out;
}

function isBoundary(mask: Uint8Array, width: number, height: number, index: number): boolean {
  const x = index % width;
  const y = (index - x) / width;
  if (x === 0 || y === 0 || x === width - 1 || y === height - 1) return true;
  return (
    !mask[index - 1] || !mask[index + 1] || !mask[index - width] || !mask[index + width]
  );
}
