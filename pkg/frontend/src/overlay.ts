/**
 * Mask overlay pixels. The service sends the mask as a base64 PNG; the
 * browser decodes it to RGBA via a canvas, and these helpers turn that
 * into the translucent tint drawn over the image.
 *
 * Contract worth stating twice: the overlay never repaints, erodes, or
 * smooths the mask. A pixel is tinted iff the decoded mask is nonzero
 * there, and the decoded bytes are exactly what the service sent.
 */

/** Default overlay tint (soft teal, readable on gray-scale scans). */
export const MASK_COLOR: readonly [number, number, number] = [38, 166, 154];

export function decodeBase64(b64: string): Uint8Array {
  const binary = atob(b64);
  const bytes = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) {
    bytes[i] = binary.charCodeAt(i);
  }
  return bytes;
}

export function encodeBase64(bytes: Uint8Array): string {
  let binary = '';
  for (let i = 0; i < bytes.length; i++) {
    binary += String.fromCharCode(bytes[i]);
  }
  return btoa(binary);
}

/**
 * Collapse canvas RGBA back to the single-channel mask. The mask PNG is
 * grayscale, so R carries the value; G/B are duplicates and A is 255.
 */
export function grayFromRgba(rgba: Uint8ClampedArray, width: number, height: number): Uint8Array {
  if (rgba.length !== width * height * 4) {
    throw new RangeError(`expected ${width * height * 4} RGBA bytes, got ${rgba.length}`);
  }
  const gray = new Uint8Array(width * height);
  for (let i = 0; i < gray.length; i++) {
    gray[i] = rgba[i * 4];
  }
  return gray;
}

/**
 * Build the RGBA overlay for one mask: `color` at alpha `opacity` where
 * the mask is nonzero, fully transparent elsewhere. For any opacity > 0
 * the painted alpha is kept >= 1 so visible pixels stay in one-to-one
 * correspondence with mask foreground.
 */
export function composeOverlay(
  mask: Uint8Array | Uint8ClampedArray,
  width: number,
  height: number,
  color: readonly [number, number, number] = MASK_COLOR,
  opacity: number = 0.45,
): Uint8ClampedArray {
  if (mask.length !== width * height) {
    throw new RangeError(`mask length ${mask.length} does not match ${width}x${height}`);
  }
  if (!(opacity >= 0 && opacity <= 1)) {
    throw new RangeError(`opacity must be in [0, 1], got ${opacity}`);
  }
  const alpha = opacity === 0 ? 0 : Math.max(1, Math.round(opacity * 255));
  const rgba = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < mask.length; i++) {
    if (mask[i] !== 0) {
      rgba[i * 4] = color[0];
      rgba[i * 4 + 1] = color[1];
      rgba[i * 4 + 2] = color[2];
      rgba[i * 4 + 3] = alpha;
    }
  }
  return rgba;
}

/** True iff overlay alpha is nonzero exactly where the mask is nonzero. */
export function overlayMatchesMask(
  overlay: Uint8ClampedArray,
  mask: Uint8Array | Uint8ClampedArray,
): boolean {
  if (overlay.length !== mask.length * 4) return false;
  for (let i = 0; i < mask.length; i++) {
    if ((overlay[i * 4 + 3] !== 0) !== (mask[i] !== 0)) return false;
  }
  return true;
}

/** Count of foreground pixels, shown next to each history entry. */
export function foregroundCount(mask: Uint8Array | Uint8ClampedArray): number {
  let n = 0;
  for (let i = 0; i < mask.length; i++) {
    if (mask[i] !== 0) n++;
  }
  return n;
}
