/**
 * Coordinate math for the annotation canvas.
 *
 * Boxes are always stored in image pixel coordinates (origin top-left,
 * integer x, y, w, h covering w*h pixels). The view maps image space to
 * screen space as `screen = image * zoom + pan`; pans are kept on whole
 * screen pixels and the zoom ladder uses binary-exact steps so that the
 * map inverts exactly and a stored box re-renders pixel-identically at
 * any zoom level.
 */

export interface Box {
  x: number;
  y: number;
  w: number;
  h: number;
}

export interface Point {
  x: number;
  y: number;
}

/** Smallest box side accepted, in image pixels (accidental-click guard). */
export const MIN_BOX_SIDE = 4;

export const ZOOM_LADDER = [
  0.0625, 0.125, 0.25, 0.375, 0.5, 0.75, 1, 1.5, 2, 3, 4, 6, 8, 12, 16,
];

export class ViewTransform {
  zoom = 1;
  panX = 0;
  panY = 0;

  imageToScreen(p: Point): Point {
    return { x: p.x * this.zoom + this.panX, y: p.y * this.zoom + this.panY };
  }

  screenToImage(p: Point): Point {
    return {
      x: (p.x - this.panX) / this.zoom,
      y: (p.y - this.panY) / this.zoom,
    };
  }

  boxToScreen(b: Box): { x: number; y: number; w: number; h: number } {
    const tl = this.imageToScreen({ x: b.x, y: b.y });
    return { x: tl.x, y: tl.y, w: b.w * this.zoom, h: b.h * this.zoom };
  }

  /** Pan by whole screen pixels only, so the transform stays exact. */
  panBy(dx: number, dy: number): void {
    this.panX = Math.round(this.panX + dx);
    this.panY = Math.round(this.panY + dy);
  }

  setZoom(zoom: number, anchor?: Point): void {
    const clamped = Math.min(
      Math.max(zoom, ZOOM_LADDER[0]),
      ZOOM_LADDER[ZOOM_LADDER.length - 1],
    );
    if (anchor) {
      // keep the image point under the anchor fixed on screen
      const before = this.screenToImage(anchor);
      this.zoom = clamped;
      this.panX = Math.round(anchor.x - before.x * clamped);
      this.panY = Math.round(anchor.y - before.y * clamped);
    } else {
      this.zoom = clamped;
    }
  }

  zoomStep(direction: 1 | -1, anchor: Point): void {
    const idx = nearestLadderIndex(this.zoom);
    const next = ZOOM_LADDER[
      Math.min(Math.max(idx + direction, 0), ZOOM_LADDER.length - 1)
    ];
    this.setZoom(next, anchor);
  }

  /** Fit the whole image in a viewport, centered. */
  fitTo(imageW: number, imageH: number, viewW: number, viewH: number): void {
    const scale = Math.min(viewW / imageW, viewH / imageH);
    const idx = nearestLadderIndex(scale);
    // never fit with a zoom above the exact fit scale
    this.zoom =
      ZOOM_LADDER[idx] <= scale ? ZOOM_LADDER[idx] : ZOOM_LADDER[Math.max(idx - 1, 0)];
    this.panX = Math.round((viewW - imageW * this.zoom) / 2);
    this.panY = Math.round((viewH - imageH * this.zoom) / 2);
  }
}

export function nearestLadderIndex(zoom: number): number {
  let best = 0;
  for (let i = 1; i < ZOOM_LADDER.length; i++) {
    if (Math.abs(ZOOM_LADDER[i] - zoom) < Math.abs(ZOOM_LADDER[best] - zoom)) {
      best = i;
    }
  }
  return best;
}

/**
 * Build an image-space box from two drag corners (image coordinates),
 * clamped to the image bounds. Returns null when the result is smaller
 * than MIN_BOX_SIDE in either dimension.
 */
export function boxFromCorners(
  a: Point,
  b: Point,
  imageW: number,
  imageH: number,
): Box | null {
  const x0 = clampInt(Math.min(a.x, b.x), 0, imageW);
  const y0 = clampInt(Math.min(a.y, b.y), 0, imageH);
  const x1 = clampInt(Math.max(a.x, b.x), 0, imageW);
  const y1 = clampInt(Math.max(a.y, b.y), 0, imageH);
  const w = x1 - x0;
  const h = y1 - y0;
  if (w < MIN_BOX_SIDE || h < MIN_BOX_SIDE) {
    return null;
  }
  return { x: x0, y: y0, w, h };
}

export function clampInt(v: number, lo: number, hi: number): number {
  return Math.min(Math.max(Math.round(v), lo), hi);
}

export function boxWithinImage(b: Box, imageW: number, imageH: number): boolean {
  return (
    b.x >= 0 &&
    b.y >= 0 &&
    b.w >= 1 &&
    b.h >= 1 &&
    b.x + b.w <= imageW &&
    b.y + b.h <= imageH
  );
}

export function hitTestBox(b: Box, p: Point, tolerance = 0): boolean {
  return (
    p.x >= b.x - tolerance &&
    p.x <= b.x + b.w + tolerance &&
    p.y >= b.y - tolerance &&
    p.y <= b.y + b.h + tolerance
  );
}
