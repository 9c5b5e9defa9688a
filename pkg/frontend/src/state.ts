/** Per-task annotation state: drawn boxes or a no-visual judgement. */

import { Box, boxWithinImage } from "./geometry.js";

export class AnnotationState {
  boxes: Box[] = [];
  noVisual = false;

  constructor(
    readonly imageW: number,
    readonly imageH: number,
  ) {}

  /** Boxes and the no-visual flag are mutually exclusive. */
  addBox(box: Box): boolean {
    if (this.noVisual || !boxWithinImage(box, this.imageW, this.imageH)) {
      return false;
    }
    this.boxes.push(box);
    return true;
  }

  removeBox(index: number): void {
    if (index >= 0 && index < this.boxes.length) {
      this.boxes.splice(index, 1);
    }
  }

  setNoVisual(value: boolean): boolean {
    if (value && this.boxes.length > 0) {
      return false;
    }
    this.noVisual = value;
    return true;
  }

  canSubmit(): boolean {
    const hasBoxes = this.boxes.length > 0;
    return this.noVisual ? !hasBoxes : hasBoxes;
  }
}
