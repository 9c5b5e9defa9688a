/**
 * Annotation tool: shows one (image, tag) task at a time. The annotator
 * draws boxes around non-text regions depicting the tag (or marks that no
 * such region exists) and submits; the next task loads automatically.
 *
 * Interaction: left-drag draws a box, wheel zooms about the cursor,
 * middle-drag or space+drag pans, clicking a box selects it, Delete or the
 * button removes it. Boxes live in image coordinates from the moment they
 * are created.
 */

import { ApiClient, Task } from "./api.js";
import {
  Box,
  Point,
  ViewTransform,
  boxFromCorners,
  hitTestBox,
} from "./geometry.js";
import { AnnotationState } from "./state.js";

type Mode =
  | { kind: "idle" }
  | { kind: "draw"; start: Point }
  | { kind: "pan"; lastX: number; lastY: number };

export class App {
  private readonly view = new ViewTransform();
  private readonly api: ApiClient;
  private task: Task | null = null;
  private state: AnnotationState | null = null;
  private image: HTMLImageElement | null = null;
  private mode: Mode = { kind: "idle" };
  private preview: Box | null = null;
  private selected = -1;
  private spaceHeld = false;

  constructor(
    private readonly canvas: HTMLCanvasElement,
    private readonly ui: {
      tag: HTMLElement;
      status: HTMLElement;
      annotator: HTMLInputElement;
      noVisual: HTMLInputElement;
      submit: HTMLButtonElement;
      deleteBox: HTMLButtonElement;
      start: HTMLButtonElement;
    },
    api?: ApiClient,
  ) {
    this.api = api ?? new ApiClient();
    this.bind();
    this.resize();
  }

  private bind(): void {
    window.addEventListener("resize", () => this.resize());
    this.ui.start.addEventListener("click", () => void this.nextTask());
    this.ui.submit.addEventListener("click", () => void this.submit());
    this.ui.deleteBox.addEventListener("click", () => this.deleteSelected());
    this.ui.noVisual.addEventListener("change", () => {
      if (!this.state) return;
      if (!this.state.setNoVisual(this.ui.noVisual.checked)) {
        this.ui.noVisual.checked = false;
        this.setStatus("delete the boxes first to mark no visual region");
      }
      this.sync();
    });
    window.addEventListener("keydown", (e) => {
      if (e.key === " ") this.spaceHeld = true;
      if (e.key === "Delete" || e.key === "Backspace") this.deleteSelected();
    });
    window.addEventListener("keyup", (e) => {
      if (e.key === " ") this.spaceHeld = false;
    });

    this.canvas.addEventListener("mousedown", (e) => this.onDown(e));
    this.canvas.addEventListener("mousemove", (e) => this.onMove(e));
    window.addEventListener("mouseup", (e) => this.onUp(e));
    this.canvas.addEventListener("wheel", (e) => this.onWheel(e), {
      passive: false,
    });
    this.canvas.addEventListener("contextmenu", (e) => e.preventDefault());
  }

  private resize(): void {
    this.canvas.width = this.canvas.clientWidth;
    this.canvas.height = this.canvas.clientHeight;
    if (this.task) {
      this.view.fitTo(
        this.task.width,
        this.task.height,
        this.canvas.width,
        this.canvas.height,
      );
    }
    this.render();
  }

  private setStatus(text: string): void {
    this.ui.status.textContent = text;
  }

  async nextTask(): Promise<void> {
    const annotator = this.ui.annotator.value.trim();
    if (!annotator) {
      this.setStatus("enter an annotator id first");
      return;
    }
    localStorage.setItem("annotator", annotator);
    this.setStatus("loading task...");
    let resp;
    try {
      resp = await this.api.nextTask(annotator);
    } catch (err) {
      this.setStatus(`network error, retry: ${String(err)}`);
      return;
    }
    if (resp.done) {
      this.task = null;
      this.state = null;
      this.image = null;
      this.ui.tag.textContent = "all done";
      this.setStatus("no tasks remaining. thank you!");
      this.sync();
      this.render();
      return;
    }
    this.task = resp;
    this.state = new AnnotationState(resp.width, resp.height);
    this.selected = -1;
    this.preview = null;
    this.ui.noVisual.checked = false;
    this.ui.tag.textContent = `#${resp.tag}`;
    this.setStatus(`boxing regions for "${resp.tag}" in ${resp.image_id}`);
    await this.loadImage(this.api.imageUrl(resp));
    this.view.fitTo(
      resp.width,
      resp.height,
      this.canvas.width,
      this.canvas.height,
    );
    this.sync();
    this.render();
  }

  private loadImage(url: string): Promise<void> {
    return new Promise((resolve) => {
      const img = new Image();
      img.onload = () => {
        this.image = img;
        resolve();
      };
      img.onerror = () => {
        this.image = null;
        this.setStatus("image failed to load; retry");
        resolve();
      };
      img.src = url;
    });
  }

  async submit(): Promise<void> {
    if (!this.task || !this.state || !this.state.canSubmit()) return;
    const result = await this.api.submit(
      this.task.task_id,
      this.state.boxes,
      this.state.noVisual,
    );
    if (result.ok || result.status === 409) {
      // 409 = already completed elsewhere; either way move on
      await this.nextTask();
    } else {
      this.setStatus(`submit rejected (${result.status}): ${result.message}`);
    }
  }

  private deleteSelected(): void {
    if (!this.state || this.selected < 0) return;
    this.state.removeBox(this.selected);
    this.selected = -1;
    this.sync();
    this.render();
  }

  private mousePoint(e: MouseEvent): Point {
    const rect = this.canvas.getBoundingClientRect();
    return { x: e.clientX - rect.left, y: e.clientY - rect.top };
  }

  private onDown(e: MouseEvent): void {
    if (!this.task || !this.state) return;
    const p = this.mousePoint(e);
    if (e.button === 1 || e.button === 2 || this.spaceHeld) {
      this.mode = { kind: "pan", lastX: p.x, lastY: p.y };
      e.preventDefault();
      return;
    }
    if (e.button === 0) {
      const ip = this.view.screenToImage(p);
      const hit = this.state.boxes.findIndex((b) => hitTestBox(b, ip, 2));
      if (hit >= 0 && !e.shiftKey) {
        this.selected = hit;
        this.render();
        this.sync();
        return;
      }
      if (this.state.noVisual) {
        this.setStatus("uncheck “no visual region” to draw boxes");
        return;
      }
      this.selected = -1;
      this.mode = { kind: "draw", start: ip };
    }
  }

  private onMove(e: MouseEvent): void {
    if (!this.task || !this.state) return;
    const p = this.mousePoint(e);
    if (this.mode.kind === "pan") {
      this.view.panBy(p.x - this.mode.lastX, p.y - this.mode.lastY);
      this.mode = { kind: "pan", lastX: p.x, lastY: p.y };
      this.render();
    } else if (this.mode.kind === "draw") {
      const ip = this.view.screenToImage(p);
      this.preview = boxFromCorners(
        this.mode.start,
        ip,
        this.task.width,
        this.task.height,
      );
      this.render();
    }
  }

  private onUp(e: MouseEvent): void {
    if (this.mode.kind === "draw" && this.task && this.state) {
      const ip = this.view.screenToImage(this.mousePoint(e));
      const box = boxFromCorners(
        this.mode.start,
        ip,
        this.task.width,
        this.task.height,
      );
      if (box) {
        this.state.addBox(box);
      }
      this.preview = null;
      this.sync();
      this.render();
    }
    this.mode = { kind: "idle" };
  }

  private onWheel(e: WheelEvent): void {
    if (!this.task) return;
    e.preventDefault();
    this.view.zoomStep(e.deltaY < 0 ? 1 : -1, this.mousePoint(e));
    this.render();
  }

  private sync(): void {
    const state = this.state;
    this.ui.submit.disabled = !state || !state.canSubmit();
    this.ui.deleteBox.disabled = !state || this.selected < 0;
    this.ui.noVisual.disabled = !state || state.boxes.length > 0;
  }

  render(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    ctx.fillStyle = "#1c1e22";
    ctx.fillRect(0, 0, this.canvas.width, this.canvas.height);
    if (!this.task || !this.image) return;

    ctx.imageSmoothingEnabled = this.view.zoom < 1;
    const origin = this.view.imageToScreen({ x: 0, y: 0 });
    ctx.drawImage(
      this.image,
      origin.x,
      origin.y,
      this.task.width * this.view.zoom,
      this.task.height * this.view.zoom,
    );

    const drawBox = (b: Box, color: string, width: number) => {
      const s = this.view.boxToScreen(b);
      ctx.strokeStyle = color;
      ctx.lineWidth = width;
      ctx.strokeRect(s.x + 0.5, s.y + 0.5, s.w, s.h);
    };
    this.state?.boxes.forEach((b, i) =>
      drawBox(b, i === this.selected ? "#ffd23f" : "#3fd27f", 2),
    );
    if (this.preview) {
      drawBox(this.preview, "#7fb4ff", 1);
    }

    ctx.fillStyle = "#ffffffcc";
    ctx.font = "12px sans-serif";
    ctx.fillText(`zoom ${this.view.zoom}×`, 8, this.canvas.height - 8);
  }
}

export function boot(): void {
  const canvas = document.getElementById("canvas") as HTMLCanvasElement;
  const app = new App(canvas, {
    tag: document.getElementById("tag")!,
    status: document.getElementById("status")!,
    annotator: document.getElementById("annotator") as HTMLInputElement,
    noVisual: document.getElementById("no-visual") as HTMLInputElement,
    submit: document.getElementById("submit") as HTMLButtonElement,
    deleteBox: document.getElementById("delete-box") as HTMLButtonElement,
    start: document.getElementById("start") as HTMLButtonElement,
  });
  const saved = localStorage.getItem("annotator");
  if (saved) {
    (document.getElementById("annotator") as HTMLInputElement).value = saved;
  }
  app.render();
}

if (typeof document !== "undefined" && document.getElementById("canvas")) {
  boot();
}
