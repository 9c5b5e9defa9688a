/** Typed client for the annotation backend endpoints. */

import type { Box } from "./geometry.js";

export interface Task {
  done: false;
  task_id: string;
  image_id: string;
  tag: string;
  width: number;
  height: number;
  image_url: string;
}

export interface DoneSignal {
  done: true;
}

export type TaskResponse = Task | DoneSignal;

export interface SubmitResult {
  ok: boolean;
  message: string;
  status: number;
}

export type FetchLike = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
    private readonly base = "",
  ) {}

  async nextTask(annotator: string): Promise<TaskResponse> {
    const resp = await this.fetchImpl(
      `${this.base}/api/task?annotator=${encodeURIComponent(annotator)}`,
    );
    if (!resp.ok) {
      throw new Error(`task fetch failed: ${resp.status}`);
    }
    return (await resp.json()) as TaskResponse;
  }

  imageUrl(task: Task): string {
    return `${this.base}${task.image_url}`;
  }

  async submit(
    taskId: string,
    boxes: Box[],
    noVisual: boolean,
  ): Promise<SubmitResult> {
    const resp = await this.fetchImpl(`${this.base}/api/boxes`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        task_id: taskId,
        boxes: boxes.map((b) => ({ x: b.x, y: b.y, w: b.w, h: b.h })),
        no_visual: noVisual,
      }),
    });
    let message = "";
    try {
      const body = (await resp.json()) as { message?: string };
      message = body.message ?? "";
    } catch {
      message = resp.statusText;
    }
    return { ok: resp.ok, message, status: resp.status };
  }
}
