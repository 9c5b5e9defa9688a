"""HTTP backend for ground-truth box collection.

Serves annotation tasks ((image, tag) pairs, each shown to a configurable
number of distinct annotators), image bytes, and an export of everything
collected.  The JSONL store on disk is the source of truth: task progress
is rebuilt from it on startup, and every accepted submission rewrites the
store atomically (write temp, then rename).

Endpoints:
    GET  /api/task?annotator=ID  next task for this annotator, or {"done": true}
    GET  /api/image/{id}         image bytes
    POST /api/boxes              {"task_id", "boxes": [...], "no_visual": bool}
    GET  /api/export             ground-truth JSONL
Static files (the annotator UI) are served from an optional directory.
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .boxes import Box, box_to_dict
from .corpus import InfographicRecord, resolve_image_path
from .evaluate import GroundTruthBoxSet, gt_to_dict, load_gt_jsonl


@dataclass
class AnnotationTask:
    task_id: str
    image_id: str
    tag: str
    annotator: str
    status: str = "pending"  # pending | done


class AnnotationStore:
    """Append-only ground-truth store with atomic whole-file rewrites."""

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        self.entries: list[GroundTruthBoxSet] = []
        if os.path.exists(self.path):
            self.entries = load_gt_jsonl(self.path)

    def append(self, entry: GroundTruthBoxSet) -> None:
        self.entries.append(entry)
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(gt_to_dict(e), sort_keys=True) + "\n")
        os.replace(tmp, self.path)

    def export_bytes(self) -> bytes:
        return "".join(
            json.dumps(gt_to_dict(e), sort_keys=True) + "\n" for e in self.entries
        ).encode("utf-8")


class AnnotationService:
    """Task assignment and submission logic, serialized through one lock."""

    def __init__(
        self,
        records: list[InfographicRecord],
        store: AnnotationStore,
        annotators_per_pair: int = 3,
        images_root: str | os.PathLike = ".",
    ):
        self.records = {r.id: r for r in records}
        self.store = store
        self.k = annotators_per_pair
        self.images_root = os.fspath(images_root)
        self.pairs = sorted(
            {(r.id, t) for r in records for t in r.tags}
        )
        self.tasks: dict[str, AnnotationTask] = {}
        # annotators who completed (from the store) or hold a pending task
        self.taken: dict[tuple[str, str], set[str]] = {p: set() for p in self.pairs}
        for e in store.entries:
            self.taken.setdefault((e.image_id, e.tag), set()).add(e.annotator)
        self.lock = threading.Lock()

    def next_task(self, annotator: str) -> AnnotationTask | None:
        with self.lock:
            for pair in self.pairs:
                holders = self.taken[pair]
                if annotator in holders or len(holders) >= self.k:
                    continue
                task = AnnotationTask(uuid.uuid4().hex, pair[0], pair[1], annotator)
                self.tasks[task.task_id] = task
                holders.add(annotator)
                return task
            return None

    def submit(self, task_id: str, boxes: list[Box], no_visual: bool) -> tuple[int, str]:
        """Returns (http_status, message)."""
        with self.lock:
            task = self.tasks.get(task_id)
            if task is None:
                return 404, "unknown task"
            if task.status == "done":
                return 409, "task already completed"
            record = self.records[task.image_id]
            if no_visual and boxes:
                return 400, "no_visual submissions must carry no boxes"
            if not no_visual and not boxes:
                return 400, "submission needs boxes or no_visual"
            for b in boxes:
                if not b.within(record.width, record.height):
                    return 400, f"box {b} outside {record.width}x{record.height} image"
            entry = GroundTruthBoxSet(
                image_id=task.image_id,
                tag=task.tag,
                annotator=task.annotator,
                boxes=tuple(boxes),
                no_visual=no_visual,
            )
            self.store.append(entry)
            task.status = "done"
            return 200, "stored"

    def image_bytes(self, image_id: str) -> bytes | None:
        record = self.records.get(image_id)
        if record is None:
            return None
        path = resolve_image_path(record, self.images_root)
        if not os.path.exists(path):
            return None
        with open(path, "rb") as fh:
            return fh.read()


_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".png": "image/png",
    ".svg": "image/svg+xml",
    ".map": "application/json",
}


class _Handler(BaseHTTPRequestHandler):
    service: AnnotationService
    ui_dir: str | None = None

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send_json(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _send_bytes(self, status: int, data: bytes, ctype: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        url = urlparse(self.path)
        if url.path == "/api/task":
            annotator = parse_qs(url.query).get("annotator", [""])[0]
            if not annotator:
                self._send_json(400, {"error": "annotator query parameter required"})
                return
            task = self.service.next_task(annotator)
            if task is None:
                self._send_json(200, {"done": True})
                return
            record = self.service.records[task.image_id]
            self._send_json(200, {
                "done": False,
                "task_id": task.task_id,
                "image_id": task.image_id,
                "tag": task.tag,
                "width": record.width,
                "height": record.height,
                "image_url": f"/api/image/{task.image_id}",
            })
        elif url.path.startswith("/api/image/"):
            data = self.service.image_bytes(url.path[len("/api/image/"):])
            if data is None:
                self._send_json(404, {"error": "unknown image"})
            else:
                self._send_bytes(200, data, "image/png")
        elif url.path == "/api/export":
            self._send_bytes(200, self.service.store.export_bytes(),
                             "application/x-ndjson")
        else:
            self._serve_static(url.path)

    def _serve_static(self, path: str) -> None:
        if self.ui_dir is None:
            self._send_json(404, {"error": "not found"})
            return
        rel = "index.html" if path == "/" else path.lstrip("/")
        full = os.path.realpath(os.path.join(self.ui_dir, rel))
        if not full.startswith(os.path.realpath(self.ui_dir)) or not os.path.isfile(full):
            self._send_json(404, {"error": "not found"})
            return
        ctype = _CONTENT_TYPES.get(os.path.splitext(full)[1], "application/octet-stream")
        with open(full, "rb") as fh:
            self._send_bytes(200, fh.read(), ctype)

    def do_POST(self):
        url = urlparse(self.path)
        if url.path != "/api/boxes":
            self._send_json(404, {"error": "not found"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length) or b"{}")
            task_id = payload["task_id"]
            no_visual = bool(payload.get("no_visual", False))
            boxes = [
                Box(int(b["x"]), int(b["y"]), int(b["w"]), int(b["h"]))
                for b in payload.get("boxes", [])
            ]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            self._send_json(400, {"error": f"malformed request: {e}"})
            return
        status, message = self.service.submit(task_id, boxes, no_visual)
        body = {"ok": status == 200, "message": message}
        if status == 200:
            body["boxes"] = [box_to_dict(b) for b in boxes]
        self._send_json(status, body)


def make_server(
    service: AnnotationService, port: int = 0, ui_dir: str | None = None
) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"service": service, "ui_dir": ui_dir})
    return ThreadingHTTPServer(("127.0.0.1", port), handler)
