"""Annotation HTTP server: failure queue, image fetch, example submission.

The trial loop calls the bridge like any other annotator; the bridge parks
the failure in a pending queue and blocks the loop until a client submits a
valid annotation over HTTP. Request handlers run on their own threads, so
all queue state lives behind one condition variable. The first valid
submission per failure wins; later ones get 409.

Routes (canonical prefix /api/v1, with /api accepted as an alias):
  GET  /api/v1/failures      pending failures, oldest first
  GET  /api/v1/images/{id}   ground-truth render as PNG
  POST /api/v1/annotations   submit boxes or a true negative
  GET  /api/v1/status        trial phase, example-set size, counters
"""
from __future__ import annotations

import json
import mimetypes
import os
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict, List, Optional, Tuple

from . import detector as det
from . import world as wd
from .tfod import (ANNOTATION_SECONDS_PER_CLICK, AnnotationBox,
                   AnnotationTimeoutError, FailureEvent, FewShotExample)

API_PREFIXES = ("/api/v1", "/api")


class SubmissionError(ValueError):
    """Invalid annotation payload; carries the HTTP status to return."""

    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class _Pending:
    def __init__(self, wire_id: str, event: FailureEvent,
                 store: wd.SnapshotStore, trial: int):
        self.wire_id = wire_id
        self.event = event
        self.store = store
        self.trial = trial


class AnnotationBridge:
    """Blocking annotator backed by the HTTP submission queue."""

    source = "human"

    def __init__(self, vocabulary: List[str],
                 timeout_s: Optional[float] = None):
        self.vocabulary = sorted(vocabulary)
        self.timeout_s = timeout_s
        self._cond = threading.Condition()
        self._pending: Dict[str, _Pending] = {}
        self._order: List[str] = []
        self._results: Dict[str, List[FewShotExample]] = {}
        self._resolved: Dict[str, dict] = {}
        self._images: Dict[str, wd.SnapshotStore] = {}
        self._seq = 0
        self.trial = 0
        self.phase = "idle"
        self.events_total = 0
        self.annotations_total = 0
        self.clicks_total = 0
        self.examples_total = 0

    def set_trial(self, trial: int) -> None:
        with self._cond:
            self.trial = trial
            self.phase = "running"

    def finish(self, phase: str = "done") -> None:
        with self._cond:
            self.phase = phase

    def annotate(self, event: FailureEvent,
                 store: wd.SnapshotStore) -> List[FewShotExample]:
        """Park the failure for a client and block until it is resolved."""
        with self._cond:
            wire_id = f"pf-{self._seq:04d}"
            self._seq += 1
            self.events_total += 1
            item = _Pending(wire_id, event, store, self.trial)
            self._pending[wire_id] = item
            self._order.append(wire_id)
            for image_id in event.image_ids:
                self._images[image_id] = store
            self.phase = "waiting_annotation"
            ok = self._cond.wait_for(lambda: wire_id in self._results,
                                     timeout=self.timeout_s)
            if not ok:
                self._pending.pop(wire_id, None)
                self._order.remove(wire_id)
                raise AnnotationTimeoutError(
                    f"no annotation for {wire_id} within "
                    f"{self.timeout_s} s")
            if not self._pending:
                self.phase = "running"
            return self._results.pop(wire_id)

    def pending_failures(self) -> List[dict]:
        with self._cond:
            out = []
            for wire_id in self._order:
                if wire_id not in self._pending:
                    continue
                item = self._pending[wire_id]
                out.append({
                    "id": wire_id,
                    "event_id": item.event.event_id,
                    "trial": item.trial,
                    "task": item.event.task.value,
                    "reason": item.event.reason.value,
                    "class_labels": list(item.event.class_labels),
                    "created_at_s": item.event.timestamp_s,
                    "image_ids": list(item.event.image_ids),
                    "images": [f"/api/v1/images/{i}"
                               for i in item.event.image_ids],
                    "vocabulary": self.vocabulary,
                })
            return out

    def image_png(self, image_id: str) -> Optional[bytes]:
        with self._cond:
            store = self._images.get(image_id)
        if store is None:
            return None
        return wd.to_png_bytes(store.get(image_id).rasterize())

    def status(self) -> dict:
        with self._cond:
            return {
                "phase": self.phase,
                "trial": self.trial,
                "pending": len(self._pending),
                "events_total": self.events_total,
                "annotations_total": self.annotations_total,
                "examples": self.examples_total,
                "clicks": self.clicks_total,
                "annotation_seconds":
                    ANNOTATION_SECONDS_PER_CLICK * self.clicks_total,
                "vocabulary": self.vocabulary,
            }

    def submit(self, payload: dict) -> dict:
        """Validate one submission and wake the blocked trial loop."""
        with self._cond:
            wire_id = payload.get("id") or payload.get("event_id")
            if not isinstance(wire_id, str):
                raise SubmissionError(422, "missing failure id")
            if wire_id in self._resolved:
                raise SubmissionError(
                    409, f"failure {wire_id} already resolved")
            item = self._pending.get(wire_id)
            if item is None:
                raise SubmissionError(409, f"failure {wire_id} not pending")
            example, clicks = self._build_example(item, payload)
            ack = {
                "id": wire_id,
                "example_id": f"ex-{self.annotations_total:04d}",
                "clicks": clicks,
            }
            self.annotations_total += 1
            self.examples_total += 1
            self.clicks_total += clicks
            self._resolved[wire_id] = ack
            self._results[wire_id] = [example]
            del self._pending[wire_id]
            self._cond.notify_all()
            return dict(ack)

    def _build_example(self, item: _Pending,
                       payload: dict) -> Tuple[FewShotExample, int]:
        event = item.event
        image_id = payload.get("image_id")
        if image_id not in event.image_ids:
            raise SubmissionError(
                422, f"image {image_id!r} is not part of this failure")
        record = item.store.get(image_id)
        width, height = record.intrinsics.image_size
        raw_boxes = payload.get("boxes", [])
        true_negative = bool(payload.get("true_negative", False))
        if true_negative:
            if raw_boxes:
                raise SubmissionError(
                    422, "true_negative submissions must have no boxes")
            ctx = det.ambient_context(record)
            neg = tuple((label, ctx)
                        for label in sorted(set(event.class_labels)))
            example = FewShotExample(
                image_id=image_id, task=event.task, boxes=(),
                source=self.source, neg_keys=neg)
            return example, 0
        if not raw_boxes:
            raise SubmissionError(422, "at least one box required")
        boxes = []
        pos = []
        for raw in raw_boxes:
            boxes.append(self._parse_box(raw, width, height))
            pos.append(self._coverage_key(record, boxes[-1].class_label))
        example = FewShotExample(
            image_id=image_id, task=event.task, boxes=tuple(boxes),
            source=self.source, pos_keys=tuple(pos))
        return example, len(boxes)

    def _parse_box(self, raw: dict, width: int,
                   height: int) -> AnnotationBox:
        try:
            label = str(raw["class"])
            x, y = int(raw["x"]), int(raw["y"])
            w, h = int(raw["w"]), int(raw["h"])
        except (KeyError, TypeError, ValueError):
            raise SubmissionError(
                422, "boxes need class, x, y, w, h fields") from None
        if label not in self.vocabulary:
            raise SubmissionError(
                422, f"class {label!r} outside scenario vocabulary")
        if w <= 0 or h <= 0 or x < 0 or y < 0 \
                or x + w > width or y + h > height:
            raise SubmissionError(
                422, f"box ({x}, {y}, {w}, {h}) outside "
                     f"{width}x{height} image")
        return AnnotationBox(class_label=label,
                             center=(x + w / 2.0, y + h / 2.0),
                             width=float(w), height=float(h))

    def _coverage_key(self, record: wd.ImageRecord, label: str):
        for entry in record.truth:
            if entry.box.class_label == label:
                ctx = det.classify_context(entry.box.depth_to_top,
                                           record.camera_speed,
                                           entry.in_clutter)
                return (label, ctx)
        return (label, det.ambient_context(record))


class _Handler(BaseHTTPRequestHandler):
    server_version = "servobot-annotate/1.0"
    protocol_version = "HTTP/1.1"

    @property
    def bridge(self) -> AnnotationBridge:
        return self.server.bridge  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):
        import logging
        logging.getLogger("servobot.server").debug(
            "%s %s", self.address_string(), fmt % args)

    def _route(self) -> Optional[str]:
        path = self.path.split("?", 1)[0].rstrip("/")
        for prefix in API_PREFIXES:
            if path == prefix or path.startswith(prefix + "/"):
                return path[len(prefix):] or "/"
        return None

    def _send_json(self, status: int, doc) -> None:
        blob = json.dumps(doc, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def _send_bytes(self, status: int, blob: bytes, ctype: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def do_GET(self):
        route = self._route()
        if route is None:
            return self._serve_static()
        if route == "/failures":
            return self._send_json(200, self.bridge.pending_failures())
        if route == "/status":
            return self._send_json(200, self.bridge.status())
        if route.startswith("/images/"):
            image_id = route[len("/images/"):]
            blob = self.bridge.image_png(image_id)
            if blob is None:
                return self._send_json(
                    404, {"error": f"unknown image {image_id!r}"})
            return self._send_bytes(200, blob, "image/png")
        return self._send_json(404, {"error": f"no route {route!r}"})

    def do_POST(self):
        route = self._route()
        if route != "/annotations":
            return self._send_json(404, {"error": f"no route {route!r}"})
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length) or b"{}")
            if not isinstance(payload, dict):
                raise ValueError("payload must be a JSON object")
        except (ValueError, json.JSONDecodeError) as err:
            return self._send_json(400, {"error": str(err)})
        try:
            ack = self.bridge.submit(payload)
        except SubmissionError as err:
            return self._send_json(err.status, {"error": str(err)})
        return self._send_json(200, ack)

    def _serve_static(self):
        ui_dir = getattr(self.server, "ui_dir", None)
        path = self.path.split("?", 1)[0]
        if ui_dir:
            rel = "index.html" if path in ("", "/") else path.lstrip("/")
            full = os.path.realpath(os.path.join(ui_dir, rel))
            if full.startswith(os.path.realpath(ui_dir)) \
                    and os.path.isfile(full):
                ctype = mimetypes.guess_type(full)[0] or "text/plain"
                with open(full, "rb") as fh:
                    return self._send_bytes(200, fh.read(), ctype)
        return self._send_json(
            404, {"error": "not found; the API lives under /api/v1"})


class AnnotationServer:
    """Threaded HTTP server wrapper owning one bridge."""

    def __init__(self, bridge: AnnotationBridge, host: str = "127.0.0.1",
                 port: int = 0, ui_dir: Optional[str] = None):
        self.bridge = bridge
        self.httpd = ThreadingHTTPServer((host, port), _Handler)
        self.httpd.bridge = bridge  # type: ignore[attr-defined]
        self.httpd.ui_dir = ui_dir  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> Tuple[str, int]:
        return self.httpd.server_address[:2]

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever,
                                        name="annotation-server",
                                        daemon=True)
        self._thread.start()

    def shutdown(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None
