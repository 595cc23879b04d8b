"""Human rating collection: storage, the trimmed-mean protocol, HTTP API.

Ratings live on the 10-level grid {0.0, 0.1, ..., 0.9}; higher means better
synthesis quality. One active rating per (image, rater) - resubmitting
upserts. Aggregation drops exactly one highest and one lowest rating, means
the rest, and rounds back to the grid (ties toward the higher level); it
needs at least three ratings so something survives the trim.

Persistence is append-only JSON lines, flushed to disk before any request
is acknowledged, with periodic compaction rewriting only the active
records. The HTTP service (stdlib threading server; writes serialized by a
lock) drives the annotation frontend:

    GET  /api/pairs/next?rater=<id>     next unrated pair + panel URLs
    POST /api/ratings                   {image_id, rater_id, level}
    GET  /api/images/<id>/aggregate     trimmed-mean level
    GET  /api/images/<id>/panels/<p>    PNG panels (reference, synthesized,
                                        error map, k-space amplitudes)
    GET  /api/export                    stage-2 training manifest (JSON lines)

Static frontend files, when a directory is configured, are served at /.
"""

import io
import json
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np
from PIL import Image

from .errors import (
    InsufficientDataError,
    KCrossError,
    NotFoundError,
    ValidationError,
)
from .kspace import log_amplitude_panel
from .phantom import RATING_LEVELS

GRID = {round(i / 10, 1) for i in range(10)}


def validate_level(level):
    try:
        level = float(level)
    except (TypeError, ValueError):
        raise ValidationError(f"rating level must be a number, got {level!r}")
    snapped = round(level, 1)
    if abs(snapped - level) > 1e-9 or snapped not in GRID:
        raise ValidationError(
            f"rating level must be one of {sorted(GRID)}, got {level}"
        )
    return snapped


@dataclass
class RatingRecord:
    image_id: str
    rater_id: str
    level: float
    timestamp: float

    def to_json(self):
        return json.dumps(
            {
                "image_id": self.image_id,
                "rater_id": self.rater_id,
                "level": self.level,
                "timestamp": self.timestamp,
            },
            sort_keys=True,
        )


def aggregate_levels(levels):
    """Drop one max and one min occurrence, mean the rest, snap to grid."""
    if len(levels) < 3:
        raise InsufficientDataError(
            f"aggregation needs >= 3 ratings, got {len(levels)}", count=len(levels)
        )
    tenths = sorted(round(lv * 10) for lv in levels)
    trimmed = tenths[1:-1]
    total = sum(trimmed)
    count = len(trimmed)
    rounded = (2 * total + count) // (2 * count)  # half-up in tenths
    return rounded / 10


class RatingStore:
    """Append-only JSONL persistence with per-(image, rater) upsert."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._active = {}  # (image_id, rater_id) -> RatingRecord
        self._appended = 0
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                raw = json.loads(line)
                record = RatingRecord(
                    image_id=raw["image_id"],
                    rater_id=raw["rater_id"],
                    level=raw["level"],
                    timestamp=raw["timestamp"],
                )
                self._active[(record.image_id, record.rater_id)] = record
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")

    def submit(self, image_id, rater_id, level, known_images=None):
        level = validate_level(level)
        if known_images is not None and image_id not in known_images:
            raise NotFoundError(f"unknown image id: {image_id!r}")
        if not rater_id:
            raise ValidationError("rater id must be non-empty")
        record = RatingRecord(
            image_id=image_id, rater_id=str(rater_id), level=level, timestamp=time.time()
        )
        with self._lock:
            self._fh.write(record.to_json() + "\n")
            self._fh.flush()
            import os

            os.fsync(self._fh.fileno())
            self._active[(image_id, record.rater_id)] = record
            self._appended += 1
            if self._appended >= 1000 and self._appended >= 2 * len(self._active):
                self._compact_locked()
        return record

    def _compact_locked(self):
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            for record in self._active.values():
                fh.write(record.to_json() + "\n")
        self._fh.close()
        tmp.replace(self.path)
        self._fh = open(self.path, "a")
        self._appended = len(self._active)

    def compact(self):
        with self._lock:
            self._compact_locked()

    def ratings_for(self, image_id):
        with self._lock:
            return [r for (img, _), r in self._active.items() if img == image_id]

    def rated_by(self, rater_id):
        with self._lock:
            return {img for (img, rater) in self._active if rater == rater_id}

    def aggregate(self, image_id):
        return aggregate_levels([r.level for r in self.ratings_for(image_id)])

    def count(self):
        with self._lock:
            return len(self._active)

    def close(self):
        self._fh.close()


class RatingService:
    """Request-independent core logic behind the HTTP handler."""

    def __init__(self, records, store, frontend_dir=None):
        self.records = records
        self.by_id = {r.id: r for r in records}
        self.store = store
        self.frontend_dir = Path(frontend_dir) if frontend_dir else None

    def next_pair(self, rater_id):
        if not rater_id:
            raise ValidationError("missing rater id")
        done = self.store.rated_by(rater_id)
        remaining = [r for r in self.records if r.id not in done]
        if not remaining:
            return {"done": True, "remaining": 0, "rated": len(done)}
        record = remaining[0]
        panels = {
            name: f"/api/images/{record.id}/panels/{name}.png"
            for name in ("reference", "synthesized", "error_map", "kspace_reference", "kspace_synthesized")
        }
        return {
            "done": False,
            "image_id": record.id,
            "healthy": record.healthy,
            "panels": panels,
            "remaining": len(remaining),
            "levels": list(RATING_LEVELS),
        }

    def submit(self, image_id, rater_id, level):
        record = self.store.submit(image_id, rater_id, level, known_images=self.by_id)
        return {
            "stored": True,
            "image_id": record.image_id,
            "rater_id": record.rater_id,
            "level": record.level,
        }

    def aggregate(self, image_id):
        if image_id not in self.by_id:
            raise NotFoundError(f"unknown image id: {image_id!r}")
        ratings = self.store.ratings_for(image_id)
        level = aggregate_levels([r.level for r in ratings])
        return {"image_id": image_id, "level": level, "count": len(ratings)}

    def export_lines(self):
        """Stage-2 training manifest: every image with an aggregate."""
        lines = []
        for record in self.records:
            ratings = self.store.ratings_for(record.id)
            if len(ratings) < 3:
                continue
            lines.append(
                json.dumps(
                    {
                        "id": record.id,
                        "synth": str(record.synth_path),
                        "target": str(record.target_path),
                        "healthy": record.healthy,
                        "rated_level": aggregate_levels([r.level for r in ratings]),
                        "n_ratings": len(ratings),
                    },
                    sort_keys=True,
                )
            )
        return lines

    def render_panel(self, image_id, panel):
        if image_id not in self.by_id:
            raise NotFoundError(f"unknown image id: {image_id!r}")
        record = self.by_id[image_id]
        if panel == "reference":
            gray = np.clip(record.load_target(), 0, 1)
        elif panel == "synthesized":
            gray = np.clip(record.load_synth(), 0, 1)
        elif panel == "error_map":
            # absolute error, fixed 0..0.5 scale so panels compare across pairs
            gray = np.clip(np.abs(record.load_target() - record.load_synth()) / 0.5, 0, 1)
        elif panel == "kspace_reference":
            return _png_bytes(log_amplitude_panel(record.load_target()))
        elif panel == "kspace_synthesized":
            return _png_bytes(log_amplitude_panel(record.load_synth()))
        else:
            raise NotFoundError(f"unknown panel: {panel!r}")
        return _png_bytes(np.round(gray * 255).astype(np.uint8))


def _png_bytes(gray_u8):
    buf = io.BytesIO()
    Image.fromarray(gray_u8, mode="L").save(buf, format="PNG")
    return buf.getvalue()


_ERROR_STATUS = {
    "validation": 400,
    "invalid_argument": 400,
    "not_found": 404,
    "insufficient_data": 409,
}


def make_handler(service):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):  # tests and CLI runs stay quiet
            pass

        def _send_json(self, payload, status=200):
            body = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_error(self, exc):
            status = _ERROR_STATUS.get(getattr(exc, "code", "error"), 500)
            self._send_json(exc.payload() if isinstance(exc, KCrossError) else
                            {"error": "internal", "message": str(exc)}, status)

        def _send_bytes(self, data, content_type):
            self.send_response(200)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            try:
                if url.path == "/api/pairs/next":
                    rater = parse_qs(url.query).get("rater", [""])[0]
                    self._send_json(service.next_pair(rater))
                elif len(parts) == 4 and parts[:2] == ["api", "images"] and parts[3] == "aggregate":
                    self._send_json(service.aggregate(parts[2]))
                elif len(parts) == 5 and parts[:2] == ["api", "images"] and parts[3] == "panels":
                    panel = parts[4].removesuffix(".png")
                    self._send_bytes(service.render_panel(parts[2], panel), "image/png")
                elif url.path == "/api/export":
                    body = "\n".join(service.export_lines())
                    self._send_bytes(body.encode(), "application/jsonl")
                else:
                    self._serve_static(url.path)
            except KCrossError as exc:
                self._send_error(exc)

        def do_POST(self):
            url = urlparse(self.path)
            try:
                if url.path != "/api/ratings":
                    raise NotFoundError(f"no such endpoint: {url.path}")
                length = int(self.headers.get("Content-Length", 0))
                try:
                    payload = json.loads(self.rfile.read(length) or b"{}")
                except json.JSONDecodeError:
                    raise ValidationError("request body must be JSON")
                self._send_json(
                    service.submit(
                        payload.get("image_id"),
                        payload.get("rater_id"),
                        payload.get("level"),
                    )
                )
            except KCrossError as exc:
                self._send_error(exc)

        def _serve_static(self, path):
            if service.frontend_dir is None:
                raise NotFoundError("no frontend configured")
            rel = path.lstrip("/") or "index.html"
            target = (service.frontend_dir / rel).resolve()
            if not str(target).startswith(str(service.frontend_dir.resolve())) or not target.is_file():
                raise NotFoundError(f"no such file: {path}")
            types = {".html": "text/html", ".js": "text/javascript", ".css": "text/css",
                     ".png": "image/png", ".map": "application/json"}
            self._send_bytes(target.read_bytes(), types.get(target.suffix, "application/octet-stream"))

    return Handler


def serve(service, host="127.0.0.1", port=8008):
    """Build the threading HTTP server (call .serve_forever() to run)."""
    return ThreadingHTTPServer((host, port), make_handler(service))
