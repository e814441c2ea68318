"""HTTP rating service: serves trials to raters, records answers in an
append-only CSV log, and aggregates results through the same code path as
offline evaluation.

Endpoints (HTTP/1.1 + JSON):
  POST /studies                     create a study from an exported manifest
  GET  /studies/{id}/next?worker=w  next trial payload or {"done": true}
  POST /studies/{id}/ratings        {"worker","trial","answer"} -> 201
  GET  /studies/{id}/results        aggregated StudyResult JSON
  GET  /media/{ref}                 image bytes
Status codes: 200/201 success, 400 validation, 404 unknown, 409 duplicate.

Persistence is plain files under the data root: each study gets a directory
with its manifest, an append-only ratings.csv (fsynced per row, so an
acknowledged rating survives a crash), and a served.log of trial handouts.
Trial payloads never name the producing models; unblinding happens only in
the results endpoint.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import threading
import urllib.parse
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

import numpy as np

from .metrics import (
    MetricsError,
    RATINGS_CSV_HEADER,
    RatingRecord,
    aggregate_study,
    canonical_json,
    records_from_csv,
)
from .study import StudyManifest, StudyError, Trial

log = logging.getLogger("sgctx.service")


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass
class StudyState:
    study_id: str
    manifest: StudyManifest
    directory: Path
    ratings: list[RatingRecord] = field(default_factory=list)
    served: set[tuple[str, str]] = field(default_factory=set)
    served_order: list[tuple[str, str]] = field(default_factory=list)

    def trial_by_id(self, trial_id: str) -> Optional[Trial]:
        for t in self.manifest.trials:
            if t.id == trial_id:
                return t
        return None

    def rated_pairs(self) -> set[tuple[str, str]]:
        return {(r.worker_id, r.trial_id) for r in self.ratings}

    def counts(self) -> dict[str, int]:
        c = {t.id: 0 for t in self.manifest.trials}
        for r in self.ratings:
            if r.trial_id in c:
                c[r.trial_id] += 1
        return c


class StudyStore:
    """Disk-backed study registry; all mutation happens under one lock."""

    def __init__(self, root, media_root=None, min_control_accuracy: float = 0.8):
        self.root = Path(root)
        self.media_root = Path(media_root) if media_root else self.root
        self.min_control_accuracy = min_control_accuracy
        self.lock = threading.Lock()
        self.studies: dict[str, StudyState] = {}
        (self.root / "studies").mkdir(parents=True, exist_ok=True)
        self._load_existing()

    def _load_existing(self) -> None:
        for d in sorted((self.root / "studies").iterdir()):
            if not (d / "manifest.json").exists():
                continue
            manifest = StudyManifest.from_json((d / "manifest.json").read_text())
            state = StudyState(study_id=d.name, manifest=manifest, directory=d)
            ratings_file = d / "ratings.csv"
            if ratings_file.exists():
                state.ratings = records_from_csv(ratings_file.read_text())
            served_file = d / "served.log"
            if served_file.exists():
                for line in served_file.read_text().splitlines():
                    if line:
                        worker, trial = line.split("\t")
                        state.served.add((worker, trial))
                        state.served_order.append((worker, trial))
            self.studies[d.name] = state
            log.info("loaded study %s (%d ratings)", d.name, len(state.ratings))

    # -- mutations

    def create_study(self, manifest_doc: dict) -> str:
        try:
            manifest = StudyManifest.from_json(json.dumps(manifest_doc))
        except (StudyError, KeyError, TypeError) as exc:
            raise ApiError(400, f"invalid manifest: {exc}") from exc
        missing = [
            t.id
            for t in manifest.trials
            for ref in t.media
            if not (self.media_root / ref).exists()
        ]
        if missing:
            raise ApiError(
                400, f"missing media for trials: {sorted(set(missing))[:10]}"
            )
        with self.lock:
            study_id = f"s{len(self.studies) + 1:04d}"
            d = self.root / "studies" / study_id
            d.mkdir(parents=True)
            (d / "manifest.json").write_text(manifest.to_json())
            with open(d / "ratings.csv", "w", newline="") as fh:
                fh.write(",".join(RATINGS_CSV_HEADER) + "\n")
            state = StudyState(study_id=study_id, manifest=manifest, directory=d)
            self.studies[study_id] = state
        return study_id

    def _worker_order(self, state: StudyState, worker: str) -> list[str]:
        digest = np.frombuffer(
            f"{state.manifest.seed}:{worker}".encode("utf-8"), dtype=np.uint8
        )
        rng = np.random.default_rng(
            np.random.SeedSequence([state.manifest.seed, *digest.tolist()])
        )
        ids = [t.id for t in state.manifest.trials]
        return [ids[i] for i in rng.permutation(len(ids))]

    def next_task(self, study_id: str, worker: str) -> dict:
        state = self._get(study_id)
        if not worker:
            raise ApiError(400, "missing worker token")
        with self.lock:
            rated = state.rated_pairs()
            order = self._worker_order(state, worker)
            rated_by_worker = {t for w, t in rated if w == worker}

            # re-serve a pending handout first so refreshes are stable
            pending = [
                t for t in order
                if (worker, t) in state.served and t not in rated_by_worker
            ]
            if pending:
                return self._payload(state, pending[0], worker, rated_by_worker)

            counts = state.counts()
            candidates = [
                t for t in order
                if t not in rated_by_worker
                and (worker, t) not in state.served
                and counts[t] < state.manifest.target_ratings
            ]
            if not candidates:
                return {"done": True, "rated": len(rated_by_worker)}
            # balance toward the target: lowest global count first,
            # ties broken by the worker's shuffled order
            best = min(candidates, key=lambda t: (counts[t], order.index(t)))
            state.served.add((worker, best))
            state.served_order.append((worker, best))
            with open(state.directory / "served.log", "a") as fh:
                fh.write(f"{worker}\t{best}\n")
            return self._payload(state, best, worker, rated_by_worker)

    def _payload(self, state, trial_id, worker, rated_by_worker) -> dict:
        trial = state.trial_by_id(trial_id)
        return {
            "trial_id": trial.id,
            "design": trial.design,
            "media": [f"/media/{urllib.parse.quote(ref)}" for ref in trial.media],
            "prompt": trial.prompt,
            "progress": {
                "rated": len(rated_by_worker),
                "total": len(state.manifest.trials),
            },
        }

    def submit_rating(self, study_id: str, worker: str, trial_id: str, answer: str) -> None:
        state = self._get(study_id)
        trial = state.trial_by_id(trial_id)
        if trial is None:
            raise ApiError(400, f"unknown trial {trial_id!r}")
        valid = ("yes", "no") if trial.design == "mors" else ("A", "B")
        if answer not in valid:
            raise ApiError(400, f"answer must be one of {valid}, got {answer!r}")
        with self.lock:
            if (worker, trial_id) not in state.served:
                raise ApiError(400, f"trial {trial_id!r} was not served to this worker")
            if (worker, trial_id) in state.rated_pairs():
                raise ApiError(409, f"duplicate rating for trial {trial_id!r}")
            record = RatingRecord(
                worker_id=worker,
                trial_id=trial_id,
                design=trial.design,
                item_ref=trial.item_ref(),
                side_a_model=trial.side_a_model,
                answer=answer,
                is_control=trial.is_control,
                control_truth=trial.control_truth,
            )
            row = io.StringIO()
            w = csv.writer(row, lineterminator="\n")
            w.writerow(
                [
                    record.worker_id, record.trial_id, record.design,
                    record.item_ref, record.side_a_model, record.answer,
                    "true" if record.is_control else "false", record.control_truth,
                ]
            )
            # fsync before acknowledging: a crash must not lose an ack'd rating
            with open(state.directory / "ratings.csv", "a", newline="") as fh:
                fh.write(row.getvalue())
                fh.flush()
                os.fsync(fh.fileno())
            state.ratings.append(record)

    def results(self, study_id: str) -> dict:
        state = self._get(study_id)
        with self.lock:
            records = list(state.ratings)
        if not records:
            raise ApiError(400, "no ratings yet")
        try:
            result = aggregate_study(
                records, state.manifest.design,
                min_control_accuracy=self.min_control_accuracy,
            )
        except MetricsError as exc:
            raise ApiError(400, str(exc)) from exc
        return result.to_json_dict()

    def _get(self, study_id: str) -> StudyState:
        state = self.studies.get(study_id)
        if state is None:
            raise ApiError(404, f"unknown study {study_id!r}")
        return state


# ---------------------------------------------------------------------------
# HTTP plumbing

_CONTENT_TYPES = {
    ".ppm": "image/x-portable-pixmap",
    ".png": "image/png",
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
}


def make_handler(store: StudyStore, ui_dir: Optional[Path] = None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

        def _cors(self):
            # the UI may be hosted separately from the service
            self.send_header("Access-Control-Allow-Origin", "*")

        def _send_json(self, doc, status=200):
            body = canonical_json(doc).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self._cors()
            self.end_headers()
            self.wfile.write(body)

        def do_OPTIONS(self):
            self.send_response(204)
            self._cors()
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def _send_error(self, exc: ApiError):
            self._send_json({"error": exc.message}, status=exc.status)

        def _read_json(self) -> dict:
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length)
            try:
                return json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ApiError(400, f"invalid JSON body: {exc}") from exc

        def _serve_file(self, path: Path):
            if not path.is_file():
                raise ApiError(404, f"no such file {path.name}")
            body = path.read_bytes()
            self.send_response(200)
            ctype = _CONTENT_TYPES.get(path.suffix, "application/octet-stream")
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self._cors()
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            try:
                parsed = urllib.parse.urlparse(self.path)
                parts = [p for p in parsed.path.split("/") if p]
                if parsed.path.startswith("/media/"):
                    ref = urllib.parse.unquote(parsed.path[len("/media/"):])
                    target = (store.media_root / ref).resolve()
                    if not str(target).startswith(str(store.media_root.resolve())):
                        raise ApiError(400, "invalid media path")
                    return self._serve_file(target)
                if len(parts) == 3 and parts[0] == "studies" and parts[2] == "next":
                    worker = urllib.parse.parse_qs(parsed.query).get("worker", [""])[0]
                    return self._send_json(store.next_task(parts[1], worker))
                if len(parts) == 3 and parts[0] == "studies" and parts[2] == "results":
                    return self._send_json(store.results(parts[1]))
                if ui_dir is not None:
                    rel = parsed.path.lstrip("/") or "index.html"
                    target = (ui_dir / rel).resolve()
                    if str(target).startswith(str(ui_dir.resolve())) and target.is_file():
                        return self._serve_file(target)
                raise ApiError(404, f"no route for GET {parsed.path}")
            except ApiError as exc:
                self._send_error(exc)

        def do_POST(self):
            try:
                parts = [p for p in self.path.split("?")[0].split("/") if p]
                if parts == ["studies"]:
                    doc = self._read_json()
                    study_id = store.create_study(doc)
                    return self._send_json({"study_id": study_id}, status=201)
                if len(parts) == 3 and parts[0] == "studies" and parts[2] == "ratings":
                    doc = self._read_json()
                    for key in ("worker", "trial", "answer"):
                        if key not in doc:
                            raise ApiError(400, f"missing field {key!r}")
                    store.submit_rating(
                        parts[1], str(doc["worker"]), str(doc["trial"]),
                        str(doc["answer"]),
                    )
                    return self._send_json({"accepted": True}, status=201)
                raise ApiError(404, f"no route for POST {self.path}")
            except ApiError as exc:
                self._send_error(exc)

    return Handler


class RatingService:
    """Owns the HTTP server; start() binds and serves on a daemon thread."""

    def __init__(self, root, host="127.0.0.1", port=0, ui_dir=None,
                 min_control_accuracy: float = 0.8):
        self.store = StudyStore(root, min_control_accuracy=min_control_accuracy)
        self.server = ThreadingHTTPServer(
            (host, port), make_handler(self.store, Path(ui_dir) if ui_dir else None)
        )
        self.thread: Optional[threading.Thread] = None
        self._serving = False

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    def start(self) -> None:
        self._serving = True
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def serve_forever(self) -> None:
        self._serving = True
        self.server.serve_forever()

    def stop(self) -> None:
        # shutdown() blocks forever unless a serve loop was entered
        if self._serving:
            self.server.shutdown()
        self.server.server_close()
        if self.thread:
            self.thread.join(timeout=5)
