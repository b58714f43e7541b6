"""Local HTTP service exposing refinement sessions to the web UI.

JSON over HTTP; point geometry travels as base64-encoded little-endian
float32 inside the JSON envelope. Sessions live in memory; one lock per
session linearizes its operations, and a busy session answers clicks with
409 rather than queueing.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict, Optional

from . import refine as engine
from . import scene as scene_mod
from . import segnet
from .evaluate import miou
from .refine import InteractionRecord, RefineConfig, encode_array
from .scene import CLASS_NAMES, PALETTE, LabeledCloud


class ServiceError(Exception):
    def __init__(self, status, message, extra=None):
        super().__init__(message)
        self.status = status
        self.payload = {"error": message}
        if extra:
            self.payload.update(extra)


@dataclass
class SessionEntry:
    session: engine.RefinementSession
    lock: threading.Lock
    created_at: float
    status: str = "Idle"
    snapshot: Optional[dict] = None   # post-warm-up state for reset
    miou_history: list = field(default_factory=list)


class SessionService:
    """Holds the checkpoint, the scene library, and all live sessions."""

    def __init__(self, checkpoint_path, data_dir=None,
                 default_config: Optional[RefineConfig] = None):
        self.params = segnet.load_params(checkpoint_path)
        self.default_config = default_config or RefineConfig()
        self.data_dir = data_dir
        self.scenes: Dict[str, str] = {}
        if data_dir:
            manifest_path = os.path.join(data_dir, "manifest.json")
            if os.path.exists(manifest_path):
                manifest = scene_mod.load_manifest(manifest_path)
                for split in ("test", "train"):
                    for entry in manifest.get(split, []):
                        self.scenes[entry["name"]] = os.path.join(
                            data_dir, entry["path"])
        self.sessions: Dict[str, SessionEntry] = {}
        self._registry_lock = threading.Lock()

    # -- session lifecycle ---------------------------------------------------

    def create_session(self, body: dict) -> dict:
        cloud = self._resolve_cloud(body)
        config = self.default_config
        if body.get("config"):
            merged = config.to_dict()
            merged.update(body["config"])
            try:
                config = RefineConfig.from_dict(merged)
            except (TypeError, ValueError) as e:
                raise ServiceError(400, f"bad config: {e}")
        session = engine.create_session(cloud, self.params, config)
        engine.warm_up(session)
        sid = uuid.uuid4().hex[:12]
        entry = SessionEntry(session=session, lock=threading.Lock(),
                             created_at=time.time())
        entry.snapshot = self._snapshot(session)
        entry.miou_history.append(self._miou(session))
        with self._registry_lock:
            self.sessions[sid] = entry
        out = self._summary(sid, entry)
        out["baseline_miou"] = self._baseline_miou(session)
        return out

    def _resolve_cloud(self, body) -> LabeledCloud:
        if "ply" in body:
            import tempfile
            try:
                with tempfile.NamedTemporaryFile("w", suffix=".ply",
                                                 delete=False) as f:
                    f.write(body["ply"])
                    path = f.name
                cloud = scene_mod.load_ply(path)
            except scene_mod.PlyParseError as e:
                raise ServiceError(400, f"malformed PLY upload: {e}")
            finally:
                if "path" in locals():
                    os.unlink(path)
            return cloud
        name = body.get("scene")
        if not name:
            raise ServiceError(400, "request needs 'scene' or 'ply'")
        if name not in self.scenes:
            raise ServiceError(404, f"unknown scene {name!r}")
        return scene_mod.load_ply(self.scenes[name])

    def _entry(self, sid) -> SessionEntry:
        with self._registry_lock:
            entry = self.sessions.get(sid)
        if entry is None:
            raise ServiceError(404, f"unknown session {sid!r}")
        return entry

    def _snapshot(self, session) -> dict:
        return {
            "params": session.params.copy(),
            "scores": session.filter_scores.copy(),
            "seg": session.seg,
            "prev_entropies": session.prev_entropies.copy(),
        }

    def _miou(self, session) -> Optional[float]:
        if session.cloud.labels is None:
            return None
        return miou(session.seg.labels, session.cloud.labels,
                    session.num_classes)[0]

    def _baseline_miou(self, session) -> Optional[float]:
        if session.cloud.labels is None:
            return None
        return miou(session.pre_warmup_labels(), session.cloud.labels,
                    session.num_classes)[0]

    def _summary(self, sid, entry) -> dict:
        s = entry.session
        return {
            "id": sid,
            "scene": s.cloud.name,
            "created_at": entry.created_at,
            "status": entry.status,
            "num_points": s.cloud.num_points,
            "num_classes": s.num_classes,
            "click_count": len(s.clicks),
            "rounds": s.round_counter,
            "miou": self._miou(s),
            "has_ground_truth": s.cloud.labels is not None,
        }

    # -- endpoint bodies -------------------------------------------------------

    def get_state(self, sid, detail="summary") -> dict:
        entry = self._entry(sid)
        with entry.lock:
            s = entry.session
            out = self._summary(sid, entry)
            out["clicks"] = [
                {"point_index": c.point_index, "corrected_label": c.corrected_label,
                 "round": c.round, "source": c.source}
                for c in s.clicks]
            out["miou_history"] = entry.miou_history
            if detail == "full":
                cloud = s.cloud
                out["positions"] = encode_array(cloud.positions, "<f4")
                out["colors"] = encode_array(cloud.colors, "<f4")
                out["labels"] = encode_array(s.seg.labels, "<i4")
                out["entropies"] = encode_array(s.seg.entropies, "<f4")
                out["filter_scores"] = encode_array(s.filter_scores, "<f4")
                if cloud.labels is not None:
                    out["gt_labels"] = encode_array(cloud.labels, "<i4")
                out["encoding"] = "base64 little-endian; positions/colors float32 triplets"
            return out

    def post_clicks(self, sid, body) -> dict:
        entry = self._entry(sid)
        if not entry.lock.acquire(blocking=False):
            raise ServiceError(409, "session is busy refining")
        try:
            entry.status = "Refining"
            s = entry.session
            clicks = body.get("clicks", [])
            recs = []
            for c in clicks:
                try:
                    recs.append(InteractionRecord(
                        point_index=int(c["point_index"]),
                        corrected_label=int(c["corrected_label"]),
                        source=str(c.get("source", "human"))))
                except (KeyError, TypeError, ValueError) as e:
                    raise ServiceError(400, f"malformed click: {e}")
            before = s.seg.labels.copy()
            try:
                result = engine.refine(s, recs)
            except engine.ClickValidationError as e:
                raise ServiceError(400, str(e), {"offenders": e.offenders})
            except engine.StateError as e:
                raise ServiceError(400, str(e))
            entry.miou_history.append(self._miou(s))
            changed = result.changed_indices
            return {
                "id": sid,
                "changed_indices": [int(i) for i in changed],
                "new_labels": [int(s.seg.labels[i]) for i in changed],
                "energy_trace": [
                    {"loss": t.loss, "correction": t.correction,
                     "stabilization": t.stabilization,
                     "labels_changed": t.labels_changed}
                    for t in result.trace],
                "miou": self._miou(s),
                "click_count": len(s.clicks),
                "rounds": s.round_counter,
                "status": "Idle",
                "num_changed": int(len(changed)),
                "labels_unchanged_count": int((before == s.seg.labels).sum()),
            }
        finally:
            entry.status = "Idle"
            entry.lock.release()

    def reset_session(self, sid) -> dict:
        entry = self._entry(sid)
        with entry.lock:
            s = entry.session
            snap = entry.snapshot
            s.params = snap["params"].copy()
            s.filter_scores = snap["scores"].copy()
            s.seg = snap["seg"]
            s.prev_entropies = snap["prev_entropies"].copy()
            s.clicks = []
            s.click_history = []
            s.round_counter = 0
            s.energy_log = []
            s.tt_opt_state = engine.optim.OptimizerState()
            entry.miou_history = [self._miou(s)]
            return self._summary(sid, entry)

    def export(self, sid) -> dict:
        entry = self._entry(sid)
        with entry.lock:
            return engine.export_session(entry.session)

    def scene_list(self) -> dict:
        return {"scenes": sorted(self.scenes)}

    def class_info(self) -> dict:
        return {
            "names": list(CLASS_NAMES),
            "palette": [[float(v) for v in row] for row in PALETTE],
        }


def make_handler(service: SessionService):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            pass

        def _send(self, status, payload):
            raw = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Access-Control-Allow-Methods",
                             "GET, POST, OPTIONS")
            self.end_headers()
            self.wfile.write(raw)

        def _body(self):
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return {}
            try:
                return json.loads(self.rfile.read(length))
            except json.JSONDecodeError as e:
                raise ServiceError(400, f"invalid JSON body: {e}")

        def _route(self, method):
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            query = {}
            if "?" in self.path:
                for kv in self.path.split("?", 1)[1].split("&"):
                    if "=" in kv:
                        k, v = kv.split("=", 1)
                        query[k] = v
            try:
                if method == "GET" and parts == ["scenes"]:
                    return self._send(200, service.scene_list())
                if method == "GET" and parts == ["classes"]:
                    return self._send(200, service.class_info())
                if method == "POST" and parts == ["sessions"]:
                    return self._send(200, service.create_session(self._body()))
                if len(parts) == 3 and parts[0] == "sessions":
                    sid, action = parts[1], parts[2]
                    if method == "GET" and action == "state":
                        detail = query.get("detail", "summary")
                        return self._send(200, service.get_state(sid, detail))
                    if method == "POST" and action == "clicks":
                        return self._send(200, service.post_clicks(sid, self._body()))
                    if method == "POST" and action == "reset":
                        return self._send(200, service.reset_session(sid))
                    if method == "GET" and action == "export":
                        return self._send(200, service.export(sid))
                raise ServiceError(404, f"no route for {method} {self.path}")
            except ServiceError as e:
                self._send(e.status, e.payload)

        def do_GET(self):
            self._route("GET")

        def do_POST(self):
            self._route("POST")

        def do_OPTIONS(self):
            self._send(200, {})

    return Handler


def serve(checkpoint_path, data_dir=None, host="127.0.0.1", port=8008,
          default_config: Optional[RefineConfig] = None):
    service = SessionService(checkpoint_path, data_dir, default_config)
    server = ThreadingHTTPServer((host, port), make_handler(service))
    server.service = service
    return server
