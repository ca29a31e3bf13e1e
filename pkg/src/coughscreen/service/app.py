"""HTTP screening service.

    POST /v1/submissions          multipart: ``audio`` file + ``metadata`` JSON
    GET  /v1/submissions/{id}     stored record (audio only with the admin token)
    GET  /v1/submissions?since=   records in received order
    GET  /v1/health               model version, uptime, in-flight requests

Every JSON response carries the advisory text.
"""

from __future__ import annotations

import base64
import datetime as dt
import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Optional

from fastapi import FastAPI, File, Form, Header, Request, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from starlette.exceptions import HTTPException as StarletteHTTPException

from ..audio_io import decode_wav
from ..bundle import ModelBundle, bundle_hash, dumps_bundle, load_bundle
from ..config import PipelineConfig
from ..errors import AudioError, TruncatedFile
from ..pipeline import ADVISORY, NO_COUGH, ScreeningResult, bundle_pipeline_config, screen
from .store import AudioStore, RecordLog

log = logging.getLogger(__name__)

DEFAULT_PORT = 8080
DEFAULT_MAX_UPLOAD = 10 * 1024 * 1024
TRIAGE_FIELDS = ("symptomatic_now", "close_contact", "breathing_problems", "risk_group")


@dataclass(frozen=True)
class ServiceSettings:
    port: int = DEFAULT_PORT
    model_path: str = ""
    data_dir: str = "cough-data"
    max_upload: int = DEFAULT_MAX_UPLOAD
    admin_token: Optional[str] = None
    fsync: bool = True

    @classmethod
    def from_env(cls, env=None, **overrides) -> "ServiceSettings":
        env = os.environ if env is None else env
        kw = {}
        if "COUGH_PORT" in env:
            kw["port"] = int(env["COUGH_PORT"])
        if "COUGH_MODEL_PATH" in env:
            kw["model_path"] = env["COUGH_MODEL_PATH"]
        if "COUGH_DATA_DIR" in env:
            kw["data_dir"] = env["COUGH_DATA_DIR"]
        if "COUGH_MAX_UPLOAD" in env:
            kw["max_upload"] = int(env["COUGH_MAX_UPLOAD"])
        if env.get("COUGH_ADMIN_TOKEN"):
            kw["admin_token"] = env["COUGH_ADMIN_TOKEN"]
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


class ApiError(Exception):
    def __init__(self, status: int, code: str, detail: str = ""):
        super().__init__(detail or code)
        self.status, self.code, self.detail = status, code, detail


def _reply(status: int, body: dict) -> JSONResponse:
    return JSONResponse(status_code=status, content={**body, "advisory": ADVISORY})


def _error(status: int, code: str, detail: str = "") -> JSONResponse:
    return _reply(status, {"error": code, "detail": detail})


def _utc_now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="microseconds")


def parse_metadata(text: Optional[str]) -> dict:
    """Validate the metadata JSON. Consent is checked separately."""
    if text is None or not text.strip():
        raise ApiError(400, "MalformedUpload", "metadata field is required")
    try:
        meta = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ApiError(400, "MalformedUpload", f"metadata is not JSON: {exc.msg}")
    if not isinstance(meta, dict):
        raise ApiError(400, "MalformedUpload", "metadata must be a JSON object")
    triage = meta.get("triage") or {}
    if not isinstance(triage, dict):
        raise ApiError(400, "MalformedUpload", "triage must be an object")
    for key, value in triage.items():
        if key not in TRIAGE_FIELDS:
            raise ApiError(400, "MalformedUpload", f"unknown triage field {key!r}")
        if value is not None and not isinstance(value, bool):
            raise ApiError(400, "MalformedUpload", f"triage.{key} must be a boolean or null")
    declared = meta.get("declared_test")
    if declared is not None:
        if not isinstance(declared, dict) or set(declared) - {"test_type", "test_date"}:
            raise ApiError(400, "MalformedUpload", "declared_test must be {test_type, test_date}")
        if declared.get("test_date") is not None:
            try:
                dt.date.fromisoformat(declared["test_date"])
            except (TypeError, ValueError):
                raise ApiError(400, "MalformedUpload", "declared_test.test_date must be YYYY-MM-DD")
    consent = meta.get("consent")
    if consent is not None and not isinstance(consent, bool):
        raise ApiError(400, "MalformedUpload", "consent must be a boolean")
    return {"triage": triage, "declared_test": declared, "consent": consent}


class ScreeningService:
    """Pipeline state shared by all requests: bundle, stores and counters."""

    def __init__(self, settings: ServiceSettings, bundle: Optional[ModelBundle] = None,
                 config: Optional[PipelineConfig] = None):
        self.settings = settings
        self.started = time.monotonic()
        self.bundle = bundle
        self.model_version = None
        if bundle is not None:
            self.model_version = bundle_hash(dumps_bundle(bundle))
        self.config = bundle_pipeline_config(bundle, config) if bundle is not None else (config or PipelineConfig())
        os.makedirs(settings.data_dir, exist_ok=True)
        self.audio = AudioStore(os.path.join(settings.data_dir, "audio"))
        self.log = RecordLog(os.path.join(settings.data_dir, "records.cglg"), fsync=settings.fsync)
        self._inflight = 0
        self._count_lock = threading.Lock()

    @classmethod
    def from_model_path(cls, settings: ServiceSettings, config: Optional[PipelineConfig] = None):
        with open(settings.model_path, "rb") as f:
            data = f.read()
        from ..bundle import loads_bundle

        svc = cls(settings, loads_bundle(data), config)
        svc.model_version = bundle_hash(data)
        return svc

    @property
    def queue_depth(self) -> int:
        return self._inflight

    def enter(self):
        with self._count_lock:
            self._inflight += 1

    def leave(self):
        with self._count_lock:
            self._inflight -= 1

    def submit(self, audio: bytes, metadata: dict) -> tuple[int, dict]:
        if self.bundle is None:
            raise ApiError(503, "ModelUnavailable", "no model bundle is loaded")
        if not audio:
            raise ApiError(400, "MalformedUpload", "audio file is empty")
        if metadata["consent"] is not True:
            raise ApiError(400, "MissingConsent", "consent must be true to screen and store a submission")
        submission_id = uuid.uuid4().hex
        received_at = _utc_now()
        try:
            buffer = decode_wav(audio, submission_id)
        except TruncatedFile as exc:
            raise ApiError(400, "MalformedUpload", str(exc))
        except AudioError as exc:
            raise ApiError(415, "UnsupportedAudio", str(exc))
        result = screen(self.bundle, buffer, self.config, submission_id, self.model_version)
        status = 422 if result.label == NO_COUGH else 201
        digest = self.audio.put(audio)
        record = {
            "submission_id": submission_id,
            "received_at": received_at,
            "triage": metadata["triage"],
            "declared_test": metadata["declared_test"],
            "consent": True,
            "audio_bytes": len(audio),
            "status": status,
            "result": result.to_dict(),
        }
        self.log.append(record, digest)
        return status, result.to_dict()

    def record_view(self, rec, include_audio: bool = False) -> dict:
        out = dict(rec.payload)
        out["seq"] = rec.seq
        out["audio_sha256"] = rec.audio_sha256
        if include_audio:
            out["audio_base64"] = base64.b64encode(self.audio.get(rec.audio_sha256)).decode("ascii")
        return out


def create_app(service: ScreeningService) -> FastAPI:
    app = FastAPI(title="cough screening", version="1")
    app.state.service = service

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return _error(exc.status, exc.code, exc.detail)

    @app.exception_handler(StarletteHTTPException)
    async def _http_error(request: Request, exc: StarletteHTTPException):
        code = {404: "Unknown", 405: "MethodNotAllowed"}.get(exc.status_code, "HttpError")
        return _error(exc.status_code, code, str(exc.detail))

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        return _error(400, "MalformedUpload", "; ".join(str(e.get("msg")) for e in exc.errors()))

    @app.middleware("http")
    async def _count(request: Request, call_next):
        service.enter()
        try:
            return await call_next(request)
        finally:
            service.leave()

    @app.post("/v1/submissions")
    def post_submission(audio: UploadFile = File(...), metadata: Optional[str] = Form(None)):
        limit = service.settings.max_upload
        data = audio.file.read(limit + 1)
        if len(data) > limit:
            raise ApiError(413, "PayloadTooLarge", f"audio exceeds {limit} bytes")
        meta = parse_metadata(metadata)
        status, result = service.submit(data, meta)
        return _reply(status, result)

    @app.get("/v1/submissions/{submission_id}")
    def get_submission(submission_id: str, include_audio: bool = False,
                       x_admin_token: Optional[str] = Header(None)):
        rec = service.log.get(submission_id)
        if rec is None:
            raise ApiError(404, "Unknown", f"no submission {submission_id}")
        if include_audio:
            token = service.settings.admin_token
            if not token or x_admin_token != token:
                raise ApiError(403, "Forbidden", "audio retrieval needs the admin token")
        return _reply(200, service.record_view(rec, include_audio))

    @app.get("/v1/submissions")
    def list_submissions(since: Optional[str] = None):
        records = service.log.records()
        if since:
            if since.isdigit():
                records = [r for r in records if r.seq > int(since)]
            else:
                try:
                    cutoff = dt.datetime.fromisoformat(since)
                except ValueError:
                    raise ApiError(400, "MalformedQuery", "since must be a record sequence number or ISO timestamp")
                if cutoff.tzinfo is None:
                    cutoff = cutoff.replace(tzinfo=dt.timezone.utc)
                records = [r for r in records if dt.datetime.fromisoformat(r.payload["received_at"]) > cutoff]
        return _reply(200, {"count": len(records), "records": [service.record_view(r) for r in records]})

    @app.get("/v1/health")
    def health():
        return _reply(200, {
            "status": "ok" if service.bundle is not None else "model_unavailable",
            "model_version": service.model_version,
            "uptime": round(time.monotonic() - service.started, 3),
            "queue_depth": service.queue_depth,
        })

    return app


EXIT_MODEL_MISSING = 2


def serve(settings: ServiceSettings, config: Optional[PipelineConfig] = None) -> int:
    """Load the model (fail fast with exit code 2) and run uvicorn until stopped."""
    import uvicorn

    if not settings.model_path or not os.path.isfile(settings.model_path):
        log.error("model bundle not found: %r", settings.model_path)
        return EXIT_MODEL_MISSING
    try:
        service = ScreeningService.from_model_path(settings, config)
    except Exception as exc:  # any unreadable bundle is a startup failure
        log.error("cannot load model bundle %s: %s", settings.model_path, exc)
        return EXIT_MODEL_MISSING
    uvicorn.run(create_app(service), host="0.0.0.0", port=settings.port, log_level="info")
    return 0
