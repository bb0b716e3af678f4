"""HTTP service exposing the annotation workflow to the review UI.

Every mutating endpoint appends exactly one workflow event; GETs append
nothing, so restarting the service from the event log restores identical
state. Mask pixels travel as base64-encoded P5 graymaps inside JSON
bodies and are stored on disk next to the log; the workflow state holds
only refs.

Error mapping mirrors the workflow taxonomy: unknown ids are 404,
invalid state transitions 409, malformed bodies 422. Re-POSTing an
identical decision for a terminal item returns 409 with the stored
result and a conflict indicator, mutating nothing.
"""

from __future__ import annotations

import base64
import binascii
import io
import queue
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from . import data
from .errors import ConfigurationError, ParseError, StateError, UsageError
from .workflow import TERMINAL, WorkflowEngine


class MaskStore:
    """Content store for mask and image bytes, addressed by relative ref."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._counter = 0
        self._lock = threading.Lock()

    def _resolve(self, ref: str) -> Path:
        path = (self.root / ref).resolve()
        if self.root.resolve() not in path.parents and path != self.root.resolve():
            raise UsageError(f"ref {ref!r} escapes the store")
        return path

    def put(self, payload: bytes, hint: str) -> str:
        with self._lock:
            self._counter += 1
            ref = f"{hint}-{self._counter:06d}.pgm"
        path = self._resolve(ref)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
        return ref

    def get(self, ref: str) -> bytes:
        path = self._resolve(ref)
        if not path.exists():
            raise UsageError(f"no stored mask for ref {ref!r}")
        return path.read_bytes()

    def has(self, ref: str) -> bool:
        try:
            return self._resolve(ref).exists()
        except UsageError:
            return False


@dataclass
class JobStatus:
    job_id: str
    kind: str
    state: str = "queued"  # queued -> running -> done | failed
    progress: float = 0.0
    result_ref: str = ""
    error: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class JobManager:
    """Single-worker job runner; at most one training job runs at a time."""

    def __init__(self, artifacts_dir):
        self.artifacts = Path(artifacts_dir)
        self.artifacts.mkdir(parents=True, exist_ok=True)
        self.jobs: dict[str, JobStatus] = {}
        self._queue: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._worker: Optional[threading.Thread] = None

    def submit(self, kind: str, spec: dict) -> JobStatus:
        job = JobStatus(job_id=uuid.uuid4().hex[:12], kind=kind)
        with self._lock:
            self.jobs[job.job_id] = job
        self._queue.put((job, spec))
        self._ensure_worker()
        return job

    def get(self, job_id: str) -> JobStatus:
        job = self.jobs.get(job_id)
        if job is None:
            raise UsageError(f"unknown job {job_id!r}")
        return job

    def _ensure_worker(self) -> None:
        with self._lock:
            if self._worker is None or not self._worker.is_alive():
                self._worker = threading.Thread(target=self._run, daemon=True)
                self._worker.start()

    def _run(self) -> None:
        while True:
            try:
                job, spec = self._queue.get(timeout=0.5)
            except queue.Empty:
                return
            job.state = "running"
            try:
                job.result_ref = self._run_train(job, spec)
                job.progress = 1.0
                job.state = "done"
            except Exception as exc:  # job errors surface via status, not the API
                job.error = str(exc)
                job.state = "failed"

    def _run_train(self, job: JobStatus, spec: dict) -> str:
        from .models import ModelConfig, build_model
        from .training import TrainConfig, train

        records = data.load_manifest(spec["manifest"])
        samples = data.load_samples(records, kind=spec.get("kind", "lung"))
        n_val = max(1, len(samples) // 5)
        train_set, val_set = samples[n_val:], samples[:n_val]
        config = TrainConfig(
            alpha=spec.get("alpha", 1e-4),
            batch_size=spec.get("batch_size", 4),
            max_epochs=spec.get("max_epochs", 40),
            seed=spec.get("seed", 0),
        )
        model = build_model(
            ModelConfig(
                arch=spec.get("arch", "unet"),
                depth=spec.get("depth", 3),
                base_channels=spec.get("base_channels", 8),
            ),
            seed=spec.get("seed", 0),
        )
        result = train(model, train_set, val_set, config)
        job.progress = result.stopped_epoch / config.max_epochs
        out = self.artifacts / f"{job.job_id}.segw"
        data.save_weights(model, out)
        return str(out)


class DecisionBody(BaseModel):
    decision: str
    reviewer: str
    mask: Optional[str] = None  # base64 P5 graymap
    note: str = ""


class MdResolveBody(BaseModel):
    note: str
    mask: str
    reviewer: str = ""


class SelectBody(BaseModel):
    choice: object  # 1-6 or "deny"
    reviewer: str = ""


class TrainJobBody(BaseModel):
    manifest: str
    kind: str = "lung"
    arch: str = "unet"
    depth: int = 3
    base_channels: int = 8
    max_epochs: int = 40
    batch_size: int = 4
    alpha: float = 1e-4
    seed: int = 0


def _decode_mask(encoded: str) -> bytes:
    try:
        raw = base64.b64decode(encoded, validate=True)
    except (binascii.Error, ValueError):
        raise ParseError("mask is not valid base64")
    data.parse_pgm(raw)  # malformed masks are a 422, not a stored blob
    return raw


def _item_view(item) -> dict:
    return item.to_dict()


DECISION_TO_TERMINAL = {"accept": "accepted", "exclude": "excluded", "reject": "modified"}


def create_app(workdir, log_name: str = "events.jsonl") -> FastAPI:
    """Build the service over a work directory (log + mask store + jobs).

    An existing event log is replayed on startup.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    log_path = workdir / log_name
    if log_path.exists():
        engine = WorkflowEngine.from_log(log_path)
    else:
        engine = WorkflowEngine(log_path=log_path)
    store = MaskStore(workdir / "store")
    jobs = JobManager(workdir / "artifacts")
    write_lock = threading.Lock()  # mutations serialize through one writer

    app = FastAPI(title="cxrseg annotation service")
    app.state.engine = engine
    app.state.store = store
    app.state.jobs = jobs

    @app.exception_handler(StateError)
    async def _state_error(request: Request, exc: StateError):
        return JSONResponse(status_code=409, content={"detail": str(exc), "conflict": True})

    @app.exception_handler(UsageError)
    async def _usage_error(request: Request, exc: UsageError):
        status = 404 if str(exc).startswith("unknown") else 422
        return JSONResponse(status_code=status, content={"detail": str(exc)})

    @app.exception_handler(ParseError)
    async def _parse_error(request: Request, exc: ParseError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.exception_handler(ConfigurationError)
    async def _config_error(request: Request, exc: ConfigurationError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    def _get_item(item_id: str):
        item = engine.state.items.get(item_id)
        if item is None:
            raise UsageError(f"unknown item {item_id!r}")
        return item

    @app.get("/api/queue")
    def get_queue(limit: int = Query(default=50, ge=1, le=1000)):
        pending = [
            _item_view(item)
            for item in engine.state.items.values()
            if item.status == "pending"
        ]
        pending.sort(key=lambda d: d["id"])
        return {"items": pending[:limit], "total_pending": len(pending)}

    @app.get("/api/items/{item_id}")
    def get_item(item_id: str):
        return _item_view(_get_item(item_id))

    @app.get("/api/masks/{item_id}")
    def get_mask(item_id: str, ref: Optional[str] = None, format: str = "pgm"):
        item = _get_item(item_id)
        target = ref or item.mask_ref
        if not target or not store.has(target):
            raise UsageError(f"unknown mask for item {item_id!r}")
        payload = store.get(target)
        if format == "png":
            from PIL import Image

            mask = data.parse_pgm(payload)
            buf = io.BytesIO()
            Image.fromarray(mask, mode="L").save(buf, format="PNG")
            return Response(content=buf.getvalue(), media_type="image/png")
        return Response(content=payload, media_type="image/x-portable-graymap")

    @app.post("/api/items/{item_id}/decision")
    def post_decision(item_id: str, body: DecisionBody):
        with write_lock:
            item = _get_item(item_id)
            if item.status in TERMINAL:
                idempotent = DECISION_TO_TERMINAL.get(body.decision) == item.status
                return JSONResponse(
                    status_code=409,
                    content={
                        "conflict": True,
                        "idempotent": idempotent,
                        "item": _item_view(item),
                    },
                )
            mask_ref = None
            if body.mask:
                mask_ref = store.put(_decode_mask(body.mask), hint=f"edited/{item_id}")
            updated = engine.submit_decision(
                item_id, body.decision, reviewer=body.reviewer,
                edited_mask_ref=mask_ref, note=body.note,
            )
            return _item_view(updated)

    @app.post("/api/items/{item_id}/edit")
    def post_edit(item_id: str, body: MdResolveBody):
        with write_lock:
            _get_item(item_id)
            mask_ref = store.put(_decode_mask(body.mask), hint=f"edited/{item_id}")
            return _item_view(engine.submit_edit(item_id, mask_ref, reviewer=body.reviewer))

    @app.post("/api/items/{item_id}/md-resolve")
    def post_md_resolve(item_id: str, body: MdResolveBody):
        with write_lock:
            _get_item(item_id)
            mask_ref = store.put(_decode_mask(body.mask), hint=f"md/{item_id}")
            return _item_view(
                engine.md_resolve(item_id, body.note, mask_ref, reviewer=body.reviewer)
            )

    @app.post("/api/rounds/finalize")
    def post_finalize():
        with write_lock:
            return engine.finalize_round()

    @app.get("/api/stage3/{item_id}/proposals")
    def get_proposals(item_id: str):
        item = _get_item(item_id)
        return {"id": item.id, "proposals": list(item.proposals), "status": item.status}

    @app.post("/api/stage3/{item_id}/select")
    def post_select(item_id: str, body: SelectBody):
        with write_lock:
            item = _get_item(item_id)
            if item.status in TERMINAL or item.status == "denied":
                return JSONResponse(
                    status_code=409,
                    content={"conflict": True, "item": _item_view(item)},
                )
            choice = body.choice if body.choice == "deny" else int(body.choice)  # type: ignore[arg-type]
            return _item_view(engine.stage3_select(item_id, choice, reviewer=body.reviewer))

    @app.get("/api/progress")
    def get_progress():
        return engine.progress()

    @app.post("/api/jobs/train")
    def post_train_job(body: TrainJobBody):
        job = jobs.submit("train", body.model_dump())
        return job.to_dict()

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        return jobs.get(job_id).to_dict()

    return app
