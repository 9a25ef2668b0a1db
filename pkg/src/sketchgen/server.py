"""HTTP job service: queued generation and editing over one backbone.

Jobs run one at a time in FIFO order on a single worker thread (the model
instance is exclusive); handlers stay concurrent and only touch the locked
job store. Results are written under a work directory and served back as
PNG, manifest JSON, and trace JSON-lines.
"""
from __future__ import annotations

import json
import queue
import tempfile
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, File, Form, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response

from .editing import EditingConfig, generate_with_exemplar, record_exemplar
from .pipeline import RunConfig, extract_reference_features, generate, save_result

QUEUE_CAP = 16


@dataclass
class JobRecord:
    job_id: str
    kind: str
    state: str = "queued"
    progress_done: int = 0
    progress_total: int = 0
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "state": self.state,
            "progress": {"done": self.progress_done, "total": self.progress_total},
            "inputs": self.inputs,
            "outputs": self.outputs,
            "error": self.error,
        }


@dataclass
class _JobPayload:
    record: JobRecord
    sketch: bytes
    class_label: str
    seed: int
    overrides: dict
    exemplar: bytes | None = None
    editing: EditingConfig | None = None
    trace_rows: list = field(default_factory=list)


class JobStore:
    """Locked record map plus the FIFO work queue."""

    def __init__(self, cap: int):
        self.cap = cap
        self.lock = threading.Lock()
        self.records: dict[str, JobRecord] = {}
        self.payloads: dict[str, _JobPayload] = {}
        self.work: queue.Queue = queue.Queue()

    def submit(self, payload: _JobPayload) -> bool:
        with self.lock:
            queued = sum(1 for r in self.records.values() if r.state == "queued")
            if queued >= self.cap:
                return False
            self.records[payload.record.job_id] = payload.record
            self.payloads[payload.record.job_id] = payload
        self.work.put(payload.record.job_id)
        return True

    def get(self, job_id: str) -> JobRecord | None:
        with self.lock:
            return self.records.get(job_id)


def _apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    if not overrides:
        return config
    return config.with_guidance(**overrides)


def create_app(
    config: RunConfig | None = None,
    queue_cap: int = QUEUE_CAP,
    workdir: str | None = None,
) -> FastAPI:
    config = config or RunConfig()
    workdir = workdir or tempfile.mkdtemp(prefix="sketchgen-jobs-")
    Path(workdir).mkdir(parents=True, exist_ok=True)
    backbone = config.make_backbone()
    store = JobStore(queue_cap)

    app = FastAPI(title="sketchgen")
    app.state.store = store
    app.state.workdir = workdir

    @app.exception_handler(RequestValidationError)
    async def _malformed(request, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    def run_job(job_id: str) -> None:
        with store.lock:
            payload = store.payloads[job_id]
            record = payload.record
            record.state = "running"
            record.progress_total = _apply_overrides(
                config, payload.overrides
            ).num_inference_steps
        try:
            run_cfg = _apply_overrides(config, payload.overrides)
            features = extract_reference_features(
                payload.sketch, payload.class_label, run_cfg, backbone=backbone
            )

            def on_step(done: int, total: int) -> None:
                with store.lock:
                    record.progress_done = done
                    record.progress_total = total

            if payload.record.kind == "edit":
                exemplar = record_exemplar(
                    payload.exemplar, payload.class_label, run_cfg, backbone=backbone
                )
                result = generate_with_exemplar(
                    features,
                    exemplar,
                    payload.class_label,
                    payload.seed,
                    run_cfg,
                    payload.editing,
                    backbone=backbone,
                    on_step=on_step,
                )
            else:
                result = generate(
                    features,
                    payload.class_label,
                    payload.seed,
                    run_cfg,
                    backbone=backbone,
                    on_step=on_step,
                )
            paths = save_result(result, workdir, job_id)
            with store.lock:
                payload.trace_rows = result.trace
                record.outputs = paths
                record.state = "done"
        except Exception as exc:
            with store.lock:
                record.error = f"{type(exc).__name__}: {exc}"
                record.state = "failed"

    def worker() -> None:
        while True:
            job_id = store.work.get()
            if job_id is None:
                break
            run_job(job_id)

    thread = threading.Thread(target=worker, daemon=True, name="sketchgen-worker")
    thread.start()
    app.state.worker = thread

    def submit_job(
        kind: str,
        sketch_bytes: bytes,
        class_label: str,
        seed: int,
        overrides: dict,
        exemplar_bytes: bytes | None = None,
        editing: EditingConfig | None = None,
    ) -> Response:
        if not class_label.strip():
            return JSONResponse(status_code=400, content={"detail": "class must be non-empty"})
        if not sketch_bytes:
            return JSONResponse(status_code=400, content={"detail": "empty sketch upload"})
        record = JobRecord(job_id=uuid.uuid4().hex[:12], kind=kind)
        record.inputs = {
            "class": class_label,
            "seed": seed,
            **{k: v for k, v in overrides.items() if v is not None},
        }
        payload = _JobPayload(
            record=record,
            sketch=sketch_bytes,
            class_label=class_label,
            seed=seed,
            overrides={k: v for k, v in overrides.items() if v is not None},
            exemplar=exemplar_bytes,
            editing=editing,
        )
        if not store.submit(payload):
            return JSONResponse(status_code=503, content={"detail": "job queue is full"})
        return JSONResponse(status_code=202, content={"job_id": record.job_id})

    @app.post("/jobs/generate")
    async def post_generate(
        sketch: UploadFile = File(...),
        class_label: str = Form(..., alias="class"),
        seed: int = Form(0),
        beta: float | None = Form(None),
        guided_steps: int | None = Form(None),
    ):
        data = await sketch.read()
        return submit_job(
            "generate", data, class_label, seed, {"beta": beta, "guided_steps": guided_steps}
        )

    @app.post("/jobs/edit")
    async def post_edit(
        sketch: UploadFile = File(...),
        exemplar: UploadFile = File(...),
        class_label: str = Form(..., alias="class"),
        seed: int = Form(0),
        beta: float | None = Form(None),
        guided_steps: int | None = Form(None),
        sub_start: int = Form(5),
        sub_end: int | None = Form(None),
        substitute: bool = Form(True),
    ):
        data = await sketch.read()
        exemplar_data = await exemplar.read()
        if not exemplar_data:
            return JSONResponse(status_code=400, content={"detail": "empty exemplar upload"})
        editing = EditingConfig(enabled=substitute, start_step=sub_start, end_step=sub_end)
        return submit_job(
            "edit",
            data,
            class_label,
            seed,
            {"beta": beta, "guided_steps": guided_steps},
            exemplar_bytes=exemplar_data,
            editing=editing,
        )

    @app.get("/jobs/{job_id}")
    async def get_job(job_id: str):
        record = store.get(job_id)
        if record is None:
            return JSONResponse(status_code=404, content={"detail": "unknown job"})
        with store.lock:
            return record.to_dict()

    @app.get("/jobs/{job_id}/result")
    async def get_result(job_id: str):
        record = store.get(job_id)
        if record is None:
            return JSONResponse(status_code=404, content={"detail": "unknown job"})
        with store.lock:
            state, outputs, error = record.state, dict(record.outputs), record.error
        if state != "done":
            detail = f"job is {state}" + (f": {error}" if error else "")
            return JSONResponse(status_code=409, content={"detail": detail})
        data = Path(outputs["image"]).read_bytes()
        return Response(content=data, media_type="image/png")

    @app.get("/jobs/{job_id}/trace")
    async def get_trace(job_id: str):
        record = store.get(job_id)
        if record is None:
            return JSONResponse(status_code=404, content={"detail": "unknown job"})
        with store.lock:
            rows = list(store.payloads[job_id].trace_rows)
        body = "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)
        return Response(content=body, media_type="application/x-ndjson")

    @app.get("/jobs/{job_id}/input")
    async def get_input(job_id: str):
        record = store.get(job_id)
        if record is None:
            return JSONResponse(status_code=404, content={"detail": "unknown job"})
        with store.lock:
            data = store.payloads[job_id].sketch
        return Response(content=data, media_type="application/octet-stream")

    @app.get("/healthz")
    async def healthz():
        with store.lock:
            states = [r.state for r in store.records.values()]
        return {
            "status": "ok",
            "backbone": backbone.fingerprint,
            "queued": states.count("queued"),
            "running": states.count("running"),
            "total_jobs": len(states),
        }

    return app
