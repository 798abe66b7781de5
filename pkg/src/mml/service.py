"""HTTP facade over the registry, orchestrator, and run store.

Versioned JSON API under /api/v1: module catalog, assembly creation,
job submission with cursor-paginated metric streams, and finished-run
reports. Request bodies are parsed strictly (unknown fields rejected).
Jobs execute on a single worker thread; only one pretrain job may be
queued or running at a time.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

from fastapi import FastAPI, HTTPException, Query, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, ConfigDict, Field

from .modules import PipelineConfig, build_default_registry
from .orchestrator import MergeStrategy, TrainConfig
from .protocol import (
    compare_run,
    default_run_id,
    pipeline_config_from_dict,
    pretrain_run,
)
from .registry import Family, ModelAssembly, PIPELINE_ORDER, UnknownVariantError


class SelectionItem(BaseModel):
    model_config = ConfigDict(extra="forbid")
    family: str
    variant: str


class ModelRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    selection: list[SelectionItem]


class JobRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["pretrain-mml", "baseline", "finetune", "evaluate"]
    config: dict = Field(default_factory=dict)
    pipeline: dict = Field(default_factory=dict)
    strategy: str = "average"
    run_id: str | None = None
    finetune_fraction: float | None = None
    finetune_passes: int | None = None


@dataclass
class Job:
    job_id: str
    kind: str
    state: str  # queued -> running -> done | failed
    config: dict
    events: list[dict] = field(default_factory=list)
    error: str | None = None
    run_id: str | None = None

    def as_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "state": self.state,
            "config": self.config,
            "error": self.error,
            "run_id": self.run_id,
            "n_events": len(self.events),
        }


class AppState:
    def __init__(self, run_root: str | Path, pipe: PipelineConfig | None = None):
        self.run_root = Path(run_root)
        self.run_root.mkdir(parents=True, exist_ok=True)
        self.pipe = pipe or PipelineConfig()
        self.registry = build_default_registry(self.pipe)
        self.lock = threading.Lock()
        self.jobs: dict[str, Job] = {}
        self.queue: list[str] = []
        self.counter = 0
        self.wake = threading.Condition(self.lock)
        self.worker = threading.Thread(target=self._worker_loop, daemon=True)
        self.worker.start()

    def submit(self, req: JobRequest) -> Job:
        with self.lock:
            if req.kind == "pretrain-mml":
                busy = any(
                    j.kind == "pretrain-mml" and j.state in ("queued", "running")
                    for j in self.jobs.values()
                )
                if busy:
                    raise HTTPException(409, "a pretrain job is already queued or running")
            self.counter += 1
            job = Job(f"job-{self.counter}", req.kind, "queued", req.model_dump())
            self.jobs[job.job_id] = job
            self.queue.append(job.job_id)
            self.wake.notify_all()
            return job

    def _emit(self, job: Job, event: dict) -> None:
        with self.lock:
            job.events.append(event)

    def _worker_loop(self) -> None:
        while True:
            with self.lock:
                while not self.queue:
                    self.wake.wait()
                job = self.jobs[self.queue.pop(0)]
                job.state = "running"
            try:
                self._execute(job)
                with self.lock:
                    job.state = "done"
            except Exception as exc:  # job errors land in the job record
                with self.lock:
                    job.state = "failed"
                    job.error = f"{type(exc).__name__}: {exc}"

    def _execute(self, job: Job) -> None:
        req = JobRequest(**job.config)
        cfg = TrainConfig.from_dict(req.config) if req.config else TrainConfig()
        pipe = pipeline_config_from_dict(req.pipeline) if req.pipeline else self.pipe
        emit = lambda e: self._emit(job, e)  # noqa: E731
        if req.kind in ("pretrain-mml", "baseline"):
            strategy = MergeStrategy(req.strategy)
            run_id = req.run_id or default_run_id(cfg, strategy)
            with self.lock:
                job.run_id = run_id
            pretrain_run(
                cfg,
                strategy,
                self.run_root,
                pipe=pipe,
                run_id=run_id,
                with_baseline=True,
                on_event=emit,
            )
        elif req.kind in ("finetune", "evaluate"):
            if not req.run_id:
                raise ValueError("finetune/evaluate jobs need a run_id")
            with self.lock:
                job.run_id = req.run_id
            compare_run(
                self.run_root / req.run_id,
                finetune_fraction=req.finetune_fraction,
                finetune_passes=req.finetune_passes,
                on_event=emit,
            )


def create_app(run_root: str | Path, pipe: PipelineConfig | None = None, ui_dir: str | Path | None = None) -> FastAPI:
    state = AppState(run_root, pipe)
    app = FastAPI(title="mml-studio", version="1")
    app.state.mml = state

    @app.get("/api/v1/modules")
    def modules() -> dict:
        return state.registry.to_json()

    @app.post("/api/v1/models", status_code=201)
    def create_model(req: ModelRequest) -> dict:
        seen: dict[str, str] = {}
        for item in req.selection:
            try:
                family = Family(item.family)
            except ValueError:
                raise HTTPException(422, detail=f"unknown family {item.family!r}")
            if family.value in seen:
                raise HTTPException(422, detail=f"duplicate family {family.value!r}")
            try:
                state.registry.get(family, item.variant)
            except UnknownVariantError:
                raise HTTPException(
                    422, detail=f"unknown variant {item.variant!r} for {family.value}"
                )
            seen[family.value] = item.variant
        missing = [f.value for f in PIPELINE_ORDER if f.value not in seen]
        if missing:
            raise HTTPException(422, detail=f"missing family {missing[0]!r}")
        assembly = ModelAssembly(
            seen[Family.FEATURE_EXTRACTOR.value],
            seen[Family.PV2BEV.value],
            seen[Family.TEMPORAL_FUSION.value],
            seen[Family.HEAD.value],
        )
        return {"assembly_id": assembly.assembly_id}

    @app.post("/api/v1/jobs", status_code=202)
    def submit_job(req: JobRequest) -> dict:
        job = state.submit(req)
        return {"job_id": job.job_id}

    @app.get("/api/v1/jobs/{job_id}")
    def get_job(job_id: str) -> dict:
        with state.lock:
            job = state.jobs.get(job_id)
            if job is None:
                raise HTTPException(404, detail=f"unknown job {job_id!r}")
            return job.as_dict()

    @app.get("/api/v1/jobs/{job_id}/metrics")
    def get_metrics(job_id: str, since: int = Query(0, ge=0)) -> dict:
        with state.lock:
            job = state.jobs.get(job_id)
            if job is None:
                raise HTTPException(404, detail=f"unknown job {job_id!r}")
            events = list(job.events[since:])
            return {"events": events, "cursor": since + len(events), "state": job.state}

    @app.get("/api/v1/reports/{run_id}")
    def get_report(run_id: str, format: str = Query("json"), fraction: int | None = None) -> Response:
        run_dir = state.run_root / run_id
        if not run_dir.is_dir():
            raise HTTPException(404, detail=f"unknown run {run_id!r}")
        candidates = (
            [run_dir / f"compare-ft{fraction}"]
            if fraction is not None
            else sorted(run_dir.glob("compare-ft*"))
        )
        for c in candidates:
            if format == "csv" and (c / "report.csv").exists():
                return Response((c / "report.csv").read_text(), media_type="text/csv")
            if (c / "report.json").exists():
                return Response(
                    (c / "report.json").read_text(), media_type="application/json"
                )
        raise HTTPException(404, detail=f"no finished report for run {run_id!r}")

    if ui_dir and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
