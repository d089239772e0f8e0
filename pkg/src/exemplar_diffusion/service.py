"""HTTP JSON API for scene browsing and exemplar-conditioned detection.

Runs are persisted as RunRecord files in a run-store directory. Requests with
an ensemble larger than ``SYNC_ENSEMBLE_LIMIT`` are answered with 202 and
finished in the background; clients poll ``GET /api/runs/{run_id}``.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
import re
import time
from dataclasses import replace
from pathlib import Path
from typing import Any

from fastapi import BackgroundTasks, FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import io
from .experiment import (
    ExperimentConfig,
    cached_schedule,
    derive_seed,
    evaluate_runs,
    sample_scene,
)
from .geometry import BBox, iou
from .sampler import SamplerConfig, SamplingError
from .synthworld import Dataset, OracleDenoiser, OracleParams
from .uncertainty import (
    EnsembleError,
    InsufficientSamplesError,
    detection_ellipses,
    fit_corner_stats,
    match_to_exemplar,
    run_ensemble,
)

SYNC_ENSEMBLE_LIMIT = 20
_RUN_ID = re.compile(r"^[0-9a-f]{32}$")

log = logging.getLogger(__name__)


class DetectParams(BaseModel):
    n: int = 300
    copies: int = 200
    tau: int = 10
    steps: int = 10
    t_start: int = 1000
    seed: int = 0
    ensemble: int = 0
    alpha: float = 0.95


class DetectRequest(BaseModel):
    dataset: str
    scene: str
    exemplars: list[list[float]] = Field(default_factory=list)
    params: DetectParams = Field(default_factory=DetectParams)


class ApiError(Exception):
    def __init__(self, status: int, kind: str, message: str, **extra: Any):
        super().__init__(message)
        self.status, self.kind, self.extra = status, kind, extra


def _error_body(kind: str, message: str, **extra: Any) -> dict:
    return {"error": {"type": kind, "message": message, **extra}}


class RunStore:
    """Directory of RunRecord files named by run id."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, run_id: str) -> Path:
        if not _RUN_ID.match(run_id):
            raise KeyError(run_id)
        return self.root / f"{run_id}.json"

    def put(self, rec: io.RunRecord) -> None:
        io.save_record(rec, self.path(rec.run_id))

    def get(self, run_id: str) -> io.RunRecord:
        p = self.path(run_id)
        if not p.exists():
            raise KeyError(run_id)
        return io.load_record(p)


def new_run_id(canonical: dict, created_at: str) -> str:
    """Content hash salted with the timestamp and a nonce, so repeats get fresh ids."""
    blob = json.dumps(canonical, sort_keys=True) + created_at + os.urandom(16).hex()
    return hashlib.sha256(blob.encode()).hexdigest()[:32]


def load_datasets(data_dir: str | os.PathLike) -> dict[str, Dataset]:
    out = {}
    for p in sorted(Path(data_dir).glob("*.json")):
        try:
            out[p.stem] = io.load_dataset(p)
        except io.DataError as exc:
            log.warning("skipping %s: %s", p, exc)
    return out


def _scene_json(scene, hide_gt: bool) -> dict:
    doc = {
        "scene_id": scene.scene_id,
        "width": scene.width,
        "height": scene.height,
        "structure": scene.structure,
    }
    doc["objects"] = None if hide_gt else [
        {"bbox": [o.box.cx, o.box.cy, o.box.w, o.box.h], "class_id": o.box.class_id, "visibility": o.visibility}
        for o in scene.objects
    ]
    return doc


def _parse_exemplars(raw: list[list[float]]) -> list[BBox]:
    boxes = []
    for k, e in enumerate(raw):
        if len(e) not in (4, 5):
            raise ApiError(400, "invalid_exemplar", f"exemplar {k} must be [cx, cy, w, h, class_id]")
        cls = e[4] if len(e) == 5 else 0
        if cls != int(cls) or cls < 0:
            raise ApiError(400, "invalid_exemplar", f"exemplar {k} has invalid class id {cls}")
        b = BBox(*map(float, e[:4]), class_id=int(cls))
        if not b.is_valid():
            raise ApiError(400, "invalid_exemplar", f"exemplar {k} is not a valid box: {e}")
        boxes.append(b)
    return boxes


def _gt_identity(scene, exemplars: list[BBox]) -> list[int | None]:
    """Best-overlapping unused GT object for each exemplar (IoU >= 0.5)."""
    used: set[int] = set()
    ids: list[int | None] = []
    for ex in exemplars:
        best, best_iou = None, 0.5
        for j, o in enumerate(scene.objects):
            v = iou(ex, o.box)
            if j not in used and o.box.class_id == ex.class_id and v >= best_iou:
                best, best_iou = j, v
        if best is not None:
            used.add(best)
        ids.append(best)
    return ids


def create_app(data_dir: str | os.PathLike, run_dir: str | os.PathLike | None = None,
               cors_origins: list[str] | None = None) -> FastAPI:
    datasets = load_datasets(data_dir)
    store = RunStore(run_dir or Path(data_dir) / "runs")
    app = FastAPI(title="exemplar-diffusion")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=cors_origins or ["*"],
        allow_methods=["GET", "POST", "OPTIONS"],
        allow_headers=["*"],
    )
    app.state.datasets = datasets
    app.state.store = store

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse(_error_body(exc.kind, str(exc), **exc.extra), status_code=exc.status)

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(
            _error_body("invalid_request", "request body failed validation", details=json.loads(json.dumps(exc.errors(), default=str))),
            status_code=400,
        )

    def find_scene(ds_id: str, sid: str):
        if ds_id not in datasets:
            raise ApiError(404, "not_found", f"unknown dataset {ds_id!r}")
        ds = datasets[ds_id]
        for i, s in enumerate(ds.scenes):
            if s.scene_id == sid:
                return ds, i
        raise ApiError(404, "not_found", f"unknown scene {sid!r} in dataset {ds_id!r}")

    @app.get("/api/datasets")
    def list_datasets():
        return [
            {
                "id": k,
                "name": ds.name,
                "layout": ds.layout,
                "seed": ds.seed,
                "width": ds.width,
                "height": ds.height,
                "num_scenes": len(ds.scenes),
                "scene_ids": [s.scene_id for s in ds.scenes],
            }
            for k, ds in datasets.items()
        ]

    @app.get("/api/datasets/{ds_id}/scenes/{sid}")
    def get_scene(ds_id: str, sid: str, hide_gt: int = 0):
        ds, i = find_scene(ds_id, sid)
        return _scene_json(ds.scenes[i], bool(hide_gt))

    @app.get("/api/runs/{run_id}")
    def get_run(run_id: str):
        try:
            return store.get(run_id).to_dict()
        except KeyError:
            raise ApiError(404, "not_found", f"unknown run {run_id!r}") from None

    @app.post("/api/detect")
    def detect(req: DetectRequest, background: BackgroundTasks):
        ds, index = find_scene(req.dataset, req.scene)
        exemplars = _parse_exemplars(req.exemplars)
        p = req.params
        if p.tau > p.t_start:
            raise ApiError(422, "invalid_params", f"tau={p.tau} exceeds t_start={p.t_start}")
        if p.ensemble < 0 or p.ensemble == 1:
            raise ApiError(400, "invalid_params", "ensemble must be 0 or at least 2")
        if not 0 < p.alpha < 1:
            raise ApiError(400, "invalid_params", "alpha must lie in (0, 1)")
        try:
            sampler = SamplerConfig(
                n=p.n, n_star=p.copies, tau=p.tau, num_steps=p.steps, t_start=p.t_start, seed=p.seed
            )
            cfg = ExperimentConfig(sampler, OracleParams(), num_exemplars=len(exemplars))
        except ValueError as exc:
            raise ApiError(400, "invalid_params", str(exc)) from None

        created = _dt.datetime.now(_dt.timezone.utc).isoformat()
        entropy = ds.entropy()
        base = io.RunRecord(
            config=cfg.to_dict(),
            dataset={**io.dataset_ref(ds, entropy), "id": req.dataset, "scene": req.scene},
            status="pending",
            extra={"request": req.model_dump()},
            created_at=created,
        )
        run_id = new_run_id(base.canonical(), created)
        base = replace(base, run_id=run_id)

        def work() -> io.RunRecord:
            t0 = time.perf_counter()
            try:
                rec = _execute(ds, index, cfg, entropy, exemplars, p.ensemble, p.alpha, base)
            except (SamplingError, EnsembleError) as exc:
                rec = replace(base, status="error", error={
                    "type": "sampling_error",
                    "message": str(exc),
                    "step": _failed_step(exc),
                })
            rec = replace(rec, wall_clock_s=time.perf_counter() - t0)
            store.put(rec)
            return rec

        if p.ensemble > SYNC_ENSEMBLE_LIMIT:
            store.put(base)
            background.add_task(work)
            return JSONResponse({"run_id": run_id, "status": "pending"}, status_code=202)

        rec = work()
        if rec.status == "error":
            return JSONResponse({"run_id": run_id, **_error_body(**_err_args(rec.error))}, status_code=500)
        return _response(rec)

    return app


def _failed_step(exc: Exception) -> int | None:
    if isinstance(exc, SamplingError):
        return exc.step
    return getattr(exc.__cause__, "step", None)


def _err_args(err: dict) -> dict:
    return {"kind": err["type"], "message": err["message"], "step": err.get("step")}


def _execute(ds, index, cfg, entropy, exemplars, ensemble, alpha, base: io.RunRecord) -> io.RunRecord:
    scene = ds.scenes[index]
    run = sample_scene(scene, index, cfg, entropy, _gt_identity(scene, exemplars), exemplars)
    ellipses = []
    if ensemble >= 2 and exemplars:
        denoiser = OracleDenoiser(cfg.oracle, entropy, cfg.T, cfg.sampler.signal_scale)
        members = run_ensemble(
            scene, exemplars, denoiser, cfg.sampler, ensemble,
            derive_seed(cfg.sampler.seed, index), cached_schedule(cfg.schedule_kind, cfg.T),
        )
        stats = []
        for ex in exemplars:
            try:
                stats.append(fit_corner_stats(match_to_exemplar(members, ex)))
            except InsufficientSamplesError:
                continue
        ellipses = detection_ellipses(run.detections, stats, alpha)
    metrics = None
    if scene.objects:
        single = Dataset(ds.name, ds.width, ds.height, ds.layout, ds.seed, (scene,))
        try:
            metrics = evaluate_runs(single, [run]).to_dict()
        except ValueError:
            metrics = None  # every GT object was an exemplar
    return replace(base, status="done", runs=(run,), metrics=metrics, ellipses={scene.scene_id: ellipses})


def _response(rec: io.RunRecord) -> dict:
    run = rec.runs[0]
    return {
        "run_id": rec.run_id,
        "status": rec.status,
        "detections": [d.to_dict() for d in run.detections],
        "ellipses": rec.ellipses.get(run.scene_id, []) if rec.ellipses else [],
        "metrics": rec.metrics,
    }


def serve(data_dir: str, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(create_app(data_dir), host=host, port=port)
