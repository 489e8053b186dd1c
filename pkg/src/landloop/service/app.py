"""FastAPI wrapper around the session machinery.

Everything stateful lives in the SessionStore; endpoints translate between
JSON and the core types, and every package error surfaces as a structured
{"error": {"code", "message"}} body with a matching HTTP status.
"""

import base64
import io
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from .. import model as mdl
from ..errors import (
    ConfigurationError,
    CoordinateError,
    EmptyLabelsError,
    ExtentError,
    LandloopError,
    PaletteError,
    RetrainBusyError,
    SceneNotFoundError,
    SessionNotFoundError,
)
from ..finetune import FineTuneConfig
from ..metrics import EvalReport
from ..sessions import Registry, SessionStore
from . import schemas

_STATUS_BY_CODE = {
    "not_found": 404,
    "busy": 409,
    "empty_labels": 409,
    "palette": 400,
    "coordinate": 400,
    "extent": 400,
    "configuration": 400,
    "dimension": 400,
    "checksum": 400,
    "version": 400,
    "format": 400,
    "stale_cache": 409,
}


def _report_model(report: EvalReport) -> schemas.ReportModel:
    return schemas.ReportModel(**report.to_dict())


def _palette_models(palette):
    return [schemas.PaletteEntry(index=i, name=name, color=color)
            for i, (name, color) in enumerate(palette)]


def _png_b64(array: np.ndarray, palette=None) -> str:
    from PIL import Image

    if palette is not None:
        img = Image.fromarray(array, mode="P")
        flat = []
        for _, color in palette:
            flat += [int(color[1:3], 16), int(color[3:5], 16), int(color[5:7], 16)]
        flat += [0] * (768 - len(flat))
        img.putpalette(flat)
    else:
        img = Image.fromarray(array, mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def scene_image_png(scene) -> bytes:
    """8-bit RGB composite of the first three bands for display."""
    from PIL import Image

    rgb = np.clip(scene.image[:3], 0.0, 1.0)
    arr = (rgb.transpose(1, 2, 0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def create_app(registry: Registry, retrain_delay_s: float = 0.0,
               ui_dir: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="landloop", version="0.1.0")
    store = SessionStore(registry, retrain_delay_s=retrain_delay_s)
    app.state.store = store
    scene_png_cache: dict = {}

    @app.exception_handler(LandloopError)
    async def landloop_error_handler(request: Request, exc: LandloopError):
        status = _STATUS_BY_CODE.get(exc.code, 500)
        body = schemas.ErrorResponse(
            error=schemas.ErrorDetail(code=exc.code, message=str(exc)))
        return JSONResponse(status_code=status, content=body.model_dump())

    def scene_info(entry) -> schemas.SceneInfo:
        spec = registry.base.spec
        return schemas.SceneInfo(
            scene_id=entry.scene_id,
            width=entry.scene.width,
            height=entry.scene.height,
            bands=entry.scene.image.shape[0],
            offset=mdl.input_output_offset(spec),
            min_patch=mdl.min_input_extent(spec),
            palette=_palette_models(registry.palette),
        )

    @app.get("/api/scenes", response_model=list[schemas.SceneInfo])
    def list_scenes():
        return [scene_info(registry.get_scene(sid)) for sid in sorted(registry.scenes)]

    @app.get("/api/scenes/{scene_id}/image.png")
    def scene_image(scene_id: str):
        entry = registry.get_scene(scene_id)
        if scene_id not in scene_png_cache:
            scene_png_cache[scene_id] = scene_image_png(entry.scene)
        return Response(content=scene_png_cache[scene_id], media_type="image/png")

    @app.post("/api/sessions", response_model=schemas.CreateSessionResponse)
    def create_session(req: schemas.CreateSessionRequest):
        kwargs = {"method": req.method}
        if req.learning_rate is not None:
            kwargs["learning_rate"] = req.learning_rate
        if req.epochs is not None:
            kwargs["epochs"] = req.epochs
        if req.to_convergence is not None:
            kwargs["to_convergence"] = req.to_convergence
        else:
            # online sessions run the classifier-only method to convergence
            kwargs["to_convergence"] = req.method == "last-1"
        session = store.create(req.scene_id, FineTuneConfig(**kwargs))
        baseline = session.metrics_history[0]
        return schemas.CreateSessionResponse(
            session_id=session.session_id,
            scene=scene_info(session.entry),
            method=req.method,
            baseline=schemas.MetricsEntryModel(
                retrain_index=baseline.retrain_index,
                timestamp=baseline.timestamp,
                report=_report_model(baseline.report),
                label_count=baseline.label_count),
        )

    @app.post("/api/sessions/{session_id}/predict",
              response_model=schemas.PredictResponse,
              response_model_exclude_none=True)
    def predict_patch(session_id: str, req: schemas.PredictRequest):
        session = store.get(session_id)
        classes, max_prob, extent = session.predict_patch(
            req.center_row, req.center_col, req.patch_size)
        resp = schemas.PredictResponse(**extent)
        if req.format == "png":
            resp.classes_png = _png_b64(classes, palette=session.palette)
            resp.confidence_png = _png_b64((max_prob * 255).astype(np.uint8))
        else:
            resp.classes = classes.astype(int).tolist()
            resp.max_prob = np.round(max_prob.astype(float), 6).tolist()
        return resp

    @app.post("/api/sessions/{session_id}/labels",
              response_model=schemas.SubmitLabelsResponse)
    def submit_labels(session_id: str, req: schemas.SubmitLabelsRequest):
        session = store.get(session_id)
        accepted, updated = session.submit_labels(
            [(p.row, p.col, p.cls) for p in req.points])
        return schemas.SubmitLabelsResponse(accepted=accepted, updated=updated,
                                            total_labels=len(session.labels))

    @app.post("/api/sessions/{session_id}/retrain",
              response_model=schemas.RetrainResponse)
    def retrain(session_id: str):
        session = store.get(session_id)
        index, report = session.retrain()
        return schemas.RetrainResponse(retrain_index=index,
                                       snapshot_checksum=session.snapshot.checksum,
                                       report=_report_model(report))

    @app.post("/api/sessions/{session_id}/classes",
              response_model=schemas.AddClassResponse)
    def add_class(session_id: str, req: schemas.AddClassRequest):
        session = store.get(session_id)
        index = session.add_class(req.name, req.color)
        return schemas.AddClassResponse(class_index=index,
                                        palette=_palette_models(session.palette))

    @app.post("/api/sessions/{session_id}/reset", response_model=schemas.ResetResponse)
    def reset(session_id: str):
        session = store.get(session_id)
        session.reset()
        return schemas.ResetResponse(ok=True, retrain_index=0)

    @app.get("/api/sessions/{session_id}/metrics")
    def get_metrics(session_id: str, format: str = "json"):
        session = store.get(session_id)
        history, dist = session.get_metrics()
        if format == "csv":
            from .. import harness

            rows = harness.history_to_rows(session.entry.scene_id,
                                           session.config.method, history)
            csv_text = harness.rows_to_csv([r[:7] for r in rows])
            return Response(content=csv_text, media_type="text/csv")
        return schemas.MetricsResponse(
            history=[schemas.MetricsEntryModel(retrain_index=e.retrain_index,
                                               timestamp=e.timestamp,
                                               report=_report_model(e.report),
                                               label_count=e.label_count)
                     for e in history],
            label_distribution=dist,
            label_count=len(session.labels))

    @app.get("/api/sessions/{session_id}/palette",
             response_model=list[schemas.PaletteEntry])
    def get_palette(session_id: str):
        return _palette_models(store.get(session_id).palette)

    @app.get("/api/sessions/{session_id}/checkpoint")
    def export_checkpoint(session_id: str):
        session = store.get(session_id)
        blob = session.export_checkpoint()
        return Response(content=blob, media_type="application/octet-stream",
                        headers={"Content-Disposition":
                                 f"attachment; filename={session_id}.glck"})

    if ui_dir and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
