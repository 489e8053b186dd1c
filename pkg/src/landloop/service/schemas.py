"""Pydantic request/response models for the HTTP API."""

from typing import List, Optional

from pydantic import BaseModel, Field


class PaletteEntry(BaseModel):
    index: int
    name: str
    color: str


class SceneInfo(BaseModel):
    scene_id: str
    width: int
    height: int
    bands: int
    offset: int  # input-to-output margin of the current model
    min_patch: int
    palette: List[PaletteEntry]


class CreateSessionRequest(BaseModel):
    scene_id: str
    method: str = "last-1"
    learning_rate: Optional[float] = None
    epochs: Optional[int] = None
    to_convergence: Optional[bool] = None


class ReportModel(BaseModel):
    pixel_accuracy: float
    mean_iou: float
    per_class_iou: dict
    confusion: List[List[int]]
    evaluated_pixels: int
    label_distribution: Optional[dict] = None


class MetricsEntryModel(BaseModel):
    retrain_index: int
    timestamp: float
    report: ReportModel
    label_count: int = 0


class CreateSessionResponse(BaseModel):
    session_id: str
    scene: SceneInfo
    method: str
    baseline: MetricsEntryModel


class PredictRequest(BaseModel):
    center_row: int
    center_col: int
    patch_size: int = 200
    format: str = Field(default="raw", pattern="^(raw|png)$")


class PredictResponse(BaseModel):
    row0: int
    col0: int
    height: int
    width: int
    offset: int
    snapshot_checksum: int
    retrain_index: int
    classes: Optional[List[List[int]]] = None
    max_prob: Optional[List[List[float]]] = None
    classes_png: Optional[str] = None  # base64, indexed palette
    confidence_png: Optional[str] = None  # base64, 8-bit grayscale


class LabelIn(BaseModel):
    row: int
    col: int
    cls: int


class SubmitLabelsRequest(BaseModel):
    points: List[LabelIn]


class SubmitLabelsResponse(BaseModel):
    accepted: int
    updated: int
    total_labels: int


class RetrainResponse(BaseModel):
    retrain_index: int
    snapshot_checksum: int
    report: ReportModel


class AddClassRequest(BaseModel):
    name: str
    color: str = "#d05fb8"


class AddClassResponse(BaseModel):
    class_index: int
    palette: List[PaletteEntry]


class MetricsResponse(BaseModel):
    history: List[MetricsEntryModel]
    label_distribution: Optional[dict] = None
    label_count: int


class ResetResponse(BaseModel):
    ok: bool
    retrain_index: int


class ErrorDetail(BaseModel):
    code: str
    message: str


class ErrorResponse(BaseModel):
    error: ErrorDetail
