"""Request/response models for the service endpoints.

Requests carry server-local file paths plus configuration; heavyweight data
(features, checkpoints) stays on disk.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class SplitRequest(BaseModel):
    features: str
    c_l: float = Field(gt=0, le=1)
    p_l: float = Field(gt=0, le=1)
    seed: int | None = None
    out: str | None = None


class SplitResponse(BaseModel):
    manifest: dict
    path: str | None = None


class TrainRequest(BaseModel):
    out_dir: str
    features: str | None = None
    split: str | None = None
    preset: str | None = None
    config_file: str | None = None
    overrides: dict[str, str | int | float | bool] = Field(default_factory=dict)


class MetricsRecord(BaseModel):
    acc_all: float
    acc_old: float
    acc_new: float
    ch_index: float
    mapping: list[int]
    stage: int | None = None
    epoch: int | None = None


class TrainResponse(BaseModel):
    features: str
    split: str
    metrics_path: str
    trainlog_path: str
    final_checkpoint: str
    best_checkpoint: str
    best_epoch: int | None
    metrics: list[MetricsRecord]
    final_metrics: MetricsRecord


class EvalRequest(BaseModel):
    features: str
    split: str
    checkpoint: str
    seed: int | None = None
    k: int | None = None
    scope: str = "unlabeled"


class EvalResponse(BaseModel):
    metrics: MetricsRecord
    scope: str
    k: int


class ExportRequest(BaseModel):
    features: str
    checkpoint: str
    out: str
    split: str | None = None
    seed: int | None = None
    scope: str = "unlabeled"


class ExportResponse(BaseModel):
    path: str
    rows: int


class ErrorBody(BaseModel):
    code: str
    message: str
