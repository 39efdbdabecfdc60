"""HTTP veneer over the service operations."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..config import PRESETS
from ..errors import FsgcdError
from . import ops
from .schemas import (ErrorBody, EvalRequest, EvalResponse, ExportRequest,
                      ExportResponse, SplitRequest, SplitResponse, TrainRequest,
                      TrainResponse)

_STATUS_BY_CODE = {"io": 400, "degenerate": 422, "shape": 409}


def create_app() -> FastAPI:
    app = FastAPI(title="fsgcd", version="0.1.0",
                  description="Few-shot generalized category discovery over feature files")

    @app.exception_handler(FsgcdError)
    async def _domain_error(_: Request, exc: FsgcdError) -> JSONResponse:
        body = ErrorBody(code=exc.code, message=str(exc))
        return JSONResponse(status_code=_STATUS_BY_CODE.get(exc.code, 400),
                            content=body.model_dump())

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.get("/presets")
    def presets() -> dict:
        return {name: dict(values) for name, values in PRESETS.items()}

    @app.post("/split", response_model=SplitResponse)
    def split(req: SplitRequest) -> SplitResponse:
        return ops.split(req)

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest) -> TrainResponse:
        return ops.train(req)

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest) -> EvalResponse:
        return ops.evaluate(req)

    @app.post("/export-embeddings", response_model=ExportResponse)
    def export_embeddings(req: ExportRequest) -> ExportResponse:
        return ops.export_embeddings(req)

    return app
