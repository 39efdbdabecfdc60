"""Service operations: request models in, response models out.

This is the seam shared by the HTTP app and the CLI's local mode; everything
below delegates to the core pipeline.  Seeds left unset resolve through the
usual precedence (FSGCD_SEED env var, then the built-in default).
"""

from __future__ import annotations

from .. import pipeline
from ..config import resolve_config
from .schemas import (EvalRequest, EvalResponse, ExportRequest, ExportResponse,
                      MetricsRecord, SplitRequest, SplitResponse, TrainRequest,
                      TrainResponse)


def _default_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    return resolve_config().seed


def split(req: SplitRequest) -> SplitResponse:
    manifest = pipeline.run_split(req.features, req.c_l, req.p_l,
                                  _default_seed(req.seed), out_path=req.out)
    return SplitResponse(manifest=manifest, path=req.out)


def train(req: TrainRequest) -> TrainResponse:
    cfg = resolve_config(preset=req.preset, config_file=req.config_file,
                         overrides=dict(req.overrides))
    summary = pipeline.run_train(cfg, out_dir=req.out_dir,
                                 features_path=req.features, split_path=req.split)
    metrics = [MetricsRecord(**{k: v for k, v in rec.items() if k != "type"})
               for rec in summary["metrics"]]
    return TrainResponse(
        features=summary["features"],
        split=summary["split"],
        metrics_path=summary["metrics_path"],
        trainlog_path=summary["trainlog_path"],
        final_checkpoint=summary["final_checkpoint"],
        best_checkpoint=summary["best_checkpoint"],
        best_epoch=summary["best_epoch"],
        metrics=metrics,
        final_metrics=metrics[-1],
    )


def evaluate(req: EvalRequest) -> EvalResponse:
    record = pipeline.run_eval(req.features, req.split, req.checkpoint,
                               seed=_default_seed(req.seed), k=req.k, scope=req.scope)
    k = record.pop("k")
    scope = record.pop("scope")
    record.pop("type")
    return EvalResponse(metrics=MetricsRecord(**record), scope=scope, k=k)


def export_embeddings(req: ExportRequest) -> ExportResponse:
    result = pipeline.run_export(req.features, req.checkpoint, req.split,
                                 out_path=req.out, seed=_default_seed(req.seed),
                                 scope=req.scope)
    return ExportResponse(**result)
