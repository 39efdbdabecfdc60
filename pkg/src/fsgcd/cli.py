"""Command-line client for the service operations.

By default commands run in-process against the same service layer the HTTP
app exposes; pass ``--server URL`` (or set FSGCD_SERVER) to talk to a running
server instead.  Exit codes: 0 success, 2 I/O or format problem, 3 degenerate
data, 4 shape mismatch.

``--workers`` caps numeric thread pools and must act before the numeric
stack loads, which is why all heavy imports happen inside the commands.
"""

from __future__ import annotations

import json
import os
import sys

import click

_EXIT_BY_CODE = {"io": 2, "degenerate": 3, "shape": 4}


def _fail(code: str, message: str):
    click.echo(f"error ({code}): {message}", err=True)
    sys.exit(_EXIT_BY_CODE.get(code, 2))


def _call(ctx: click.Context, op_name: str, request) -> dict:
    """Dispatch a request model locally or to a remote server."""
    server = ctx.obj.get("server")
    if server:
        import httpx

        route = {"split": "/split", "train": "/train", "evaluate": "/eval",
                 "export_embeddings": "/export-embeddings"}[op_name]
        try:
            resp = httpx.post(server.rstrip("/") + route,
                              json=request.model_dump(), timeout=None)
        except httpx.HTTPError as exc:
            _fail("io", f"cannot reach server {server}: {exc}")
        if resp.status_code >= 400:
            try:
                body = resp.json()
            except ValueError:
                _fail("io", f"server returned {resp.status_code}: {resp.text[:200]}")
            if isinstance(body, dict) and "code" in body:
                _fail(body["code"], body.get("message", ""))
            _fail("io", f"server returned {resp.status_code}: {json.dumps(body)[:200]}")
        return resp.json()

    from .errors import FsgcdError
    from .service import ops

    try:
        return getattr(ops, op_name)(request).model_dump()
    except FsgcdError as exc:
        _fail(exc.code, str(exc))


def _emit(payload: dict) -> None:
    click.echo(json.dumps(payload, indent=2))


@click.group()
@click.option("--server", envvar="FSGCD_SERVER", default=None,
              help="Base URL of a running service; default is in-process execution.")
@click.option("--workers", type=int, default=None,
              help="Cap numeric thread pools (default: library defaults / all cores).")
@click.pass_context
def main(ctx: click.Context, server: str | None, workers: int | None) -> None:
    """Few-shot generalized category discovery over pre-extracted features."""
    if workers is not None and workers > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(workers)
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@main.command()
@click.option("--features", required=True, help="Feature file (.fsgf or .csv).")
@click.option("--c-l", "c_l", type=float, required=True,
              help="Known-class share of all classes.")
@click.option("--p-l", "p_l", type=float, required=True,
              help="Labeled share within each known class.")
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, help="Where to write the split manifest (JSON).")
@click.pass_context
def split(ctx, features, c_l, p_l, seed, out):
    """Generate a labeled/unlabeled split manifest."""
    from .service.schemas import SplitRequest

    result = _call(ctx, "split", SplitRequest(
        features=features, c_l=c_l, p_l=p_l, seed=seed, out=out))
    manifest = result["manifest"]
    _emit({"path": result["path"],
           "known_classes": len(manifest["known_classes"]),
           "labeled": len(manifest["labeled_ids"]),
           "n_samples": manifest["n_samples"]})


_OVERRIDE_FLAGS = [
    ("--lr", "lr", float), ("--momentum", "momentum", float),
    ("--weight-decay", "weight_decay", float), ("--batch-size", "batch_size", int),
    ("--stage1-epochs", "stage1_epochs", int), ("--stage2-epochs", "stage2_epochs", int),
    ("--margin", "margin", float), ("--tau-s", "tau_s", float),
    ("--tau-u", "tau_u", float), ("--balance", "balance", float),
    ("--noise-sigma", "noise_sigma", float), ("--dropout-prob", "dropout_prob", float),
    ("--scale-jitter-lo", "scale_jitter_lo", float),
    ("--scale-jitter-hi", "scale_jitter_hi", float),
    ("--adapter-dim", "adapter_dim", int), ("--head-hidden", "head_hidden", int),
    ("--embed-dim", "embed_dim", int), ("--adapter-scale", "adapter_scale", float),
    ("--eval-every", "eval_every", int), ("--c-l", "c_l", float), ("--p-l", "p_l", float),
    ("--seed", "seed", int),
]


def _override_options(fn):
    for flag, key, kind in reversed(_OVERRIDE_FLAGS):
        fn = click.option(flag, key, type=kind, default=None)(fn)
    return fn


@main.command()
@click.option("--features", default=None, help="Feature file; optional for synthetic presets.")
@click.option("--split", "split_path", default=None, help="Split manifest; optional for synthetic presets.")
@click.option("--preset", default=None, help="Named preset (see `fsgcd presets`).")
@click.option("--config", "config_file", default=None, help="key = value config file.")
@click.option("--out-dir", required=True, help="Output directory for checkpoints/metrics.")
@click.option("--components", default=None,
              help="Comma list of extra loss components to enable (asl,ktl,al).")
@click.option("--include-positives", is_flag=True, default=None,
              help="Widen the supervised denominator to include positives.")
@_override_options
@click.pass_context
def train(ctx, features, split_path, preset, config_file, out_dir,
          components, include_positives, **overrides):
    """Run the two-stage training pipeline and write checkpoints + metrics."""
    from .service.schemas import TrainRequest

    overrides = {k: v for k, v in overrides.items() if v is not None}
    if components is not None:
        overrides["components"] = components
    if include_positives:
        overrides["include_positives"] = True
    result = _call(ctx, "train", TrainRequest(
        out_dir=out_dir, features=features, split=split_path,
        preset=preset, config_file=config_file, overrides=overrides))
    _emit({"final_metrics": result["final_metrics"],
           "best_epoch": result["best_epoch"],
           "best_checkpoint": result["best_checkpoint"],
           "final_checkpoint": result["final_checkpoint"],
           "metrics_path": result["metrics_path"]})


@main.command("eval")
@click.option("--features", required=True)
@click.option("--split", "split_path", required=True)
@click.option("--checkpoint", required=True)
@click.option("--seed", type=int, default=None)
@click.option("--k", type=int, default=None,
              help="Override the cluster count (pads the contingency matrix).")
@click.option("--scope", type=click.Choice(["unlabeled", "all"]), default="unlabeled",
              help="Evaluate the unlabeled subset (default) or every sample.")
@click.pass_context
def eval_cmd(ctx, features, split_path, checkpoint, seed, k, scope):
    """Cluster embeddings from a checkpoint and report matched accuracies."""
    from .service.schemas import EvalRequest

    result = _call(ctx, "evaluate", EvalRequest(
        features=features, split=split_path, checkpoint=checkpoint,
        seed=seed, k=k, scope=scope))
    _emit(result)


@main.command("export-embeddings")
@click.option("--features", required=True)
@click.option("--checkpoint", required=True)
@click.option("--split", "split_path", default=None)
@click.option("--out", required=True)
@click.option("--seed", type=int, default=None)
@click.option("--scope", type=click.Choice(["unlabeled", "all"]), default="unlabeled")
@click.pass_context
def export_embeddings(ctx, features, checkpoint, split_path, out, seed, scope):
    """Write per-sample embeddings, labels, and cluster ids as CSV."""
    from .service.schemas import ExportRequest

    result = _call(ctx, "export_embeddings", ExportRequest(
        features=features, checkpoint=checkpoint, split=split_path,
        out=out, seed=seed, scope=scope))
    _emit(result)


@main.command()
@click.pass_context
def presets(ctx):
    """List configuration presets."""
    if ctx.obj.get("server"):
        import httpx

        resp = httpx.get(ctx.obj["server"].rstrip("/") + "/presets", timeout=30)
        _emit(resp.json())
        return
    from .config import PRESETS

    _emit({name: dict(values) for name, values in PRESETS.items()})


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
