"""Path-level orchestration of split, train, eval, and export runs.

Every function here is deterministic given its inputs plus a seed: reruns
produce byte-identical manifests, metrics streams, and checkpoints.  Metrics
are evaluated on parameters as they survive 32-bit checkpoint storage, so
re-evaluating a written checkpoint reproduces the logged numbers exactly.
"""

from __future__ import annotations

import json
import os
import sys

import numpy as np

from .config import ExperimentConfig
from .data import NO_LABEL, DatasetSplit, FeatureSet, generate_split, make_synthetic
from .encoder import (EncoderConfig, EncoderParams, encode, init_encoder_params,
                      load_checkpoint, save_checkpoint)
from .errors import DegenerateDataError, FeatureFormatError
from .evaluate import Metrics, ch_index, cluster_accuracy, kmeans
from .features_io import load_features, save_features
from .trainer import TrainLog, optimize_boundaries, pretrain_known


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


def run_split(features_path: str, c_l: float, p_l: float, seed: int,
              out_path: str | None = None) -> dict:
    """Generate a split manifest for a fully labeled feature file."""
    fs = load_features(features_path)
    split = generate_split(fs, c_l, p_l, seed)
    manifest = split.to_manifest()
    if out_path:
        _ensure_parent(out_path)
        split.save(out_path)
    return manifest


def _evaluate_params(fs: FeatureSet, split: DatasetSplit, params: EncoderParams,
                     seed: int, scope: str = "unlabeled",
                     k: int | None = None) -> Metrics:
    ids = split.unlabeled_ids if scope == "unlabeled" else np.arange(fs.n_samples)
    truth = fs.labels[ids]
    if (truth == NO_LABEL).any():
        raise DegenerateDataError("evaluation requires ground-truth labels for all evaluated samples")
    emb = encode(fs.features[ids], params)
    clusters = k if k is not None else fs.class_count
    km = kmeans(emb, clusters, seed=seed)
    acc_all, acc_old, acc_new, mapping = cluster_accuracy(
        km.assignment, truth, split.known_classes,
        n_classes=fs.class_count, n_clusters=clusters,
        allow_mismatch=clusters != fs.class_count)
    ch = ch_index(emb, km.assignment)
    return Metrics(acc_all=acc_all, acc_old=acc_old, acc_new=acc_new,
                   ch_index=ch, mapping=mapping)


def _metrics_record(epoch: int, stage: int, metrics: Metrics) -> dict:
    record = {"type": "metrics", "stage": stage, "epoch": epoch}
    record.update(metrics.to_dict())
    return record


def run_train(cfg: ExperimentConfig, out_dir: str,
              features_path: str | None = None, split_path: str | None = None,
              progress: bool = False) -> dict:
    """Two-stage run: returns a summary and writes metrics, logs, checkpoints.

    With a synthetic preset the feature set and split are generated in-place
    (and saved alongside the outputs); otherwise both paths are required.
    """
    os.makedirs(out_dir, exist_ok=True)
    synth = cfg.synthetic
    if features_path is None:
        if synth is None:
            raise FeatureFormatError("a feature file is required unless the preset is synthetic")
        fs = make_synthetic(synth)
        features_path = os.path.join(out_dir, "features.fsgf")
        save_features(fs, features_path)
    else:
        fs = load_features(features_path)
    if split_path is None:
        if synth is None:
            raise FeatureFormatError("a split manifest is required unless the preset is synthetic")
        split = generate_split(fs, cfg.c_l, cfg.p_l, cfg.seed)
        split_path = os.path.join(out_dir, "split.json")
        split.save(split_path)
    else:
        split = DatasetSplit.load(split_path, n_samples=fs.n_samples)

    train_cfg = cfg.train_config()
    enc_cfg = EncoderConfig(input_dim=fs.dim, **cfg.encoder_kwargs())
    init_rng, _, _ = _init_rngs(cfg.seed)
    params = init_encoder_params(enc_cfg, init_rng)

    metrics_records: list[dict] = [{"type": "config", "values": cfg.values}]
    log = TrainLog()
    best: dict = {"acc_new": -1.0, "epoch": None, "params": None}

    def record_eval(epoch: int, stage: int, candidate: EncoderParams) -> dict:
        stored = candidate.storage_roundtrip()
        metrics = _evaluate_params(fs, split, stored, seed=cfg.seed)
        rec = _metrics_record(epoch, stage, metrics)
        metrics_records.append(rec)
        if metrics.acc_new > best["acc_new"]:
            best.update(acc_new=metrics.acc_new, epoch=epoch, params=candidate.copy())
        return rec

    if train_cfg.stage1_epochs > 0:
        pretrain_known(fs, split, params, train_cfg, log, progress=progress)
    record_eval(-1, 1, params)

    evaluated_epochs: set[int] = set()

    def hook(epoch: int, current: EncoderParams) -> None:
        last = epoch == train_cfg.stage2_epochs - 1
        due = cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0
        if (due or last) and epoch not in evaluated_epochs:
            record_eval(epoch, 2, current)
            evaluated_epochs.add(epoch)

    if train_cfg.stage2_epochs > 0:
        optimize_boundaries(fs, split, params, train_cfg, log,
                            epoch_hook=hook, progress=progress)

    final_ckpt = os.path.join(out_dir, "final.fsgp")
    best_ckpt = os.path.join(out_dir, "best.fsgp")
    save_checkpoint(params, final_ckpt)
    save_checkpoint(best["params"] if best["params"] is not None else params, best_ckpt)

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for rec in metrics_records:
            fh.write(json.dumps(rec) + "\n")
    log_path = os.path.join(out_dir, "trainlog.jsonl")
    log.save(log_path)

    eval_records = [r for r in metrics_records if r["type"] == "metrics"]
    return {
        "features": features_path,
        "split": split_path,
        "metrics_path": metrics_path,
        "trainlog_path": log_path,
        "final_checkpoint": final_ckpt,
        "best_checkpoint": best_ckpt,
        "best_epoch": best["epoch"],
        "metrics": eval_records,
        "final_metrics": eval_records[-1],
    }


def _init_rngs(seed: int):
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.Generator(np.random.PCG64(c)) for c in children)


def run_eval(features_path: str, split_path: str, checkpoint_path: str,
             seed: int = 0, k: int | None = None, scope: str = "unlabeled") -> dict:
    """Evaluate a checkpoint: k-means on embeddings, matched accuracies, CH."""
    fs = load_features(features_path)
    split = DatasetSplit.load(split_path, n_samples=fs.n_samples)
    params = load_checkpoint(checkpoint_path)
    metrics = _evaluate_params(fs, split, params, seed=seed, scope=scope, k=k)
    record = {"type": "metrics", "scope": scope, "k": k if k is not None else fs.class_count}
    record.update(metrics.to_dict())
    return record


def run_export(features_path: str, checkpoint_path: str, split_path: str | None,
               out_path: str, seed: int = 0, scope: str = "unlabeled") -> dict:
    """Write embeddings as CSV rows of (id, embedding..., label, cluster)."""
    fs = load_features(features_path)
    params = load_checkpoint(checkpoint_path)
    if scope == "unlabeled":
        if split_path is None:
            raise FeatureFormatError("exporting the unlabeled subset requires a split manifest")
        split = DatasetSplit.load(split_path, n_samples=fs.n_samples)
        ids = split.unlabeled_ids
    else:
        ids = np.arange(fs.n_samples)
    emb = encode(fs.features[ids], params)
    km = kmeans(emb, fs.class_count, seed=seed)

    _ensure_parent(out_path)
    dim = emb.shape[1]
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("id," + ",".join(f"e{i}" for i in range(dim)) + ",label,cluster\n")
        for row, sample_id in enumerate(ids):
            label = fs.labels[sample_id]
            label_cell = "" if label == NO_LABEL else str(int(label))
            fh.write(",".join([str(int(sample_id)),
                               *(repr(float(v)) for v in emb[row]),
                               label_cell,
                               str(int(km.assignment[row]))]) + "\n")
    return {"path": out_path, "rows": int(ids.size)}
