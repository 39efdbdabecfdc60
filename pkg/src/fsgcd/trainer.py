"""Two-stage training loop.

Stage 1 pre-trains boundaries of the known classes on the labeled subset with
the known triplet loss.  Stage 2 rebuilds the affinity index at the start of
every epoch, then optimizes the combined objective over shuffled minibatches
of the full train set, attaching augmented views, affinity partners, and
pseudo-labels to each batch.

Runs are bit-reproducible: all randomness derives from the config seed
through named substreams, optimizer updates walk the parameter list in a
fixed order, and logs contain no wall-clock data.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .affinity import build_affinity_index
from .data import NO_LABEL, AugmentConfig, DatasetSplit, FeatureSet, augment_rows
from .encoder import DECAY_EXEMPT, EncoderParams, encode_backward, encode_with_cache
from .errors import DegenerateBatchError, DegenerateDataError
from .losses import ALL_COMPONENTS, LossConfig, known_triplet_loss, total_loss


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-5
    batch_size: int = 32
    stage1_epochs: int = 20
    stage2_epochs: int = 100
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    components: frozenset = ALL_COMPONENTS

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        self.components = frozenset(self.components)
        unknown = self.components - ALL_COMPONENTS
        if unknown:
            raise ValueError(f"unknown loss components: {sorted(unknown)}")


class TrainLog:
    """Append-only record of steps, skips, and rng checkpoints."""

    def __init__(self):
        self.records: list[dict] = []

    def add(self, **fields) -> None:
        self.records.append(fields)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


class Velocity:
    """Momentum buffers, one per trainable tensor, all starting at zero."""

    def __init__(self, params: EncoderParams):
        self.buffers = {name: np.zeros_like(arr) for name, arr in params.trainable_items()}


def sgd_step(params: EncoderParams, grads, cfg: TrainConfig, velocity: Velocity) -> EncoderParams:
    """Classic momentum update applied to the trainable tensors only.

    vel <- momentum * vel + grad + weight_decay * param
    param <- param - lr * vel

    LayerNorm gains/biases are exempt from weight decay.
    """
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise DegenerateDataError(f"non-finite gradient for parameter '{name}'")
        param = getattr(params, name)
        update = grad if name in DECAY_EXEMPT else grad + cfg.weight_decay * param
        vel = velocity.buffers[name]
        vel *= cfg.momentum
        vel += update
        param -= cfg.lr * vel
    return params


def _rng_fingerprint(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=int)
    return hashlib.sha256(state.encode()).hexdigest()[:16]


def _stage_rngs(seed: int):
    init, stage1, stage2 = np.random.SeedSequence(seed).spawn(3)
    return (np.random.Generator(np.random.PCG64(init)),
            np.random.Generator(np.random.PCG64(stage1)),
            np.random.Generator(np.random.PCG64(stage2)))


def _batches(order: np.ndarray, batch_size: int):
    for lo in range(0, order.size, batch_size):
        chunk = order[lo:lo + batch_size]
        if chunk.size >= 2:
            yield chunk


def pretrain_known(fs: FeatureSet, split: DatasetSplit, params: EncoderParams,
                   cfg: TrainConfig, log: TrainLog | None = None,
                   progress: bool = False) -> tuple[EncoderParams, TrainLog]:
    """Stage 1: known-boundary pre-training on the labeled subset."""
    log = log if log is not None else TrainLog()
    labels = fs.labels[split.labeled_ids]
    if np.unique(labels).size < 2:
        raise DegenerateDataError("stage 1 needs labeled samples from >= 2 classes")

    _, rng, _ = _stage_rngs(cfg.seed)
    velocity = Velocity(params)
    x = fs.features
    step = 0
    for epoch in range(cfg.stage1_epochs):
        log.add(event="epoch_start", stage=1, epoch=epoch, rng=_rng_fingerprint(rng))
        order = rng.permutation(split.labeled_ids)
        for batch_ids in _batches(order, cfg.batch_size):
            emb, cache = encode_with_cache(x[batch_ids], params)
            try:
                value, d_emb, info = known_triplet_loss(
                    emb, fs.labels[batch_ids], cfg.loss.margin, rng)
            except DegenerateBatchError as exc:
                log.add(event="batch_skip", stage=1, epoch=epoch, step=step, reason=str(exc))
                step += 1
                continue
            sgd_step(params, encode_backward(cache, d_emb), cfg, velocity)
            log.add(event="step", stage=1, epoch=epoch, step=step,
                    loss=value, anchors_skipped=info["skipped"])
            step += 1
        if progress:
            print(f"stage1 epoch {epoch + 1}/{cfg.stage1_epochs}", file=sys.stderr)
    params.check_finite()
    return params, log


def _assemble_batch(fs: FeatureSet, split_labeled: np.ndarray, index, batch_ids: np.ndarray,
                    aug: AugmentConfig, rng: np.random.Generator):
    """Member/view/partner/partner-view feature stacks plus label metadata."""
    x = fs.features
    is_labeled = np.isin(batch_ids, split_labeled)
    partner_ids = index.nn_of[batch_ids]
    member_labels = np.array(
        [int(fs.labels[i]) if lab else index.pseudo_labels.get(int(i), NO_LABEL)
         for i, lab in zip(batch_ids, is_labeled)], dtype=np.int64)
    partner_labels = np.array(
        [index.pseudo_labels.get(int(j), NO_LABEL) for j in partner_ids], dtype=np.int64)

    xm = x[batch_ids]
    xp = x[partner_ids]
    xv = augment_rows(xm, aug, rng)
    xpv = augment_rows(xp, aug, rng)
    return xm, xv, xp, xpv, member_labels, is_labeled, partner_labels


def optimize_boundaries(fs: FeatureSet, split: DatasetSplit, params: EncoderParams,
                        cfg: TrainConfig, log: TrainLog | None = None,
                        epoch_hook=None, progress: bool = False) -> tuple[EncoderParams, TrainLog]:
    """Stage 2: retrieval-guided boundary optimization with per-epoch
    affinity rebuilds.

    ``epoch_hook(epoch, params)``, when given, runs after each epoch's
    updates (evaluation cadence, checkpoint tracking).  Optimizer velocity
    starts fresh, independent of stage 1.
    """
    log = log if log is not None else TrainLog()
    _, _, rng = _stage_rngs(cfg.seed)
    velocity = Velocity(params)
    all_ids = np.concatenate([split.labeled_ids, split.unlabeled_ids])
    all_ids.sort()
    step = 0
    for epoch in range(cfg.stage2_epochs):
        index = build_affinity_index(fs, split, params)
        log.add(event="epoch_start", stage=2, epoch=epoch,
                rng=_rng_fingerprint(rng), pseudo_labels=len(index.pseudo_labels))
        order = rng.permutation(all_ids)
        for batch_ids in _batches(order, cfg.batch_size):
            xm, xv, xp, xpv, member_labels, is_labeled, partner_labels = _assemble_batch(
                fs, split.labeled_ids, index, batch_ids, cfg.augment, rng)
            stacked = np.concatenate([xm, xv, xp, xpv], axis=0)
            emb, cache = encode_with_cache(stacked, params)
            b = batch_ids.size
            e_m, e_v, e_p, e_pv = emb[:b], emb[b:2 * b], emb[2 * b:3 * b], emb[3 * b:]
            try:
                value, (d_m, d_v, d_p, d_pv), parts, info = total_loss(
                    e_m, e_v, e_p, e_pv, member_labels, is_labeled, partner_labels,
                    cfg.loss, rng, components=cfg.components)
            except DegenerateBatchError as exc:
                raise DegenerateBatchError(
                    f"stage 2 epoch {epoch} step {step}: {exc}") from exc
            upstream = np.concatenate([d_m, d_v, d_p, d_pv], axis=0)
            sgd_step(params, encode_backward(cache, upstream), cfg, velocity)
            log.add(event="step", stage=2, epoch=epoch, step=step, loss=value,
                    parts={k: v for k, v in parts.items()},
                    skips=list(info["skips"]))
            step += 1
        if epoch_hook is not None:
            epoch_hook(epoch, params)
        if progress:
            print(f"stage2 epoch {epoch + 1}/{cfg.stage2_epochs}", file=sys.stderr)
    params.check_finite()
    return params, log
