"""Feature sets, few-shot splits, feature-space augmentation, synthetic benchmarks.

Class ids are dense integers in ``[0, class_count)``; a label of ``-1`` means
"absent".  All randomness flows through explicit ``numpy.random.Generator``
instances, so every operation here is pure and replayable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataError, FeatureFormatError

NO_LABEL = -1

# Ratio bounds under which a split qualifies as few-shot: both the known-class
# share and the labeled-sample share must stay at or below this value.
FEW_SHOT_MAX_RATIO = 0.2


@dataclass
class FeatureSet:
    """Dense feature vectors with (possibly absent) integer class labels.

    External string labels are mapped to dense ids at ingestion;
    ``label_names`` keeps the id -> name mapping when one exists.
    """

    features: np.ndarray          # (n, dim) float64
    labels: np.ndarray            # (n,) int64, NO_LABEL marks absent
    class_count: int
    label_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[1] < 2:
            raise FeatureFormatError(
                f"features must be (n, dim) with dim >= 2, got shape {self.features.shape}"
            )
        if self.labels.shape != (self.features.shape[0],):
            raise FeatureFormatError("labels must be one per sample")
        if not np.isfinite(self.features).all():
            bad = int(np.argwhere(~np.isfinite(self.features).all(axis=1))[0, 0])
            raise FeatureFormatError(f"non-finite feature value at row {bad}")
        present = self.labels[self.labels != NO_LABEL]
        if present.size and (present.min() < 0 or present.max() >= self.class_count):
            bad = int(np.argwhere((self.labels != NO_LABEL)
                                  & ((self.labels < 0) | (self.labels >= self.class_count)))[0, 0])
            raise FeatureFormatError(
                f"label out of range [0, {self.class_count}) at row {bad}"
            )
        if self.label_names is not None and len(self.label_names) != self.class_count:
            raise FeatureFormatError("label_names must have one entry per class")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def fully_labeled(self) -> bool:
        return bool((self.labels != NO_LABEL).all())


@dataclass
class DatasetSplit:
    """Partition into a labeled known-class subset and an unlabeled rest."""

    labeled_ids: np.ndarray       # sorted sample ids
    unlabeled_ids: np.ndarray     # sorted sample ids
    known_classes: np.ndarray     # sorted class ids
    unknown_classes: np.ndarray   # sorted class ids
    known_class_ratio: float      # |known classes| / |classes|
    labeled_sample_ratio: float   # |labeled| / |samples in known classes|
    seed: int = 0

    def __post_init__(self):
        self.labeled_ids = np.asarray(self.labeled_ids, dtype=np.int64)
        self.unlabeled_ids = np.asarray(self.unlabeled_ids, dtype=np.int64)
        self.known_classes = np.asarray(self.known_classes, dtype=np.int64)
        self.unknown_classes = np.asarray(self.unknown_classes, dtype=np.int64)

    @property
    def is_few_shot(self) -> bool:
        return (self.known_class_ratio <= FEW_SHOT_MAX_RATIO
                and self.labeled_sample_ratio <= FEW_SHOT_MAX_RATIO)

    def to_manifest(self) -> dict:
        return {
            "version": 1,
            "n_samples": int(self.labeled_ids.size + self.unlabeled_ids.size),
            "known_classes": [int(c) for c in self.known_classes],
            "unknown_classes": [int(c) for c in self.unknown_classes],
            "labeled_ids": [int(i) for i in self.labeled_ids],
            "c_l": self.known_class_ratio,
            "p_l": self.labeled_sample_ratio,
            "seed": int(self.seed),
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_manifest(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path, n_samples: int | None = None) -> "DatasetSplit":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                m = json.load(fh)
        except FileNotFoundError as exc:
            raise FeatureFormatError(f"split manifest not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise FeatureFormatError(f"split manifest is not valid JSON: {path}") from exc
        for key in ("n_samples", "known_classes", "unknown_classes", "labeled_ids"):
            if key not in m:
                raise FeatureFormatError(f"split manifest missing field '{key}': {path}")
        total = int(m["n_samples"])
        if n_samples is not None and n_samples != total:
            raise FeatureFormatError(
                f"split manifest covers {total} samples but the feature set has {n_samples}"
            )
        labeled = np.asarray(sorted(m["labeled_ids"]), dtype=np.int64)
        mask = np.zeros(total, dtype=bool)
        mask[labeled] = True
        return cls(
            labeled_ids=labeled,
            unlabeled_ids=np.flatnonzero(~mask).astype(np.int64),
            known_classes=np.asarray(sorted(m["known_classes"]), dtype=np.int64),
            unknown_classes=np.asarray(sorted(m["unknown_classes"]), dtype=np.int64),
            known_class_ratio=float(m["c_l"]),
            labeled_sample_ratio=float(m["p_l"]),
            seed=int(m.get("seed", 0)),
        )


@dataclass
class AugmentConfig:
    """Feature-space substitute for image augmentation: additive Gaussian
    jitter, per-coordinate dropout, and multiplicative scale jitter."""

    noise_sigma: float = 0.1
    dropout_prob: float = 0.05
    scale_jitter: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not (0 <= self.dropout_prob < 1):
            raise ValueError("dropout_prob must be in [0, 1)")
        lo, hi = self.scale_jitter
        if not (lo <= 1.0 <= hi):
            raise ValueError("scale_jitter range must contain 1")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(noise_sigma=0.0, dropout_prob=0.0, scale_jitter=(1.0, 1.0))


@dataclass
class SyntheticConfig:
    """Gaussian-mixture benchmark with unit per-coordinate class noise.

    ``class_separation`` is measured in units of the within-class RMS radius
    (``sqrt(dim)`` for a unit isotropic Gaussian): the closest centroid pair
    sits exactly ``class_separation`` cloud-radii apart.
    """

    class_count: int = 20
    samples_per_class: int = 50
    dim: int = 32
    class_separation: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.class_separation <= 0:
            raise ValueError("class_separation must be > 0")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")


def _round_half_up(x: float) -> int:
    # Half-up with a tiny guard against fp representation of p * n.
    return int(math.floor(x + 0.5 + 1e-9))


def generate_split(fs: FeatureSet, c_l: float, p_l: float, seed: int = 0) -> DatasetSplit:
    """Split a fully labeled feature set into labeled/unlabeled subsets.

    The first ``ceil(c_l * class_count)`` class ids (ascending) become known
    classes; within each known class, ``max(1, round(p_l * class_size))``
    samples are labeled, drawn uniformly by ``seed``.  Everything else is
    unlabeled.
    """
    if not (0 < c_l <= 1):
        raise DegenerateDataError(f"c_l must be in (0, 1], got {c_l}")
    if not (0 < p_l <= 1):
        raise DegenerateDataError(f"p_l must be in (0, 1], got {p_l}")
    if not fs.fully_labeled:
        raise DegenerateDataError("splitting requires a fully labeled feature set")

    n_known = int(math.ceil(c_l * fs.class_count - 1e-9))
    known = np.arange(n_known, dtype=np.int64)
    unknown = np.arange(n_known, fs.class_count, dtype=np.int64)

    rng = np.random.Generator(np.random.PCG64(seed))
    labeled: list[np.ndarray] = []
    for cls in known:
        members = np.flatnonzero(fs.labels == cls)
        if members.size == 0:
            raise DegenerateDataError(f"known class {cls} has no samples")
        want = max(1, _round_half_up(p_l * members.size))
        picked = rng.choice(members, size=min(want, members.size), replace=False)
        labeled.append(np.sort(picked))
    labeled_ids = np.sort(np.concatenate(labeled)) if labeled else np.empty(0, np.int64)

    mask = np.zeros(fs.n_samples, dtype=bool)
    mask[labeled_ids] = True
    return DatasetSplit(
        labeled_ids=labeled_ids.astype(np.int64),
        unlabeled_ids=np.flatnonzero(~mask).astype(np.int64),
        known_classes=known,
        unknown_classes=unknown,
        known_class_ratio=float(c_l),
        labeled_sample_ratio=float(p_l),
        seed=int(seed),
    )


def augment_rows(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment a stack of feature rows: ``mask * (scale * x + noise)``.

    Draw order is fixed (per-row scales, then the noise block, then the keep
    mask) so identical generator states reproduce identical views.  The
    identity config returns the input bit-exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    rows = np.atleast_2d(x)
    n, dim = rows.shape
    lo, hi = cfg.scale_jitter
    scales = rng.uniform(lo, hi, size=n)
    noise = rng.normal(0.0, cfg.noise_sigma, size=(n, dim))
    keep = rng.random((n, dim)) >= cfg.dropout_prob
    out = keep * (scales[:, None] * rows + noise)
    return out[0] if squeeze else out


def augment_view(v: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Single-vector form of :func:`augment_rows`."""
    return augment_rows(v, cfg, rng)


def make_synthetic(cfg: SyntheticConfig) -> FeatureSet:
    """Generate a fully labeled Gaussian-mixture feature set.

    Centroid directions are drawn at random and rescaled so the minimum
    pairwise centroid distance equals ``class_separation`` within-class RMS
    radii (``class_separation * sqrt(dim)`` in coordinate units).
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    raw = rng.normal(0.0, 1.0, size=(cfg.class_count, cfg.dim))
    diffs = raw[:, None, :] - raw[None, :, :]
    dists = np.sqrt((diffs ** 2).sum(axis=2))
    min_dist = dists[np.triu_indices(cfg.class_count, k=1)].min()
    if min_dist < 1e-9:
        raise DegenerateDataError(
            f"dimension {cfg.dim} too small to place {cfg.class_count} centroids "
            f"at separation {cfg.class_separation}"
        )
    centroids = raw * (cfg.class_separation * math.sqrt(cfg.dim) / min_dist)

    n = cfg.class_count * cfg.samples_per_class
    features = np.empty((n, cfg.dim), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    for cls in range(cfg.class_count):
        lo = cls * cfg.samples_per_class
        hi = lo + cfg.samples_per_class
        features[lo:hi] = centroids[cls] + rng.normal(0.0, 1.0, size=(cfg.samples_per_class, cfg.dim))
        labels[lo:hi] = cls
    return FeatureSet(features=features, labels=labels, class_count=cfg.class_count)
