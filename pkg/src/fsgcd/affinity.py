"""Per-epoch nearest-neighbor retrieval over snapshot embeddings.

Before each boundary-optimization epoch, every training sample is encoded
once with the current parameters.  Labeled anchors retrieve their most
cosine-similar unlabeled sample, which inherits the anchor's label as a
pseudo-label; unlabeled anchors retrieve over the full pool (so they may bind
to labeled exemplars).  The resulting index is immutable for the epoch.

Search is exact O(n^2); ties resolve to the lowest sample id, and pseudo-label
conflicts resolve to the highest anchor-neighbor cosine (then lowest anchor
id).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import DatasetSplit, FeatureSet
from .encoder import EncoderParams, encode
from .errors import DegenerateDataError


@dataclass
class AffinityIndex:
    epoch_embeddings: np.ndarray      # (n, embed_dim) snapshot, read-only
    nn_of: np.ndarray                 # (n,) neighbor id per sample
    nn_sim: np.ndarray                # (n,) cosine to that neighbor
    pseudo_labels: dict[int, int]     # retrieved-neighbor id -> inherited label

    def __post_init__(self):
        self.epoch_embeddings.setflags(write=False)
        self.nn_of.setflags(write=False)
        self.nn_sim.setflags(write=False)

    @property
    def n_samples(self) -> int:
        return self.nn_of.shape[0]

    def retrieve(self, sample_id: int) -> tuple[int, np.ndarray]:
        """Snapshot neighbor of a sample; stable for the whole epoch."""
        if not 0 <= sample_id < self.n_samples:
            raise KeyError(f"unknown sample id {sample_id}")
        nn = int(self.nn_of[sample_id])
        return nn, self.epoch_embeddings[nn]

    def dump_csv(self) -> str:
        """Debug table of (id, nn_id, cosine, pseudo_label)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "nn_id", "cosine", "pseudo_label"])
        for i in range(self.n_samples):
            label = self.pseudo_labels.get(i, "")
            writer.writerow([i, int(self.nn_of[i]), repr(float(self.nn_sim[i])), label])
        return buf.getvalue()


def nearest_neighbors(emb: np.ndarray, labeled_ids: np.ndarray,
                      unlabeled_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine-nearest neighbor per sample under the retrieval pool rules.

    Labeled anchors search the unlabeled pool; unlabeled anchors search
    everything but themselves.  Ties go to the lowest sample id.  Embeddings
    are assumed unit-norm, so dot products are cosines.
    """
    emb = np.asarray(emb, dtype=np.float64)
    labeled_ids = np.asarray(labeled_ids, dtype=np.int64)
    unlabeled_ids = np.asarray(unlabeled_ids, dtype=np.int64)
    n = emb.shape[0]
    sims = emb @ emb.T

    nn_of = np.empty(n, dtype=np.int64)
    nn_sim = np.empty(n, dtype=np.float64)

    if labeled_ids.size:
        sub = sims[np.ix_(labeled_ids, unlabeled_ids)]
        best = np.argmax(sub, axis=1)  # first max = lowest id (pool is ascending)
        nn_of[labeled_ids] = unlabeled_ids[best]
        nn_sim[labeled_ids] = sub[np.arange(labeled_ids.size), best]

    if unlabeled_ids.size:
        masked = sims.copy()
        np.fill_diagonal(masked, -np.inf)
        best_all = np.argmax(masked[unlabeled_ids], axis=1)
        nn_of[unlabeled_ids] = best_all
        nn_sim[unlabeled_ids] = masked[unlabeled_ids, best_all]
    return nn_of, nn_sim


def resolve_pseudo_labels(nn_of: np.ndarray, nn_sim: np.ndarray,
                          labeled_ids: np.ndarray, labels: np.ndarray) -> dict[int, int]:
    """Give each retrieved neighbor its anchor's label; conflicts go to the
    highest anchor-neighbor cosine, then the lowest anchor id."""
    claims: dict[int, tuple[float, int, int]] = {}
    for anchor in np.asarray(labeled_ids, dtype=np.int64):
        neighbor = int(nn_of[anchor])
        candidate = (float(nn_sim[anchor]), -int(anchor), int(labels[anchor]))
        held = claims.get(neighbor)
        if held is None or candidate[:2] > held[:2]:
            claims[neighbor] = candidate
    return {nb: label for nb, (_, _, label) in sorted(claims.items())}


def build_affinity_index(fs: FeatureSet, split: DatasetSplit,
                         params: EncoderParams) -> AffinityIndex:
    """Encode the train set once and wire up nearest neighbors + pseudo-labels."""
    if split.labeled_ids.size == 0:
        raise DegenerateDataError("cannot build an affinity index without labeled samples")
    if split.unlabeled_ids.size == 0:
        raise DegenerateDataError("cannot build an affinity index without unlabeled samples")
    params.check_finite()

    emb = encode(fs.features, params)
    nn_of, nn_sim = nearest_neighbors(emb, split.labeled_ids, split.unlabeled_ids)
    pseudo = resolve_pseudo_labels(nn_of, nn_sim, split.labeled_ids, fs.labels)
    return AffinityIndex(epoch_embeddings=emb, nn_of=nn_of, nn_sim=nn_sim,
                         pseudo_labels=pseudo)


def retrieve(index: AffinityIndex, sample_id: int) -> tuple[int, np.ndarray]:
    return index.retrieve(sample_id)


def augmented_labeled_set(index: AffinityIndex, fs: FeatureSet,
                          split: DatasetSplit) -> list[tuple[int, int]]:
    """True-labeled ids plus pseudo-labeled retrieved ids, with their labels.

    A neighbor retrieved by several anchors appears once, carrying the label
    resolved by the conflict rule.
    """
    out = [(int(i), int(fs.labels[i])) for i in split.labeled_ids]
    out.extend((nb, label) for nb, label in index.pseudo_labels.items())
    return out
