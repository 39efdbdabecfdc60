"""Feature file formats.

Binary ``.fsgf`` layout (little-endian):

    magic   "FSGF"
    u32     version (= 1)
    u64     n_samples
    u32     dim
    u32     class_count
    n_samples records of: dim * f32 features, i32 label (-1 = absent)

A CSV variant with header ``f0,...,f{dim-1},label`` is accepted for
interchange; an empty label cell means absent.  Integer labels are taken as
dense class ids (class_count inferred as ``max(label) + 1``); any other label
strings are mapped to dense ids in sorted order and the mapping travels with
the set (as a ``<path>.labels.json`` sidecar next to binary files).
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct

import numpy as np

from .data import NO_LABEL, FeatureSet
from .errors import FeatureFormatError

MAGIC = b"FSGF"
VERSION = 1
_HEADER = struct.Struct("<4sIQII")


def _sidecar_path(path: str) -> str:
    return path + ".labels.json"


def load_features(path: str | os.PathLike) -> FeatureSet:
    """Load a feature file; the format is picked by extension (.csv vs binary)."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FeatureFormatError(f"feature file not found: {path}")
    if path.endswith(".csv"):
        return _load_csv(path)
    return _load_binary(path)


def save_features(fs: FeatureSet, path: str | os.PathLike) -> None:
    path = os.fspath(path)
    if path.endswith(".csv"):
        _save_csv(fs, path)
    else:
        _save_binary(fs, path)


def _load_binary(path: str) -> FeatureSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, n, dim, class_count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if dim < 2:
        raise FeatureFormatError(f"{path}: dim must be >= 2, header says {dim}")
    record = dim * 4 + 4
    expected = _HEADER.size + n * record
    if len(blob) != expected:
        raise FeatureFormatError(
            f"{path}: payload is {len(blob) - _HEADER.size} bytes, expected {n * record}"
        )
    body = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size).reshape(n, record)
    features = body[:, : dim * 4].copy().view("<f4").reshape(n, dim)
    labels = body[:, dim * 4:].copy().view("<i4").reshape(n)

    finite = np.isfinite(features).all(axis=1)
    if not finite.all():
        raise FeatureFormatError(f"{path}: non-finite feature value at row {int(np.argmin(finite))}")
    bad = (labels != NO_LABEL) & ((labels < 0) | (labels >= class_count))
    if bad.any():
        row = int(np.argmax(bad))
        raise FeatureFormatError(
            f"{path}: label {int(labels[row])} out of range [0, {class_count}) at row {row}"
        )
    label_names = None
    if os.path.exists(_sidecar_path(path)):
        try:
            with open(_sidecar_path(path), "r", encoding="utf-8") as fh:
                label_names = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise FeatureFormatError(f"{path}: unreadable label sidecar") from exc
    return FeatureSet(
        features=features.astype(np.float64),
        labels=labels.astype(np.int64),
        class_count=int(class_count),
        label_names=label_names,
    )


def _save_binary(fs: FeatureSet, path: str) -> None:
    n, dim = fs.features.shape
    as32 = fs.features.astype("<f4")
    if not np.isfinite(as32).all():
        row = int(np.argmin(np.isfinite(as32).all(axis=1)))
        raise FeatureFormatError(f"feature value at row {row} overflows 32-bit storage")
    record = np.empty((n, dim * 4 + 4), dtype=np.uint8)
    record[:, : dim * 4] = as32.view(np.uint8).reshape(n, dim * 4)
    record[:, dim * 4:] = fs.labels.astype("<i4").view(np.uint8).reshape(n, 4)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, dim, fs.class_count))
        fh.write(record.tobytes())


def _load_csv(path: str) -> FeatureSet:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FeatureFormatError(f"{path}: empty file") from None
        dim = len(header) - 1
        if dim < 2 or header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(dim)]:
            raise FeatureFormatError(
                f"{path}: malformed header, expected f0,...,f{{dim-1}},label"
            )
        feats: list[list[float]] = []
        labels: list[int] = []
        for row_idx, row in enumerate(reader):
            if len(row) != dim + 1:
                raise FeatureFormatError(
                    f"{path}: row {row_idx} has {len(row) - 1} features, header says {dim}"
                )
            try:
                values = [float(v) for v in row[:-1]]
            except ValueError:
                raise FeatureFormatError(f"{path}: unparsable feature at row {row_idx}") from None
            if not all(np.isfinite(values)):
                raise FeatureFormatError(f"{path}: non-finite feature value at row {row_idx}")
            cell = row[-1].strip()
            if cell == "":
                labels.append(NO_LABEL)
            else:
                try:
                    labels.append(int(cell))
                except ValueError:
                    raise FeatureFormatError(f"{path}: unparsable label at row {row_idx}") from None
                if labels[-1] < 0:
                    raise FeatureFormatError(f"{path}: negative label at row {row_idx}")
            feats.append(values)
    if not feats:
        raise FeatureFormatError(f"{path}: no data rows")
    label_arr = np.asarray(labels, dtype=np.int64)
    present = label_arr[label_arr != NO_LABEL]
    class_count = int(present.max()) + 1 if present.size else 0
    return FeatureSet(
        features=np.asarray(feats, dtype=np.float64),
        labels=label_arr,
        class_count=class_count,
    )


def _save_csv(fs: FeatureSet, path: str) -> None:
    n, dim = fs.features.shape
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"f{i}" for i in range(dim)] + ["label"])
    for i in range(n):
        label = "" if fs.labels[i] == NO_LABEL else str(int(fs.labels[i]))
        writer.writerow([repr(float(v)) for v in fs.features[i]] + [label])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
