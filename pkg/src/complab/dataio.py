"""Dataset file formats.

Feature files are either text (header "n d", then one row of space-separated
decimals per sample, full float64 precision) or the binary bank layout.
Label files are CSV with header sample_id,identity,camera; partitions dump
as sample_id,group_id.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding_store import BANK_MAGIC, read_bank_file, write_bank_file
from .errors import DataError


@dataclass
class Dataset:
    features: np.ndarray          # (n, d) float64
    identities: np.ndarray | None = None
    cameras: np.ndarray | None = None
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        n = self.features.shape[0]
        if self.sample_ids is None:
            self.sample_ids = np.arange(n, dtype=np.intp)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def save_features_text(path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    with open(path, "w") as fh:
        fh.write(f"{n} {d}\n")
        for row in features:
            fh.write(" ".join(f"{x:.17g}" for x in row))
            fh.write("\n")


def load_features_text(path) -> np.ndarray:
    try:
        with open(path) as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise DataError(f"bad feature header in {path}")
            n, d = int(header[0]), int(header[1])
            data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    except OSError as exc:
        raise DataError(f"cannot read features {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"malformed feature file {path}: {exc}") from exc
    if data.shape != (n, d):
        raise DataError(f"feature file {path} has shape {data.shape}, header says {(n, d)}")
    if not np.all(np.isfinite(data)):
        raise DataError(f"non-finite values in {path}")
    return data


def save_features_binary(path, features: np.ndarray) -> None:
    write_bank_file(path, features, momentum=1.0)


def load_features(path) -> np.ndarray:
    """Load a feature file, sniffing the binary bank magic."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file {path} does not exist")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == BANK_MAGIC:
        vectors, _ = read_bank_file(path)
        return vectors
    return load_features_text(path)


def save_labels_csv(path, sample_ids, identities, cameras) -> None:
    with open(path, "w") as fh:
        fh.write("sample_id,identity,camera\n")
        for s, y, c in zip(sample_ids, identities, cameras):
            fh.write(f"{int(s)},{int(y)},{int(c)}\n")


def load_labels_csv(path):
    try:
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "sample_id,identity,camera":
                raise DataError(f"bad label header in {path}: {header!r}")
            rows = [line.split(",") for line in fh if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read labels {path}: {exc}") from exc
    try:
        arr = np.array([[int(a), int(b), int(c)] for a, b, c in rows], dtype=np.intp)
    except ValueError as exc:
        raise DataError(f"malformed label file {path}: {exc}") from exc
    if arr.size == 0:
        raise DataError(f"empty label file {path}")
    return arr[:, 0], arr[:, 1], arr[:, 2]


def save_partition_csv(path, sample_ids, group_labels) -> None:
    with open(path, "w") as fh:
        fh.write("sample_id,group_id\n")
        for s, g in zip(sample_ids, group_labels):
            fh.write(f"{int(s)},{int(g)}\n")


def load_dataset(features_path, labels_path=None) -> Dataset:
    """Assemble a Dataset from a feature file and an optional label file.

    Label rows are aligned to feature rows by sample_id, which must cover
    exactly 0..n-1.
    """
    features = load_features(features_path)
    if labels_path is None:
        return Dataset(features)
    sample_ids, identities, cameras = load_labels_csv(labels_path)
    n = features.shape[0]
    if sample_ids.size != n or not np.array_equal(np.sort(sample_ids), np.arange(n)):
        raise DataError(
            f"label file {labels_path} does not cover the {n} samples of {features_path}"
        )
    order = np.argsort(sample_ids)
    return Dataset(
        features,
        identities=identities[order],
        cameras=cameras[order],
    )
