"""Datasets: synthetic Gaussian blobs, the builtin 8x8 digits images, and
deterministic stratified splitting.

Samples carry stable integer ids so that trigger manifests remain valid
across subsetting and reordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .seeding import stream_rng


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable labeled dataset with stable per-sample ids."""

    xs: np.ndarray          # float32, (N, *input_shape)
    ys: np.ndarray          # int64, (N,)
    ids: np.ndarray         # int64, (N,), unique
    dataset_id: str
    num_classes: int

    def __post_init__(self):
        if len(self.xs) != len(self.ys) or len(self.xs) != len(self.ids):
            raise DataError("xs, ys and ids must have equal length")
        if len(self.ids) != len(np.unique(self.ids)):
            raise DataError("sample ids must be unique")
        if len(self.ys) and (self.ys.min() < 0 or self.ys.max() >= self.num_classes):
            raise DataError(
                f"labels must lie in [0, {self.num_classes}), "
                f"got range [{self.ys.min()}, {self.ys.max()}]"
            )

    def __len__(self) -> int:
        return len(self.xs)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.xs.shape[1:])

    def index_of(self, sample_ids) -> np.ndarray:
        """Positions of the given sample ids; raises DataError on unknowns."""
        sample_ids = np.asarray(sample_ids, dtype=np.int64)
        order = np.argsort(self.ids)
        pos = np.searchsorted(self.ids, sample_ids, sorter=order)
        bad = (pos >= len(self.ids))
        pos = np.clip(pos, 0, len(self.ids) - 1)
        rows = order[pos]
        bad |= self.ids[rows] != sample_ids
        if bad.any():
            missing = sample_ids[bad][:5].tolist()
            raise DataError(f"unknown sample ids: {missing}")
        return rows

    def subset(self, rows, relabel: np.ndarray | None = None) -> "LabeledDataset":
        """New dataset from the given row positions, optionally with new labels."""
        rows = np.asarray(rows, dtype=np.int64)
        ys = self.ys[rows] if relabel is None else np.asarray(relabel, dtype=np.int64)
        return LabeledDataset(
            xs=self.xs[rows], ys=ys, ids=self.ids[rows],
            dataset_id=self.dataset_id, num_classes=self.num_classes,
        )

    def take_ids(self, sample_ids, relabel=None) -> "LabeledDataset":
        return self.subset(self.index_of(sample_ids), relabel=relabel)


def make_blobs(n_per_class: int, num_classes: int, dim: int,
               center_scale: float = 2.0, noise: float = 1.0,
               seed: int = 0, dataset_id: str | None = None) -> LabeledDataset:
    """Gaussian blobs with class centers on a random simplex-ish layout.

    `center_scale` controls separation relative to the unit noise; values
    around 2 leave enough overlap for genuinely ambiguous boundary samples.
    """
    if num_classes < 2 or dim < 1 or n_per_class < 1:
        raise ConfigError("blobs need num_classes >= 2, dim >= 1, n_per_class >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, dim))
    centers *= center_scale / np.linalg.norm(centers, axis=1, keepdims=True)
    xs = np.concatenate([
        centers[c] + noise * rng.standard_normal((n_per_class, dim))
        for c in range(num_classes)
    ]).astype(np.float32)
    ys = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    ids = np.arange(len(xs), dtype=np.int64)
    name = dataset_id or f"blobs-k{num_classes}-d{dim}-n{n_per_class}-s{seed}"
    return LabeledDataset(xs=xs, ys=ys, ids=ids, dataset_id=name, num_classes=num_classes)


def load_digits_images() -> LabeledDataset:
    """The builtin 8x8 grayscale digits set as standardized (1, 8, 8) images."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    xs = raw.images[:, None, :, :].astype(np.float32) / 16.0
    xs = (xs - xs.mean()) / xs.std()
    ys = raw.target.astype(np.int64)
    ids = np.arange(len(xs), dtype=np.int64)
    return LabeledDataset(xs=xs, ys=ys, ids=ids, dataset_id="digits8x8", num_classes=10)


def split_stratified(data: LabeledDataset, fraction: float, seed: int,
                     stream: str = "split") -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint class-stratified split; first part gets round(fraction*N) per class."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    rng = stream_rng(seed, stream)
    left, right = [], []
    for c in range(data.num_classes):
        rows = np.flatnonzero(data.ys == c)
        rng.shuffle(rows)
        k = int(round(fraction * len(rows)))
        left.append(rows[:k])
        right.append(rows[k:])
    left = np.sort(np.concatenate(left))
    right = np.sort(np.concatenate(right))
    if len(left) == 0 or len(right) == 0:
        raise ConfigError(f"fraction {fraction} leaves one side of the split empty")
    return data.subset(left), data.subset(right)
