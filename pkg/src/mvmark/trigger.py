"""Trigger-set construction: logit-margin ranking, label reassignment, and
the clean/trigger split of the source data.

The default strategy pair (margin_top + runner_up) picks boundary samples
that exhibit features of two classes and relabels each to its runner-up
class; `random`/`random_other`/`highest_confidence`/`min_confidence` exist
for the ablation baselines.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import LabeledDataset
from .errors import DataError, InputError, PersistenceError, SelectionError
from .models import ModelCheckpoint
from .seeding import stream_rng


class SelectionStrategy(str, Enum):
    MARGIN_TOP = "margin_top"
    RANDOM = "random"
    HIGHEST_CONFIDENCE = "highest_confidence"


class LabelStrategy(str, Enum):
    RUNNER_UP = "runner_up"
    RANDOM_OTHER = "random_other"
    MIN_CONFIDENCE = "min_confidence"


@dataclass(frozen=True)
class TriggerEntry:
    sample_id: int
    original_label: int
    assigned_label: int
    margin: float


@dataclass(frozen=True)
class TriggerSet:
    """The ownership secret: relabeled sample ids, sorted by margin descending."""

    entries: tuple
    source_dataset_id: str
    selector_model_hash: str

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise DataError("trigger sample ids must be unique")
        for e in self.entries:
            if e.assigned_label == e.original_label:
                raise DataError(f"sample {e.sample_id}: assigned label equals original")
        margins = [e.margin for e in self.entries]
        if any(a < b for a, b in zip(margins, margins[1:])):
            raise DataError("trigger entries must be sorted by margin descending")

    def __len__(self):
        return len(self.entries)

    @property
    def sample_ids(self) -> np.ndarray:
        return np.array([e.sample_id for e in self.entries], dtype=np.int64)

    @property
    def assigned_labels(self) -> np.ndarray:
        return np.array([e.assigned_label for e in self.entries], dtype=np.int64)

    @property
    def original_labels(self) -> np.ndarray:
        return np.array([e.original_label for e in self.entries], dtype=np.int64)


def logit_margin(logits: np.ndarray, y: int) -> float:
    """max_{j != y} logits[j] - logits[y]; negative iff the model predicts y."""
    logits = np.asarray(logits, dtype=np.float64)
    K = logits.shape[-1]
    if K < 2:
        raise InputError("logit_margin needs at least 2 classes")
    if not 0 <= y < K:
        raise InputError(f"label {y} out of range for {K} classes")
    others = np.delete(logits, y)
    return float(others.max() - logits[y])


def margins_for(model: ModelCheckpoint, data: LabeledDataset,
                batch_size: int = 512) -> np.ndarray:
    """Logit margin of every sample under the model, in dataset order."""
    out = np.empty(len(data), dtype=np.float64)
    for lo in range(0, len(data), batch_size):
        logits = model.forward_logits(data.xs[lo:lo + batch_size]).astype(np.float64)
        ys = data.ys[lo:lo + batch_size]
        true = logits[np.arange(len(ys)), ys]
        masked = logits.copy()
        masked[np.arange(len(ys)), ys] = -np.inf
        out[lo:lo + batch_size] = masked.max(axis=1) - true
    return out


def select_trigger_set(model: ModelCheckpoint, data: LabeledDataset, q: int,
                       strategy: SelectionStrategy = SelectionStrategy.MARGIN_TOP,
                       seed: int = 0, exclude_misclassified: bool = False) -> np.ndarray:
    """Pick q sample ids; ties in margin ranking break by ascending sample id."""
    strategy = SelectionStrategy(strategy)
    pool = np.arange(len(data))
    if exclude_misclassified:
        pool = pool[margins_for(model, data) < 0]
    if q > len(pool):
        raise SelectionError(f"q={q} exceeds pool size {len(pool)}")
    pool_ids = data.ids[pool]
    if strategy is SelectionStrategy.RANDOM:
        rng = stream_rng(seed, "select")
        chosen = rng.choice(pool_ids, size=q, replace=False)
        return np.sort(chosen)
    margins = margins_for(model, data)[pool]
    sign = -1.0 if strategy is SelectionStrategy.MARGIN_TOP else 1.0
    order = np.lexsort((pool_ids, sign * margins))
    return pool_ids[order[:q]]


def assign_labels(model: ModelCheckpoint, data: LabeledDataset, ids,
                  strategy: LabelStrategy = LabelStrategy.RUNNER_UP,
                  seed: int = 0) -> TriggerSet:
    """Relabel the selected samples; every assigned label differs from the original."""
    strategy = LabelStrategy(strategy)
    ids = np.asarray(ids, dtype=np.int64)
    rows = data.index_of(ids)
    logits = model.forward_logits(data.xs[rows]).astype(np.float64)
    ys = data.ys[rows]
    K = logits.shape[1]
    n = len(ids)
    gaps = logits - logits[np.arange(n), ys][:, None]
    gaps[np.arange(n), ys] = np.nan
    if strategy is LabelStrategy.RUNNER_UP:
        assigned = np.nanargmax(gaps, axis=1)
    elif strategy is LabelStrategy.MIN_CONFIDENCE:
        assigned = np.nanargmin(gaps, axis=1)
    else:
        rng = stream_rng(seed, "label")
        assigned = np.array([(y + 1 + rng.integers(K - 1)) % K for y in ys])
    margins = np.nanmax(gaps, axis=1)
    entries = [TriggerEntry(sample_id=int(i), original_label=int(y),
                            assigned_label=int(a), margin=float(m))
               for i, y, a, m in zip(ids, ys, assigned, margins)]
    entries.sort(key=lambda e: (-e.margin, e.sample_id))
    return TriggerSet(entries=tuple(entries), source_dataset_id=data.dataset_id,
                      selector_model_hash=model.hash())


def split_source(data: LabeledDataset, trigger: TriggerSet
                 ) -> tuple[LabeledDataset, LabeledDataset]:
    """(clean set with original labels, trigger view with assigned labels)."""
    if len(trigger) == 0:
        return data, data.subset(np.array([], dtype=np.int64))
    trig_rows = data.index_of(trigger.sample_ids)
    mask = np.ones(len(data), dtype=bool)
    mask[trig_rows] = False
    clean = data.subset(np.flatnonzero(mask))
    trig = data.subset(trig_rows, relabel=trigger.assigned_labels)
    return clean, trig


# ---------------------------------------------------------------------------
# Trigger manifest file: the secret exchanged with the verification module.
# Header lines are "# key: value"; records are "sample_id y y_hat margin".
# ---------------------------------------------------------------------------

def save_trigger_manifest(trigger: TriggerSet, path, selection: str = "",
                          labeling: str = "", seed: int = 0):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# dataset_id: {trigger.source_dataset_id}\n")
        f.write(f"# selector_model_hash: {trigger.selector_model_hash}\n")
        f.write(f"# selection_strategy: {selection}\n")
        f.write(f"# label_strategy: {labeling}\n")
        f.write(f"# seed: {seed}\n")
        for e in trigger.entries:
            f.write(f"{e.sample_id} {e.original_label} {e.assigned_label} {e.margin!r}\n")


def load_trigger_manifest(path) -> TriggerSet:
    header, entries = {}, []
    try:
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, val = line[1:].partition(":")
                    header[key.strip()] = val.strip()
                else:
                    sid, y, yhat, margin = line.split()
                    entries.append(TriggerEntry(int(sid), int(y), int(yhat), float(margin)))
    except (OSError, ValueError) as e:
        raise PersistenceError(f"{path}: bad trigger manifest: {e}") from e
    if "dataset_id" not in header:
        raise PersistenceError(f"{path}: manifest header missing dataset_id")
    return TriggerSet(entries=tuple(entries), source_dataset_id=header["dataset_id"],
                      selector_model_hash=header.get("selector_model_hash", ""))
