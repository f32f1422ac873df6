"""Watermarked source training: clean cross-entropy plus trigger-set
cross-entropy, optionally with a feature regularizer that pulls trigger
features toward the assigned-class mean (attract) or pushes them away from
the original-class mean (repel).

Each optimization step draws a clean mini-batch and the full trigger set;
the class-mean feature bank is rebuilt from the clean data at the start of
every epoch, so epoch 0 runs unregularized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledDataset
from .errors import ConfigError, DataError, WatermarkError
from .models import (FeatureBank, ModelCheckpoint, ModelSpec, TrainConfig,
                     _epoch_batches, build_module, flat_parameters, lr_at_epoch,
                     train_supervised)
from .seeding import stream_rng, stream_seed

log = logging.getLogger(__name__)

REG_MODES = ("none", "attract", "repel")


@dataclass(frozen=True)
class WatermarkTrainConfig:
    base: TrainConfig = field(default_factory=TrainConfig)
    alpha: float = 0.01
    reg_mode: str = "none"
    repel_cap_scale: float = 10.0   # cap = scale * mean inter-class-mean distance

    def __post_init__(self):
        if self.reg_mode not in REG_MODES:
            raise ConfigError(f"reg_mode must be one of {REG_MODES}")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError("alpha must be finite and >= 0")


def joint_loss(module, clean_x, clean_y, trig_x=None, trig_y=None):
    """Mean CE over the clean batch plus mean CE over the trigger batch."""
    if len(clean_x) == 0:
        raise DataError("clean batch is empty")
    loss = F.cross_entropy(module(clean_x), clean_y)
    if trig_x is not None and len(trig_x) > 0:
        loss = loss + F.cross_entropy(module(trig_x), trig_y)
    return loss


def feature_reg_loss(module, trig_x, target_labels, bank: FeatureBank,
                     mode: str = "attract", cap: float | None = None):
    """Mean Euclidean distance between trigger features and per-class bank means.

    `target_labels` are assigned labels for attract and original labels for
    repel. Bank means are constants; entries whose class has no bank mean are
    skipped. Returns 0 (with a warning) if nothing is available.
    """
    if mode not in ("attract", "repel"):
        raise ConfigError(f"bad reg mode {mode!r}")
    avail = bank.available()
    labels = np.asarray(target_labels)
    keep = np.flatnonzero(avail[labels])
    if len(keep) == 0:
        log.warning("feature regularizer skipped: no class means available")
        return trig_x.new_zeros(())
    feats = module.features(trig_x[torch.from_numpy(keep)])
    targets = torch.as_tensor(bank.means[labels[keep]], dtype=feats.dtype)
    dists = torch.linalg.vector_norm(feats - targets, dim=1)
    if cap is not None:
        dists = torch.clamp(dists, max=cap)
    return dists.mean()


def watermark_loss(module, clean_x, clean_y, trig_x, trig_y_assigned,
                   trig_y_original, bank: FeatureBank | None,
                   alpha: float, reg_mode: str, repel_cap: float | None = None):
    """Total training loss for one step; bank=None disables the regularizer."""
    loss = joint_loss(module, clean_x, clean_y, trig_x, trig_y_assigned)
    if bank is None or reg_mode == "none" or alpha == 0 or len(trig_x) == 0:
        return loss
    if reg_mode == "attract":
        return loss + alpha * feature_reg_loss(module, trig_x, trig_y_assigned,
                                               bank, "attract")
    return loss - alpha * feature_reg_loss(module, trig_x, trig_y_original,
                                           bank, "repel", cap=repel_cap)


def _bank_from_module(module, data: LabeledDataset, epoch: int,
                      batch_size: int = 512) -> FeatureBank:
    K = module.final.out_features
    p = module.final.in_features
    sums = np.zeros((K, p), dtype=np.float64)
    counts = np.zeros(K, dtype=np.int64)
    was_training = module.training
    module.eval()
    with torch.no_grad():
        for lo in range(0, len(data), batch_size):
            feats = module.features(torch.from_numpy(data.xs[lo:lo + batch_size]))
            ys = data.ys[lo:lo + batch_size]
            np.add.at(sums, ys, feats.numpy().astype(np.float64))
            counts += np.bincount(ys, minlength=K)
    if was_training:
        module.train()
    means = np.zeros_like(sums)
    nz = counts > 0
    means[nz] = sums[nz] / counts[nz, None]
    return FeatureBank(means=means, counts=counts, epoch_of_origin=epoch)


def _repel_cap(bank: FeatureBank, scale: float) -> float:
    means = bank.means[bank.available()]
    if len(means) < 2:
        return float("inf")
    d = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
    return scale * float(d[np.triu_indices(len(means), k=1)].mean())


def _train_joint(spec: ModelSpec, clean: LabeledDataset, trig: LabeledDataset,
                 cfg: WatermarkTrainConfig, orig_labels=None,
                 log_fn=None) -> ModelCheckpoint:
    base = cfg.base
    module = build_module(spec, init_seed=stream_seed(base.seed, "init"))
    shuffle_rng = stream_rng(base.seed, "shuffle")
    cx, cy = torch.from_numpy(clean.xs), torch.from_numpy(clean.ys)
    tx = torch.from_numpy(trig.xs) if len(trig) else None
    ty = torch.from_numpy(trig.ys) if len(trig) else None
    ty_orig = None
    opt = torch.optim.SGD(module.parameters(), lr=base.lr_initial,
                          momentum=base.momentum, weight_decay=base.weight_decay)
    module.train()
    for epoch in range(base.epochs):
        lr = lr_at_epoch(base, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        use_reg = (cfg.reg_mode != "none" and cfg.alpha > 0
                   and len(trig) > 0 and epoch > 0)
        bank = _bank_from_module(module, clean, epoch) if use_reg else None
        cap = (_repel_cap(bank, cfg.repel_cap_scale)
               if use_reg and cfg.reg_mode == "repel" else None)
        sums = {"clean": 0.0, "trig": 0.0, "reg": 0.0}
        steps = 0
        for idx in _epoch_batches(len(clean), base.batch_size, shuffle_rng):
            bi = torch.from_numpy(idx)
            opt.zero_grad()
            clean_term = F.cross_entropy(module(cx[bi]), cy[bi])
            loss = clean_term
            trig_term = reg_term = None
            if tx is not None:
                trig_term = F.cross_entropy(module(tx), ty)
                loss = loss + trig_term
            if bank is not None:
                if cfg.reg_mode == "attract":
                    reg_term = feature_reg_loss(module, tx, trig.ys, bank, "attract")
                    loss = loss + cfg.alpha * reg_term
                else:
                    reg_term = feature_reg_loss(module, tx, orig_labels,
                                                bank, "repel", cap=cap)
                    loss = loss - cfg.alpha * reg_term
            loss.backward()
            opt.step()
            sums["clean"] += float(clean_term.detach())
            sums["trig"] += float(trig_term.detach()) if trig_term is not None else 0.0
            sums["reg"] += float(reg_term.detach()) if reg_term is not None else 0.0
            steps += 1
        if log_fn is not None:
            module.eval()
            with torch.no_grad():
                trig_acc = (float((module(tx).argmax(1) == ty).float().mean())
                            if tx is not None else 0.0)
                clean_acc = _module_accuracy(module, clean)
            module.train()
            log_fn({"epoch": epoch, "lr": lr,
                    "clean_loss": sums["clean"] / steps,
                    "trigger_loss": sums["trig"] / steps,
                    "reg_loss": sums["reg"] / steps,
                    "trigger_acc": trig_acc, "clean_acc": clean_acc,
                    "bank_epoch": bank.epoch_of_origin if bank is not None else None})
    module.eval()
    rng_state = int(shuffle_rng.bit_generator.state["state"]["state"]).to_bytes(16, "little")
    return ModelCheckpoint(spec=spec, parameters=flat_parameters(module),
                           epoch=base.epochs, rng_state=rng_state)


def _module_accuracy(module, data: LabeledDataset, batch_size: int = 512) -> float:
    hits = 0
    with torch.no_grad():
        for lo in range(0, len(data), batch_size):
            pred = module(torch.from_numpy(data.xs[lo:lo + batch_size])).argmax(1)
            hits += int((pred.numpy() == data.ys[lo:lo + batch_size]).sum())
    return hits / len(data)


def train_watermarked(spec: ModelSpec, clean: LabeledDataset, trig: LabeledDataset,
                      cfg: WatermarkTrainConfig, original_labels=None,
                      log_fn=None) -> ModelCheckpoint:
    """Train the watermarked source model on D_c plus the relabeled trigger set.

    `original_labels` (pre-relabeling classes of the trigger samples) are only
    needed for reg_mode="repel".
    """
    if len(trig) == 0:
        raise WatermarkError("trigger set is empty; nothing to embed")
    if cfg.reg_mode == "repel" and original_labels is None:
        raise ConfigError("repel mode needs the trigger samples' original labels")
    orig = (np.asarray(original_labels, dtype=np.int64)
            if original_labels is not None else None)
    return _train_joint(spec, clean, trig, cfg, orig_labels=orig, log_fn=log_fn)


def train_benign(spec: ModelSpec, clean: LabeledDataset,
                 config: TrainConfig, log=None) -> ModelCheckpoint:
    """Plain supervised training on the clean set; the null-hypothesis model."""
    return train_supervised(spec, clean, config, log=log)
