"""The adversary suite: black-box soft/hard-label extraction and distillation,
plus white-box fine-tuning and fine-pruning.

Black-box attacks see the victim only through a QueryOracle that exposes
logits and counts queries; the victim checkpoint is never mutated.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledDataset
from .errors import AttackError, ConfigError
from .models import (ModelCheckpoint, ModelSpec, TrainConfig, _epoch_batches,
                     build_module, flat_parameters, lr_at_epoch, set_flat_parameters,
                     softmax)
from .seeding import stream_rng, stream_seed

log = logging.getLogger(__name__)

ATTACK_KINDS = ("extract_soft", "extract_hard", "distill", "finetune", "fineprune")


class QueryOracle:
    """Black-box view of a victim model: logit queries only, with an audit count.

    Parameters are deliberately unreachable through this interface; the audit
    counters let tests prove an attack made zero parameter reads.
    """

    def __init__(self, victim: ModelCheckpoint):
        self.__victim = victim
        self.query_count = 0
        self.parameter_reads = 0   # stays 0 by construction

    @property
    def num_classes(self) -> int:
        return self.__victim.spec.num_classes

    def logits(self, batch: np.ndarray) -> np.ndarray:
        self.query_count += len(batch)
        return self.__victim.forward_logits(batch)

    def probs(self, batch: np.ndarray) -> np.ndarray:
        return softmax(self.logits(batch))


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    surrogate_spec: ModelSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    distill_alpha: float | None = None
    prune_acc_drop: float | None = None
    prune_batch_size: int = 256
    kl_direction: str = "student_teacher"   # KL(surrogate || source), as written
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.kind == "distill":
            if self.distill_alpha is None or not 0.0 <= self.distill_alpha <= 1.0:
                raise ConfigError("distill needs distill_alpha in [0, 1]")
        elif self.distill_alpha is not None:
            raise ConfigError("distill_alpha only applies to the distill attack")
        if self.kind == "fineprune":
            if self.prune_acc_drop is None:
                object.__setattr__(self, "prune_acc_drop", 0.2)
        elif self.prune_acc_drop is not None:
            raise ConfigError("prune_acc_drop only applies to the fineprune attack")
        if self.kl_direction not in ("student_teacher", "teacher_student"):
            raise ConfigError("kl_direction must be student_teacher or teacher_student")

    def hash(self) -> str:
        d = {k: (v.to_dict() if isinstance(v, ModelSpec) else
                 v.__dict__ if isinstance(v, TrainConfig) else v)
             for k, v in self.__dict__.items()}
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class AttackResult:
    checkpoint: ModelCheckpoint
    kind: str
    query_count: int
    config_hash: str


# ---------------------------------------------------------------------------
# Loss terms (shared by training loops and gradient checks)
# ---------------------------------------------------------------------------

def kl_divergence(p_log, q_log):
    """Batched KL(p || q) from log-probabilities; mean over the batch."""
    p = p_log.exp()
    return (p * (p_log - q_log)).sum(dim=1).mean()


def extraction_loss(student_logits, teacher_probs, direction="student_teacher",
                    temperature: float = 1.0):
    """Mean KL between surrogate and source output distributions."""
    s_log = F.log_softmax(student_logits / temperature, dim=1)
    t_log = torch.log(torch.clamp(teacher_probs, min=1e-30))
    if direction == "student_teacher":
        return kl_divergence(s_log, t_log)
    return kl_divergence(t_log, s_log)


def distill_loss(student_logits, teacher_probs, labels, alpha,
                 direction="student_teacher", temperature: float = 1.0):
    """alpha * extraction KL + (1 - alpha) * CE on ground-truth labels."""
    kl = extraction_loss(student_logits, teacher_probs, direction, temperature)
    ce = F.cross_entropy(student_logits, labels)
    return alpha * kl + (1.0 - alpha) * ce


# ---------------------------------------------------------------------------
# Black-box attacks
# ---------------------------------------------------------------------------

def _query_teacher(source, data: LabeledDataset, temperature: float) -> np.ndarray:
    oracle = source if isinstance(source, QueryOracle) else QueryOracle(source)
    probs = []
    for lo in range(0, len(data), 512):
        logits = oracle.logits(data.xs[lo:lo + 512])
        probs.append(softmax(logits / temperature))
    return oracle, np.concatenate(probs).astype(np.float32)


def _train_surrogate(source, data: LabeledDataset, cfg: AttackConfig,
                     mode: str, log_fn=None) -> AttackResult:
    if len(data) == 0:
        raise AttackError("surrogate dataset is empty")
    if cfg.surrogate_spec is None:
        raise ConfigError("black-box attacks need a surrogate_spec")
    oracle, teacher_probs = _query_teacher(source, data, cfg.temperature)
    spec, train = cfg.surrogate_spec, cfg.train
    module = build_module(spec, init_seed=stream_seed(train.seed, "init"))
    shuffle_rng = stream_rng(train.seed, "shuffle")
    xs = torch.from_numpy(data.xs)
    ys = torch.from_numpy(data.ys)
    tp = torch.from_numpy(teacher_probs)
    hard = torch.from_numpy(np.argmax(teacher_probs, axis=1))  # ties -> lowest index
    opt = torch.optim.SGD(module.parameters(), lr=train.lr_initial,
                          momentum=train.momentum, weight_decay=train.weight_decay)
    module.train()
    for epoch in range(train.epochs):
        lr = lr_at_epoch(train, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        total, seen = 0.0, 0
        for idx in _epoch_batches(len(data), train.batch_size, shuffle_rng):
            bi = torch.from_numpy(idx)
            opt.zero_grad()
            logits = module(xs[bi])
            if mode == "extract_soft":
                loss = extraction_loss(logits, tp[bi], cfg.kl_direction, cfg.temperature)
            elif mode == "extract_hard":
                loss = F.cross_entropy(logits, hard[bi])
            else:
                loss = distill_loss(logits, tp[bi], ys[bi], cfg.distill_alpha,
                                    cfg.kl_direction, cfg.temperature)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        if log_fn is not None:
            log_fn({"epoch": epoch, "lr": lr, "loss": total / seen})
    module.eval()
    ckpt = ModelCheckpoint(spec=spec, parameters=flat_parameters(module),
                           epoch=train.epochs)
    return AttackResult(checkpoint=ckpt, kind=mode,
                        query_count=oracle.query_count, config_hash=cfg.hash())


def extract_soft(source, surrogate_data: LabeledDataset, cfg: AttackConfig,
                 log_fn=None) -> AttackResult:
    """Functionality stealing: match the source's softmax outputs under KL."""
    return _train_surrogate(source, surrogate_data, cfg, "extract_soft", log_fn)


def extract_hard(source, surrogate_data: LabeledDataset, cfg: AttackConfig,
                 log_fn=None) -> AttackResult:
    """Extraction from argmax labels only (one-hot teacher)."""
    return _train_surrogate(source, surrogate_data, cfg, "extract_hard", log_fn)


def distill(source, surrogate_data: LabeledDataset, cfg: AttackConfig,
            log_fn=None) -> AttackResult:
    """Extraction blended with supervised training on ground-truth labels."""
    return _train_surrogate(source, surrogate_data, cfg, "distill", log_fn)


# ---------------------------------------------------------------------------
# White-box attacks
# ---------------------------------------------------------------------------

def _finetune_module(module, data: LabeledDataset, train: TrainConfig,
                     zero_channels=None, log_fn=None):
    """Continue CE training in place, optionally holding pruned channels at zero."""
    shuffle_rng = stream_rng(train.seed, "shuffle")
    xs = torch.from_numpy(data.xs)
    ys = torch.from_numpy(data.ys)
    opt = torch.optim.SGD(module.parameters(), lr=train.lr_initial,
                          momentum=train.momentum, weight_decay=train.weight_decay)
    module.train()
    for epoch in range(train.epochs):
        lr = lr_at_epoch(train, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        total, seen = 0.0, 0
        for idx in _epoch_batches(len(data), train.batch_size, shuffle_rng):
            bi = torch.from_numpy(idx)
            opt.zero_grad()
            loss = F.cross_entropy(module(xs[bi]), ys[bi])
            loss.backward()
            opt.step()
            if zero_channels is not None and len(zero_channels):
                _zero_conv_channels(module, zero_channels)
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        if log_fn is not None:
            log_fn({"epoch": epoch, "lr": lr, "loss": total / seen})
    module.eval()


def finetune(source: ModelCheckpoint, clean_data: LabeledDataset,
             cfg: AttackConfig, log_fn=None) -> AttackResult:
    """White-box: continue supervised training from the source parameters."""
    module = build_module(source.spec, init_seed=0)
    set_flat_parameters(module, source.parameters)
    _finetune_module(module, clean_data, cfg.train, log_fn=log_fn)
    ckpt = ModelCheckpoint(spec=source.spec, parameters=flat_parameters(module),
                           epoch=source.epoch + cfg.train.epochs)
    return AttackResult(checkpoint=ckpt, kind="finetune", query_count=0,
                        config_hash=cfg.hash())


def _zero_conv_channels(module, channels):
    with torch.no_grad():
        module.last_conv.weight[channels] = 0.0
        module.last_conv.bias[channels] = 0.0


def channel_activation_order(source: ModelCheckpoint, clean_data: LabeledDataset,
                             batch_size: int = 256, seed: int = 0) -> np.ndarray:
    """Channels of the last conv layer, ascending by mean absolute activation
    over a seed-fixed clean batch."""
    if source.spec.architecture != "convnet":
        raise AttackError("fine-pruning needs a convolutional source model")
    rng = stream_rng(seed, "attack")
    rows = rng.choice(len(clean_data), size=min(batch_size, len(clean_data)),
                      replace=False)
    module = source.module()
    with torch.no_grad():
        maps = module.last_conv_maps(torch.from_numpy(clean_data.xs[rows]))
        means = maps.abs().mean(dim=(0, 2, 3)).numpy().astype(np.float64)
    # stable: ties break by channel index
    return np.lexsort((np.arange(len(means)), means))


def fine_prune(source: ModelCheckpoint, clean_data: LabeledDataset,
               validation_data: LabeledDataset, cfg: AttackConfig,
               log_fn=None) -> AttackResult:
    """Zero low-activation channels of the last conv layer until validation
    accuracy drops by more than prune_acc_drop, then fine-tune with the pruned
    channels held at zero."""
    if len(validation_data) == 0:
        raise AttackError("fine-pruning needs a non-empty validation set")
    order = channel_activation_order(source, clean_data, cfg.prune_batch_size,
                                     cfg.train.seed)
    module = build_module(source.spec, init_seed=0)
    set_flat_parameters(module, source.parameters)
    module.eval()

    def val_acc():
        with torch.no_grad():
            hits = 0
            for lo in range(0, len(validation_data), 512):
                x = torch.from_numpy(validation_data.xs[lo:lo + 512])
                pred = module(x).argmax(1).numpy()
                hits += int((pred == validation_data.ys[lo:lo + 512]).sum())
        return hits / len(validation_data)

    base_acc = val_acc()
    pruned = []
    saved = flat_parameters(module)
    for ch in order:
        _zero_conv_channels(module, [int(ch)])
        if val_acc() < base_acc - cfg.prune_acc_drop:
            set_flat_parameters(module, saved)   # undo the violating prune
            break
        pruned.append(int(ch))
        saved = flat_parameters(module)
    if not pruned:
        log.warning("fine-pruning: first prune already violates the accuracy "
                    "threshold; fine-tuning the unpruned model")
    _finetune_module(module, clean_data, cfg.train, zero_channels=pruned,
                     log_fn=log_fn)
    ckpt = ModelCheckpoint(spec=source.spec, parameters=flat_parameters(module),
                           epoch=source.epoch + cfg.train.epochs)
    return AttackResult(checkpoint=ckpt, kind="fineprune", query_count=0,
                        config_hash=cfg.hash())
