"""Experiment configuration: a strict YAML schema with unknown-key rejection.

See docs in README.md for the full schema; `example_config()` returns a
ready-to-run desk-scale configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import yaml

from .attacks import ATTACK_KINDS, AttackConfig
from .errors import ConfigError
from .models import ModelSpec, TrainConfig
from .trigger import LabelStrategy, SelectionStrategy
from .watermark import WatermarkTrainConfig

_TRAIN_KEYS = {"epochs", "batch_size", "lr_initial", "lr_decay_every",
               "lr_decay_factor", "momentum", "weight_decay", "seed"}
_MODEL_KEYS = {"architecture", "num_classes", "feature_dim", "input_shape", "widths"}
_DATASET_KEYS = {"kind", "n_per_class", "num_classes", "dim", "center_scale",
                 "noise", "path"}
_TRIGGER_KEYS = {"q", "selection", "labeling", "exclude_misclassified"}
_WATERMARK_KEYS = {"alpha", "reg_mode", "repel_cap_scale", "train"}
_ATTACK_KEYS = {"kind", "name", "surrogate_model", "train", "distill_alpha",
                "prune_acc_drop", "prune_batch_size", "kl_direction", "temperature"}
_TOP_KEYS = {"dataset", "test_fraction", "source_fraction", "model",
             "selector_train", "trigger", "watermark", "benign_train",
             "attacks", "significance", "seed", "output_dir"}


def _reject_unknown(d: dict, allowed: set, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}; "
                          f"allowed: {sorted(allowed)}")


def _parse_train(d: dict, where: str, seed: int) -> TrainConfig:
    _reject_unknown(d, _TRAIN_KEYS, where)
    d = dict(d)
    d.setdefault("seed", seed)
    return TrainConfig(**d)


def _parse_model(d: dict, where: str) -> ModelSpec:
    _reject_unknown(d, _MODEL_KEYS, where)
    return ModelSpec(architecture=d["architecture"], num_classes=d["num_classes"],
                     feature_dim=d["feature_dim"],
                     input_shape=tuple(d["input_shape"]),
                     widths=tuple(d.get("widths", ())))


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"                 # blobs | digits
    n_per_class: int = 300
    num_classes: int = 5
    dim: int = 10
    center_scale: float = 2.0
    noise: float = 1.0


@dataclass(frozen=True)
class TriggerConfig:
    q: int = 30
    selection: SelectionStrategy = SelectionStrategy.MARGIN_TOP
    labeling: LabelStrategy = LabelStrategy.RUNNER_UP
    exclude_misclassified: bool = False


@dataclass(frozen=True)
class NamedAttack:
    name: str
    config: AttackConfig


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    model: ModelSpec
    selector_train: TrainConfig
    trigger: TriggerConfig
    watermark: WatermarkTrainConfig
    benign_train: TrainConfig
    attacks: tuple = ()
    test_fraction: float = 0.2
    source_fraction: float = 0.5
    significance: float = 0.01
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if not 0.0 < self.source_fraction < 1.0:
            raise ConfigError("source_fraction must lie in (0, 1)")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if not 0.0 < self.significance < 1.0:
            raise ConfigError("significance must lie in (0, 1)")


def parse_config(raw: dict) -> ExperimentConfig:
    _reject_unknown(raw, _TOP_KEYS, "config")
    seed = int(raw.get("seed", 0))

    ds_raw = raw.get("dataset", {})
    _reject_unknown(ds_raw, _DATASET_KEYS, "dataset")
    kind = ds_raw.get("kind", "blobs")
    if kind not in ("blobs", "digits"):
        raise ConfigError(f"dataset.kind must be blobs or digits, got {kind!r}")
    dataset = DatasetConfig(kind=kind,
                            n_per_class=ds_raw.get("n_per_class", 300),
                            num_classes=ds_raw.get("num_classes", 5),
                            dim=ds_raw.get("dim", 10),
                            center_scale=ds_raw.get("center_scale", 2.0),
                            noise=ds_raw.get("noise", 1.0))

    model = _parse_model(raw["model"], "model")
    selector_train = _parse_train(raw.get("selector_train", {}), "selector_train", seed)

    tr_raw = raw.get("trigger", {})
    _reject_unknown(tr_raw, _TRIGGER_KEYS, "trigger")
    trigger = TriggerConfig(
        q=tr_raw.get("q", 30),
        selection=SelectionStrategy(tr_raw.get("selection", "margin_top")),
        labeling=LabelStrategy(tr_raw.get("labeling", "runner_up")),
        exclude_misclassified=tr_raw.get("exclude_misclassified", False))

    wm_raw = raw.get("watermark", {})
    _reject_unknown(wm_raw, _WATERMARK_KEYS, "watermark")
    watermark = WatermarkTrainConfig(
        base=_parse_train(wm_raw.get("train", {}), "watermark.train", seed),
        alpha=wm_raw.get("alpha", 0.01),
        reg_mode=wm_raw.get("reg_mode", "attract"),
        repel_cap_scale=wm_raw.get("repel_cap_scale", 10.0))

    benign_train = _parse_train(raw.get("benign_train", {}), "benign_train", seed)

    attacks = []
    for i, a in enumerate(raw.get("attacks", [])):
        _reject_unknown(a, _ATTACK_KEYS, f"attacks[{i}]")
        kind = a.get("kind")
        if kind not in ATTACK_KINDS:
            raise ConfigError(f"attacks[{i}]: unknown kind {kind!r}")
        surrogate = (_parse_model(a["surrogate_model"], f"attacks[{i}].surrogate_model")
                     if "surrogate_model" in a else model)
        cfg = AttackConfig(
            kind=kind,
            surrogate_spec=surrogate if kind in ("extract_soft", "extract_hard",
                                                 "distill") else None,
            train=_parse_train(a.get("train", {}), f"attacks[{i}].train", seed + 1),
            distill_alpha=a.get("distill_alpha"),
            prune_acc_drop=a.get("prune_acc_drop"),
            prune_batch_size=a.get("prune_batch_size", 256),
            kl_direction=a.get("kl_direction", "student_teacher"),
            temperature=a.get("temperature", 1.0))
        attacks.append(NamedAttack(name=a.get("name", kind), config=cfg))
    names = [a.name for a in attacks]
    if len(names) != len(set(names)):
        raise ConfigError("attack names must be unique (set 'name' to disambiguate)")

    return ExperimentConfig(
        dataset=dataset, model=model, selector_train=selector_train,
        trigger=trigger, watermark=watermark, benign_train=benign_train,
        attacks=tuple(attacks),
        test_fraction=raw.get("test_fraction", 0.2),
        source_fraction=raw.get("source_fraction", 0.5),
        significance=raw.get("significance", 0.01),
        seed=seed, output_dir=raw.get("output_dir", "runs/default"))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return parse_config(raw)


def example_config(output_dir: str = "runs/example", seed: int = 0) -> dict:
    """A desk-scale image experiment (8x8 digits, small conv net) with the
    full attack suite; finishes in a few minutes on a laptop CPU."""
    base = {"epochs": 60, "batch_size": 64, "lr_initial": 0.1,
            "lr_decay_every": 20}
    extract = {"epochs": 150, "batch_size": 64, "lr_initial": 0.01,
               "lr_decay_every": 60, "seed": seed + 30}
    return {
        "dataset": {"kind": "digits"},
        "test_fraction": 0.2,
        "source_fraction": 0.5,
        "model": {"architecture": "mlp", "num_classes": 10,
                  "feature_dim": 64, "input_shape": [1, 8, 8],
                  "widths": [128]},
        "selector_train": {**base, "seed": seed},
        "trigger": {"q": 40, "selection": "margin_top", "labeling": "runner_up"},
        "watermark": {"alpha": 0.01, "reg_mode": "attract",
                      "train": {**base, "seed": seed + 10}},
        "benign_train": {**base, "seed": seed + 20},
        "attacks": [
            {"kind": "extract_soft", "train": dict(extract)},
            {"kind": "extract_hard", "train": dict(extract)},
            {"kind": "distill", "distill_alpha": 0.5, "train": dict(extract)},
            {"kind": "finetune", "train": {**extract, "epochs": 30,
                                           "lr_initial": 0.005,
                                           "lr_decay_every": 15}},
        ],
        "significance": 0.01,
        "seed": seed,
        "output_dir": output_dir,
    }
