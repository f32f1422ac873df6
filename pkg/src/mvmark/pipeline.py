"""End-to-end orchestration: data preparation, selector training, trigger
selection, watermarked/benign training, attacks, verification, and report
emission, all recorded in an append-only run manifest.

Every stage writes only inside the run's output directory and is skipped on
rerun if its artifact already exists under the same config hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from pathlib import Path

from . import __version__
from .attacks import (AttackConfig, distill, extract_hard, extract_soft,
                      fine_prune, finetune)
from .config import ExperimentConfig
from .data import LabeledDataset, load_digits_images, make_blobs, split_stratified
from .errors import ConfigError, MvmarkError, ReportError
from .models import ModelCheckpoint, load_checkpoint, save_checkpoint
from .seeding import stream_seed
from .trigger import (assign_labels, load_trigger_manifest, save_trigger_manifest,
                      select_trigger_set, split_source)
from .verification import verify_ownership
from .watermark import train_benign, train_watermarked

MANIFEST_NAME = "manifest.json"


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


class RunManifest:
    """Append-only record of stage artifacts for one pipeline run."""

    def __init__(self, output_dir, config: ExperimentConfig):
        self.dir = Path(output_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path = self.dir / MANIFEST_NAME
        self.config_hash = config_hash(config)
        if self.path.exists():
            self.doc = json.loads(self.path.read_text())
            if self.doc.get("config_hash") != self.config_hash:
                raise ConfigError(
                    f"{self.path}: existing manifest was produced by a different "
                    "config; use a fresh output_dir")
        else:
            self.doc = {"tool_version": __version__,
                        "config_hash": self.config_hash,
                        "seed": config.seed, "stages": {}}
            self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n")

    def has(self, stage: str) -> bool:
        info = self.doc["stages"].get(stage)
        if not info or info.get("error"):
            return False
        path = info.get("path")
        return path is None or (self.dir / path).exists()

    def record(self, stage: str, path=None, seconds: float = 0.0, extra=None):
        info = {"seconds": round(seconds, 3),
                "completed_at": time.strftime("%Y-%m-%dT%H:%M:%S")}
        if path is not None:
            info["path"] = str(Path(path).relative_to(self.dir))
        if extra:
            info.update(extra)
        self.doc["stages"][stage] = info
        self._write()

    def record_failure(self, stage: str, error: Exception):
        self.doc["stages"][stage] = {"error": f"{type(error).__name__}: {error}",
                                     "completed_at": time.strftime("%Y-%m-%dT%H:%M:%S")}
        self._write()

    def artifact(self, stage: str) -> Path:
        info = self.doc["stages"].get(stage)
        if not info or "path" not in info:
            raise ReportError(f"manifest has no artifact for stage {stage!r}")
        return self.dir / info["path"]


class PipelineError(MvmarkError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def build_dataset(config: ExperimentConfig) -> LabeledDataset:
    ds = config.dataset
    if ds.kind == "digits":
        return load_digits_images()
    return make_blobs(ds.n_per_class, ds.num_classes, ds.dim,
                      center_scale=ds.center_scale, noise=ds.noise,
                      seed=stream_seed(config.seed, "data"))


def prepare_splits(config: ExperimentConfig):
    """(source S, surrogate S-hat, held-out test) — disjoint, seed-determined."""
    full = build_dataset(config)
    trainval, test = split_stratified(full, 1.0 - config.test_fraction,
                                      config.seed, stream="test_split")
    source, surrogate = split_stratified(trainval, config.source_fraction,
                                         config.seed, stream="split")
    return source, surrogate, test


def _timed(manifest: RunManifest, stage: str, fn):
    t0 = time.monotonic()
    try:
        out = fn()
    except Exception as e:
        manifest.record_failure(stage, e)
        raise PipelineError(stage, e) from e
    return out, time.monotonic() - t0


def _jsonl_logger(path: Path):
    f = open(path, "w", encoding="utf-8")

    def log(rec):
        f.write(json.dumps(rec) + "\n")
        f.flush()
    log.close = f.close
    return log


def run_pipeline(config: ExperimentConfig) -> RunManifest:
    """Execute all stages in order; previously completed stages are skipped."""
    manifest = RunManifest(config.output_dir, config)
    out = manifest.dir
    source_set, surrogate_set, test_set = prepare_splits(config)

    # 1. clean selector model on all of S
    if not manifest.has("selector"):
        path = out / "selector.ckpt"
        ckpt, dt = _timed(manifest, "selector", lambda: train_supervised_stage(
            config, source_set))
        save_checkpoint(ckpt, path)
        manifest.record("selector", path, dt,
                        {"clean_acc": ckpt.accuracy(test_set)})
    selector = load_checkpoint(manifest.artifact("selector"))

    # 2. trigger selection + labeling
    if not manifest.has("trigger"):
        path = out / "trigger.txt"

        def _select():
            ids = select_trigger_set(selector, source_set, config.trigger.q,
                                     config.trigger.selection, config.seed,
                                     config.trigger.exclude_misclassified)
            return assign_labels(selector, source_set, ids,
                                 config.trigger.labeling, config.seed)
        trig_set, dt = _timed(manifest, "trigger", _select)
        save_trigger_manifest(trig_set, path,
                              selection=config.trigger.selection.value,
                              labeling=config.trigger.labeling.value,
                              seed=config.seed)
        manifest.record("trigger", path, dt)
    trig_set = load_trigger_manifest(manifest.artifact("trigger"))
    clean_set, trig_view = split_source(source_set, trig_set)

    # 3. watermarked source model
    if not manifest.has("source"):
        path = out / "source.ckpt"
        log = _jsonl_logger(out / "source_train_log.jsonl")
        try:
            ckpt, dt = _timed(manifest, "source", lambda: train_watermarked(
                config.model, clean_set, trig_view, config.watermark,
                original_labels=trig_set.original_labels, log_fn=log))
        finally:
            log.close()
        save_checkpoint(ckpt, path)
        manifest.record("source", path, dt,
                        {"clean_acc": ckpt.accuracy(test_set)})
    source_model = load_checkpoint(manifest.artifact("source"))

    # 4. benign reference model on D_c
    if not manifest.has("benign"):
        path = out / "benign.ckpt"
        ckpt, dt = _timed(manifest, "benign", lambda: train_benign(
            config.model, clean_set, config.benign_train))
        save_checkpoint(ckpt, path)
        manifest.record("benign", path, dt,
                        {"clean_acc": ckpt.accuracy(test_set)})
    benign_model = load_checkpoint(manifest.artifact("benign"))

    # 5. attacks
    (out / "attacks").mkdir(exist_ok=True)
    for named in config.attacks:
        stage = f"attack:{named.name}"
        if manifest.has(stage):
            continue
        path = out / "attacks" / f"{named.name}.ckpt"
        result, dt = _timed(manifest, stage,
                            lambda na=named: run_attack(na.config, source_model,
                                                        surrogate_set, test_set))
        save_checkpoint(result.checkpoint, path)
        manifest.record(stage, path, dt,
                        {"kind": result.kind, "query_count": result.query_count,
                         "config_hash": result.config_hash,
                         "clean_acc": result.checkpoint.accuracy(test_set)})

    # 6. verification: un-attacked source plus every attacked model
    (out / "reports").mkdir(exist_ok=True)
    suspects = [("source", source_model)]
    suspects += [(n.name, load_checkpoint(manifest.artifact(f"attack:{n.name}")))
                 for n in config.attacks]
    for name, suspect in suspects:
        stage = f"verify:{name}"
        if manifest.has(stage):
            continue
        path = out / "reports" / f"{name}.txt"
        report, dt = _timed(manifest, stage, lambda s=suspect: verify_ownership(
            s, benign_model, trig_set, source_set, config.significance))
        path.write_text(report.to_text())
        manifest.record(stage, path, dt,
                        {"trigger_acc": report.suspect_trigger_acc,
                         "p_value": report.p_value, "owned": report.owned})

    emit_report(manifest, config)
    return manifest


def train_supervised_stage(config: ExperimentConfig, data):
    from .models import train_supervised
    return train_supervised(config.model, data, config.selector_train)


def run_attack(cfg: AttackConfig, source_model: ModelCheckpoint,
               surrogate_set: LabeledDataset, validation_set: LabeledDataset):
    if cfg.kind == "extract_soft":
        return extract_soft(source_model, surrogate_set, cfg)
    if cfg.kind == "extract_hard":
        return extract_hard(source_model, surrogate_set, cfg)
    if cfg.kind == "distill":
        return distill(source_model, surrogate_set, cfg)
    if cfg.kind == "finetune":
        return finetune(source_model, surrogate_set, cfg)
    if cfg.kind == "fineprune":
        return fine_prune(source_model, surrogate_set, validation_set, cfg)
    raise ConfigError(f"unknown attack kind {cfg.kind!r}")


def emit_report(manifest: RunManifest, config: ExperimentConfig):
    """Write the machine-readable results table, a human summary, and sweep
    plots when the run contains a distillation-alpha sweep."""
    stages = manifest.doc["stages"]
    rows = [("model", "clean_acc", "trigger_acc", "p_value", "owned")]
    missing = [s for s in ("selector", "source", "benign", "verify:source")
               if s not in stages or stages[s].get("error")]
    for named in config.attacks:
        for s in (f"attack:{named.name}", f"verify:{named.name}"):
            if s not in stages or stages[s].get("error"):
                missing.append(s)
    if missing:
        raise ReportError(f"cannot report, incomplete stages: {missing}")

    def fmt(x):
        return f"{x:.6g}" if isinstance(x, float) else str(x)

    rows.append(("source", fmt(stages["source"]["clean_acc"]),
                 fmt(stages["verify:source"]["trigger_acc"]),
                 fmt(stages["verify:source"]["p_value"]),
                 str(stages["verify:source"]["owned"]).lower()))
    rows.append(("benign", fmt(stages["benign"]["clean_acc"]), "", "", ""))
    for named in config.attacks:
        a, v = stages[f"attack:{named.name}"], stages[f"verify:{named.name}"]
        rows.append((named.name, fmt(a["clean_acc"]), fmt(v["trigger_acc"]),
                     fmt(v["p_value"]), str(v["owned"]).lower()))

    table = manifest.dir / "results.tsv"
    table.write_text("\n".join("\t".join(r) for r in rows) + "\n")

    summary = manifest.dir / "summary.txt"
    with open(summary, "w", encoding="utf-8") as f:
        f.write(f"mvmark run {manifest.config_hash[:12]} (seed {config.seed})\n")
        f.write(f"dataset: {config.dataset.kind}, trigger q={config.trigger.q}, "
                f"selection={config.trigger.selection.value}, "
                f"labeling={config.trigger.labeling.value}\n")
        f.write(f"watermark: reg_mode={config.watermark.reg_mode}, "
                f"alpha={config.watermark.alpha}\n\n")
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        for r in rows:
            f.write("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")

    _maybe_plot_distill_sweep(manifest, config)
    manifest.record("report", table)


def _maybe_plot_distill_sweep(manifest: RunManifest, config: ExperimentConfig):
    points = []
    for named in config.attacks:
        if named.config.kind == "distill":
            v = manifest.doc["stages"][f"verify:{named.name}"]
            points.append((named.config.distill_alpha, v["trigger_acc"]))
    if len(points) < 2:
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    points.sort()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([p[0] for p in points], [p[1] for p in points], marker="o")
    ax.set_xlabel("distillation mixing weight")
    ax.set_ylabel("surrogate trigger accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(manifest.dir / "distill_sweep.png", dpi=120)
    plt.close(fig)
