"""Closed-form two-class multi-view model: orthonormal class feature vectors,
samples that mix them with scalar weights, linear classifiers over the
feature space, and an end-to-end transfer experiment showing when a trigger
prediction survives model extraction.

The trigger is a class-1 sample whose feature also carries a class-0
component (weights (w0, w1)), relabeled to class 0; the experiment measures
how often a surrogate extracted from the watermarked source still predicts
class 0 on it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, extract_soft
from .data import LabeledDataset
from .errors import InputError
from .models import ModelCheckpoint, ModelSpec, TrainConfig
from .seeding import stream_rng
from .watermark import WatermarkTrainConfig, train_watermarked


@dataclass(frozen=True)
class FeatureBasis:
    """Orthonormal class feature vectors, one per class."""

    vectors: np.ndarray    # (C, p), float64

    def __post_init__(self):
        v = self.vectors
        gram = v @ v.T
        if not np.allclose(gram, np.eye(len(v)), atol=1e-12):
            raise InputError("basis vectors must be orthonormal to 1e-12")

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def make_orthonormal_basis(num_classes: int, dim: int, seed: int = 0) -> FeatureBasis:
    """Gram-Schmidt on random Gaussian vectors."""
    if num_classes > dim:
        raise InputError("cannot fit more orthogonal class vectors than dimensions")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((num_classes, dim))
    basis = np.empty_like(raw)
    for i in range(num_classes):
        v = raw[i].copy()
        for j in range(i):
            v -= (v @ basis[j]) * basis[j]
        # second pass for numerical orthogonality
        for j in range(i):
            v -= (v @ basis[j]) * basis[j]
        basis[i] = v / np.linalg.norm(v)
    return FeatureBasis(vectors=basis)


@dataclass(frozen=True)
class MultiViewSample:
    weights: np.ndarray    # (C,)
    feature: np.ndarray    # (p,)


def make_multiview_sample(weights, basis: FeatureBasis) -> MultiViewSample:
    """Exact linear combination of the class feature vectors."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (basis.num_classes,):
        raise InputError(f"need {basis.num_classes} weights, got {weights.shape}")
    feature = weights @ basis.vectors
    return MultiViewSample(weights=weights, feature=feature)


@dataclass(frozen=True)
class LinearClassifier:
    W: np.ndarray    # (C, p)
    b: np.ndarray    # (C,)


def linear_logits(clf: LinearClassifier, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != clf.W.shape[1]:
        raise InputError("feature dimension does not match classifier")
    return f @ clf.W.T + clf.b


def aligned_classifier(basis: FeatureBasis) -> LinearClassifier:
    """Rows of W equal the class vectors, zero bias: logit_i = w_i exactly."""
    return LinearClassifier(W=basis.vectors.copy(),
                            b=np.zeros(basis.num_classes))


def alignment_cosines(model: ModelCheckpoint, basis: FeatureBasis) -> np.ndarray:
    """cos(W_i, v_i) of a trained linear model's head against the basis."""
    W, _ = model.final_layer()
    W = W.astype(np.float64)
    norms = np.linalg.norm(W, axis=1)
    return np.array([W[i] @ basis.vectors[i] / norms[i] if norms[i] else 0.0
                     for i in range(basis.num_classes)])


def sample_clean_features(n_per_class: int, basis: FeatureBasis,
                          rng: np.random.Generator,
                          off_weight_max: float = 0.1,
                          noise_sigma: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Per-class samples: own-class weight 1, other weights ~ U(0, 0.1),
    plus Gaussian noise in the orthogonal complement of the basis."""
    C, p = basis.num_classes, basis.dim
    xs, ys = [], []
    for c in range(C):
        w = rng.uniform(0.0, off_weight_max, size=(n_per_class, C))
        w[:, c] = 1.0
        g = noise_sigma * rng.standard_normal((n_per_class, p))
        g -= (g @ basis.vectors.T) @ basis.vectors   # project out basis span
        xs.append(w @ basis.vectors + g)
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


@dataclass(frozen=True)
class TransferConfig:
    trigger_weights: tuple = (0.8, 0.2)
    n_seeds: int = 20
    n_per_class: int = 200
    dim: int = 16
    noise_sigma: float = 0.05
    surrogate_n_per_class: int = 200
    surrogate_span: str = "both"       # both | class1_only
    epochs: int = 60
    lr: float = 0.5
    extract_weight_decay: float = 0.01
    seed: int = 0


@dataclass
class TransferRun:
    seed: int
    transferred: bool
    source_predicts_trigger: bool
    alignment: tuple


@dataclass
class TransferReport:
    config: TransferConfig
    runs: list

    @property
    def transfer_rate(self) -> float:
        return sum(r.transferred for r in self.runs) / len(self.runs)

    def write(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, delimiter="\t")
            w.writerow(["w0", "w1", "seed", "transferred", "source_predicts_trigger",
                        "cos_w0_v0", "cos_w1_v1"])
            w0, w1 = self.config.trigger_weights
            for r in self.runs:
                w.writerow([w0, w1, r.seed, int(r.transferred),
                            int(r.source_predicts_trigger),
                            f"{r.alignment[0]:.6f}", f"{r.alignment[1]:.6f}"])


def _linear_spec(dim: int) -> ModelSpec:
    return ModelSpec(architecture="linear", num_classes=2, feature_dim=dim,
                     input_shape=(dim,))


def run_transfer_single(cfg: TransferConfig, seed: int) -> TransferRun:
    rng = stream_rng(cfg.seed, "sim")
    rng = np.random.default_rng([seed, rng.integers(2**31)])
    basis = make_orthonormal_basis(2, cfg.dim, seed=int(rng.integers(2**31)))
    xs, ys = sample_clean_features(cfg.n_per_class, basis, rng,
                                   noise_sigma=cfg.noise_sigma)
    trig = make_multiview_sample(np.asarray(cfg.trigger_weights, dtype=np.float64),
                                 basis)
    # The trigger carries the same orthogonal-complement noise as clean
    # samples.  This matters for the negative control: with no class-0 view,
    # the source memorizes the trigger through this sample-specific noise
    # direction, which clean surrogate queries barely excite, so weight decay
    # during extraction erases it and the prediction does not transfer.
    g = cfg.noise_sigma * rng.standard_normal(cfg.dim)
    g -= (g @ basis.vectors.T) @ basis.vectors
    trig_feature = trig.feature + g
    clean = LabeledDataset(xs=xs.astype(np.float32), ys=ys,
                           ids=np.arange(len(xs), dtype=np.int64),
                           dataset_id=f"mv-clean-{seed}", num_classes=2)
    trig_ds = LabeledDataset(xs=trig_feature[None].astype(np.float32),
                             ys=np.array([0], dtype=np.int64),
                             ids=np.array([len(xs)], dtype=np.int64),
                             dataset_id=f"mv-clean-{seed}", num_classes=2)
    spec = _linear_spec(cfg.dim)
    train = TrainConfig(epochs=cfg.epochs, batch_size=64, lr_initial=cfg.lr,
                        lr_decay_every=max(1, cfg.epochs // 2),
                        momentum=0.9, weight_decay=0.0, seed=seed)
    source = train_watermarked(spec, clean, trig_ds,
                               WatermarkTrainConfig(base=train, alpha=0.0,
                                                    reg_mode="none"),
                               original_labels=np.array([1]))
    if cfg.surrogate_span == "class1_only":
        sw = rng.uniform(0.0, 0.1, size=(2 * cfg.surrogate_n_per_class, 2))
        sw[:, 1] = 1.0
        g = cfg.noise_sigma * rng.standard_normal((len(sw), cfg.dim))
        g -= (g @ basis.vectors.T) @ basis.vectors
        sx = (sw @ basis.vectors + g).astype(np.float32)
        sy = np.ones(len(sx), dtype=np.int64)
    else:
        sx64, sy = sample_clean_features(cfg.surrogate_n_per_class, basis, rng,
                                         noise_sigma=cfg.noise_sigma)
        sx = sx64.astype(np.float32)
    surrogate_data = LabeledDataset(xs=sx, ys=sy,
                                    ids=np.arange(len(sx), dtype=np.int64),
                                    dataset_id=f"mv-surr-{seed}", num_classes=2)
    atk = AttackConfig(kind="extract_soft", surrogate_spec=spec,
                       train=TrainConfig(epochs=cfg.epochs, batch_size=64,
                                         lr_initial=cfg.lr,
                                         lr_decay_every=max(1, cfg.epochs // 2),
                                         momentum=0.9,
                                         weight_decay=cfg.extract_weight_decay,
                                         seed=seed + 1))
    surrogate = extract_soft(source, surrogate_data, atk).checkpoint
    probe = trig_feature[None].astype(np.float32)
    return TransferRun(
        seed=seed,
        transferred=bool(surrogate.predict(probe)[0] == 0),
        source_predicts_trigger=bool(source.predict(probe)[0] == 0),
        alignment=tuple(alignment_cosines(source, basis)),
    )


def run_transfer_experiment(cfg: TransferConfig) -> TransferReport:
    runs = [run_transfer_single(cfg, seed) for seed in range(cfg.n_seeds)]
    return TransferReport(config=cfg, runs=runs)


def transfer_rate_grid(base_cfg: TransferConfig,
                       w0_grid=(0.0, 0.2, 0.5, 0.8, 1.0)) -> dict:
    """Transfer rate for each class-0 trigger weight, w1 = 1 - w0."""
    rates = {}
    for w0 in w0_grid:
        cfg = TransferConfig(**{**base_cfg.__dict__,
                                "trigger_weights": (w0, 1.0 - w0)})
        rates[w0] = run_transfer_experiment(cfg).transfer_rate
    return rates
