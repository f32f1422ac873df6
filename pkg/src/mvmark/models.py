"""Trainable classifier backend: three small architectures (linear, MLP,
conv net), deterministic SGD training, penultimate-feature access, class-mean
feature banks, and a self-describing binary checkpoint format.

All training runs in float32; gradient-check utilities build float64 copies.
Determinism contract: fixed (spec, data, config) reproduces bitwise-identical
checkpoints on the same platform/torch build.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .data import LabeledDataset
from .errors import ConfigError, DataError, InputError, PersistenceError
from .seeding import stream_rng, stream_seed

ARCHITECTURES = ("linear", "mlp", "convnet")

CHECKPOINT_MAGIC = b"MVMK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor; parameter count is a pure function of this."""

    architecture: str
    num_classes: int
    feature_dim: int
    input_shape: tuple
    widths: tuple = ()

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        flat = int(np.prod(self.input_shape))
        if self.architecture == "linear":
            if self.feature_dim != flat:
                raise ConfigError("linear model: feature_dim must equal the flat input size")
        elif self.architecture == "mlp":
            if len(self.widths) != 1:
                raise ConfigError("mlp: widths must hold exactly the first hidden width")
        elif self.architecture == "convnet":
            if len(self.input_shape) != 3:
                raise ConfigError("convnet input must be (channels, height, width)")
            if len(self.widths) != 4:
                raise ConfigError("convnet: widths must hold 4 block channel counts")
            if self.widths[-1] != self.feature_dim:
                raise ConfigError("convnet: last block width must equal feature_dim")

    def to_dict(self) -> dict:
        return {"architecture": self.architecture, "num_classes": self.num_classes,
                "feature_dim": self.feature_dim, "input_shape": list(self.input_shape),
                "widths": list(self.widths)}

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(architecture=d["architecture"], num_classes=d["num_classes"],
                         feature_dim=d["feature_dim"], input_shape=tuple(d["input_shape"]),
                         widths=tuple(d.get("widths", ())))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr_initial: float = 0.1
    lr_decay_every: int = 50
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_initial < 0:
            raise ConfigError("lr_initial must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be >= 1")


class _LinearNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.final = nn.Linear(spec.feature_dim, spec.num_classes)

    def features(self, x):
        return torch.flatten(x, 1)

    def forward(self, x):
        return self.final(self.features(x))


class _MLPNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        flat = int(np.prod(spec.input_shape))
        self.body = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, spec.widths[0]), nn.ReLU(),
            nn.Linear(spec.widths[0], spec.feature_dim), nn.ReLU(),
        )
        self.final = nn.Linear(spec.feature_dim, spec.num_classes)

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.final(self.features(x))


class _ConvNet(nn.Module):
    """Four conv blocks, pooling after blocks 2 and 4, global average pool."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        c_in = spec.input_shape[0]
        c1, c2, c3, c4 = spec.widths
        # Leaky activations: with global average pooling and no normalization
        # layers, hard ReLU channels can die early and stall training.
        act = lambda: nn.LeakyReLU(0.1)
        self.block1 = nn.Sequential(nn.Conv2d(c_in, c1, 3, padding=1), act())
        self.block2 = nn.Sequential(nn.Conv2d(c1, c2, 3, padding=1), act(),
                                    nn.MaxPool2d(2))
        self.block3 = nn.Sequential(nn.Conv2d(c2, c3, 3, padding=1), act())
        self.last_conv = nn.Conv2d(c3, c4, 3, padding=1)
        self.final = nn.Linear(c4, spec.num_classes)

    def last_conv_maps(self, x):
        """Post-activation maps of the last conv layer (B, c4, H, W)."""
        h = self.block3(self.block2(self.block1(x)))
        return torch.nn.functional.leaky_relu(self.last_conv(h), 0.1)

    def features(self, x):
        return self.last_conv_maps(x).mean(dim=(2, 3))

    def forward(self, x):
        return self.final(self.features(x))


_ARCH_CLASSES = {"linear": _LinearNet, "mlp": _MLPNet, "convnet": _ConvNet}


def build_module(spec: ModelSpec, init_seed: int = 0, dtype=torch.float32) -> nn.Module:
    """Freshly initialized module; identical (spec, init_seed) gives identical weights."""
    with torch.random.fork_rng():
        torch.manual_seed(init_seed & 0x7FFFFFFFFFFFFFFF)
        module = _ARCH_CLASSES[spec.architecture](spec)
    return module.to(dtype)


def num_parameters(spec: ModelSpec) -> int:
    return sum(p.numel() for p in build_module(spec).parameters())


def flat_parameters(module: nn.Module) -> np.ndarray:
    return torch.nn.utils.parameters_to_vector(module.parameters()).detach().cpu().numpy()


def set_flat_parameters(module: nn.Module, vec: np.ndarray):
    # clone: vector_to_parameters rebinds the module parameters as views of
    # this tensor, which must not alias the caller's array
    t = torch.as_tensor(vec, dtype=next(module.parameters()).dtype).clone()
    torch.nn.utils.vector_to_parameters(t, module.parameters())


@dataclass
class ModelCheckpoint:
    """Immutable parameter snapshot; the unit of persistence."""

    spec: ModelSpec
    parameters: np.ndarray        # float32 flat vector
    epoch: int = 0
    rng_state: bytes = b""
    _module: nn.Module | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.parameters = np.asarray(self.parameters, dtype=np.float32).ravel()
        expected = num_parameters(self.spec)
        if len(self.parameters) != expected:
            raise InputError(
                f"parameter count {len(self.parameters)} does not match spec ({expected})")

    def module(self, dtype=torch.float32) -> nn.Module:
        """Module with this checkpoint's parameters loaded; float32 copy cached."""
        if dtype == torch.float32 and self._module is not None:
            return self._module
        m = build_module(self.spec, init_seed=0, dtype=dtype)
        set_flat_parameters(m, self.parameters.astype(np.float64 if dtype == torch.float64
                                                      else np.float32))
        m.eval()
        if dtype == torch.float32:
            self._module = m
        return m

    def _check_batch(self, batch: np.ndarray) -> torch.Tensor:
        batch = np.asarray(batch, dtype=np.float32)
        if tuple(batch.shape[1:]) != self.spec.input_shape:
            raise InputError(
                f"batch shape {tuple(batch.shape[1:])} does not match "
                f"spec input_shape {self.spec.input_shape}")
        return torch.from_numpy(batch)

    def forward_logits(self, batch: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.module()(self._check_batch(batch)).numpy()

    def forward_features(self, batch: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.module().features(self._check_batch(batch)).numpy()

    def final_layer(self) -> tuple[np.ndarray, np.ndarray]:
        """(W, b) of the classification head."""
        final = self.module().final
        return final.weight.detach().numpy(), final.bias.detach().numpy()

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward_logits(batch), axis=1)

    def accuracy(self, data: LabeledDataset, batch_size: int = 512) -> float:
        hits = 0
        for lo in range(0, len(data), batch_size):
            hits += int((self.predict(data.xs[lo:lo + batch_size]) ==
                         data.ys[lo:lo + batch_size]).sum())
        return hits / len(data)

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(self.parameters.tobytes())
        return h.hexdigest()


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis, in float64."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InputError("softmax requires finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class FeatureBank:
    """Per-class mean penultimate features from one pass over a dataset.

    Classes absent from the data get count 0 and must be skipped by consumers.
    """

    means: np.ndarray            # float64, (K, p)
    counts: np.ndarray           # int64, (K,)
    epoch_of_origin: int = 0

    def available(self) -> np.ndarray:
        return self.counts > 0


def build_feature_bank(model: ModelCheckpoint, data: LabeledDataset,
                       batch_size: int = 512) -> FeatureBank:
    K, p = model.spec.num_classes, model.spec.feature_dim
    sums = np.zeros((K, p), dtype=np.float64)
    counts = np.zeros(K, dtype=np.int64)
    for lo in range(0, len(data), batch_size):
        feats = model.forward_features(data.xs[lo:lo + batch_size]).astype(np.float64)
        ys = data.ys[lo:lo + batch_size]
        np.add.at(sums, ys, feats)
        counts += np.bincount(ys, minlength=K)
    means = np.zeros_like(sums)
    nz = counts > 0
    means[nz] = sums[nz] / counts[nz, None]
    return FeatureBank(means=means, counts=counts, epoch_of_origin=model.epoch)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Step decay: multiply by lr_decay_factor every lr_decay_every epochs."""
    return config.lr_initial * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def train_supervised(spec: ModelSpec, data: LabeledDataset, config: TrainConfig,
                     log=None) -> ModelCheckpoint:
    """Mini-batch cross-entropy SGD with momentum and step lr decay."""
    if len(data) == 0:
        raise DataError("training data is empty")
    if data.ys.min() < 0 or data.ys.max() >= spec.num_classes:
        raise DataError("label out of range for spec.num_classes")
    module = build_module(spec, init_seed=stream_seed(config.seed, "init"))
    shuffle_rng = stream_rng(config.seed, "shuffle")
    xs = torch.from_numpy(data.xs)
    ys = torch.from_numpy(data.ys)
    opt = torch.optim.SGD(module.parameters(), lr=config.lr_initial,
                          momentum=config.momentum, weight_decay=config.weight_decay)
    ce = nn.CrossEntropyLoss()
    module.train()
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        total, seen = 0.0, 0
        for idx in _epoch_batches(len(data), config.batch_size, shuffle_rng):
            bi = torch.from_numpy(idx)
            opt.zero_grad()
            loss = ce(module(xs[bi]), ys[bi])
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        if log is not None:
            log({"epoch": epoch, "lr": lr, "train_loss": total / seen})
    module.eval()
    rng_state = int(shuffle_rng.bit_generator.state["state"]["state"]).to_bytes(16, "little")
    return ModelCheckpoint(spec=spec, parameters=flat_parameters(module),
                           epoch=config.epochs, rng_state=rng_state)


def mean_cross_entropy(model: ModelCheckpoint, data: LabeledDataset) -> float:
    """Full-dataset mean cross-entropy, evaluated in float64."""
    probs = softmax(model.forward_logits(data.xs))
    return float(-np.mean(np.log(probs[np.arange(len(data)), data.ys])))


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------
# Layout (little-endian):
#   4 bytes   magic "MVMK"
#   uint32    format version (currently 1)
#   uint32    header length H
#   H bytes   UTF-8 JSON: {"spec": {...}, "epoch": int, "param_count": int,
#                          "rng_state": hex string}
#   N*4 bytes parameters, float32 little-endian
#   32 bytes  SHA-256 of everything above

def save_checkpoint(model: ModelCheckpoint, path):
    header = json.dumps({
        "spec": model.spec.to_dict(),
        "epoch": model.epoch,
        "param_count": int(len(model.parameters)),
        "rng_state": model.rng_state.hex(),
    }).encode("utf-8")
    body = (CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header))
            + header + model.parameters.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 44 or blob[:4] != CHECKPOINT_MAGIC:
        raise PersistenceError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise PersistenceError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise PersistenceError(f"{path}: checksum mismatch (truncated or corrupt)")
    try:
        header = json.loads(body[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PersistenceError(f"{path}: bad header: {e}") from e
    params = np.frombuffer(body[12 + hlen:], dtype="<f4").copy()
    if len(params) != header["param_count"]:
        raise PersistenceError(
            f"{path}: expected {header['param_count']} parameters, found {len(params)}")
    return ModelCheckpoint(spec=ModelSpec.from_dict(header["spec"]), parameters=params,
                           epoch=header["epoch"],
                           rng_state=bytes.fromhex(header.get("rng_state", "")))
