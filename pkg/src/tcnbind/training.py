"""Multi-label training loop: sigmoid cross-entropy, Adam without weight
decay, linear warmup followed by cosine annealing, patience-based early
stopping, and bit-exact checkpoint persistence."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DataError, EncodedDataset
from .metrics import average_precision
from .model import ModelConfig, TcnModel

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TCNB"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training aborts rather than skipping batches."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(
            f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 50
    lr_max: float = 0.00258
    warmup_frac: float = 0.2
    patience: int = 5
    seed: int = 0
    monitor: str = "micro_ap"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie strictly between 0 and 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class AdamState:
    """First/second moment estimates mirroring the parameter registry."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params: dict[str, Tensor]):
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0


def bce_multilabel_loss(logits: Tensor, targets) -> Tensor:
    """Mean over all (sample, label) slots of the stable sigmoid cross-entropy
    max(z, 0) - z*y + log(1 + exp(-|z|))."""
    y = np.asarray(targets, dtype=np.float32)
    if y.shape != logits.shape:
        raise ValueError(f"targets {y.shape} do not match logits {logits.shape}")
    if not np.logical_or(y == 0, y == 1).all():
        raise ValueError("targets must be binary")
    z = logits.data
    elems = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    value = elems.mean(dtype=np.float64)

    def backward_fn(g: np.ndarray):
        scale = np.float32(float(g) / z.size)
        return ((ad._sigmoid_stable(z) - y) * scale,)

    out = ad.make_op(np.float32(value), "bce_with_logits", (logits,), backward_fn)
    out.exact = float(value)
    return out


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update with zero weight decay, reading each
    parameter's accumulated gradient. Fixed registry order keeps it
    deterministic."""
    state.t += 1
    bias1 = 1.0 - AdamState.beta1 ** state.t
    bias2 = 1.0 - AdamState.beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m, v = state.m[name], state.v[name]
        m += (1.0 - AdamState.beta1) * (g - m)
        v += (1.0 - AdamState.beta2) * (g * g - v)
        p.data -= (lr / bias1) * m / (np.sqrt(v / bias2) + AdamState.eps)


def lr_schedule(epoch: int, total_epochs: int, lr_max: float,
                warmup_frac: float) -> float:
    """Linear warmup over the first ceil(warmup_frac * total) epochs, then
    cosine annealing down toward zero."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    warmup = math.ceil(warmup_frac * total_epochs)
    if epoch < warmup:
        return lr_max * (epoch + 1) / warmup
    progress = (epoch - warmup) / (total_epochs - warmup)
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * progress))


def predict_scores(model: TcnModel, inputs: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    """Sigmoid scores [N, k] from a frozen model (dropout off, no graph)."""
    outputs = []
    with ad.no_grad():
        for start in range(0, len(inputs), batch_size):
            logits = model.forward(Tensor(inputs[start:start + batch_size]),
                                   training=False)
            outputs.append(ad._sigmoid_stable(logits.data))
    return np.concatenate(outputs) if outputs else np.zeros((0, model.config.num_labels))


def monitored_value(model: TcnModel, ds: EncodedDataset, monitor: str) -> float:
    if monitor != "micro_ap":
        raise ValueError(f"unknown monitor {monitor!r}")
    scores = predict_scores(model, ds.onehot())
    return average_precision(scores.reshape(-1), ds.labels.reshape(-1))


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    label_names: list[str]
    params: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)


def train(model: TcnModel, train_ds: EncodedDataset, val_ds: EncodedDataset,
          cfg: TrainConfig,
          monitor_fn: Optional[Callable[[TcnModel, EncodedDataset], float]] = None,
          ) -> tuple[ModelCheckpoint, list[dict]]:
    """Run the epoch loop and return the best-epoch snapshot plus history.

    Each epoch shuffles by the run seed, steps Adam at the scheduled rate,
    then scores the monitored validation metric; training stops once the
    metric has not improved for ``cfg.patience`` epochs.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise DataError("training and validation sets must be non-empty")
    if train_ds.label_names != val_ds.label_names:
        raise DataError("train/validation label registries differ")
    if len(train_ds.label_names) != model.config.num_labels:
        raise DataError(
            f"model expects {model.config.num_labels} labels, dataset has "
            f"{len(train_ds.label_names)}")

    rng = np.random.default_rng(cfg.seed)
    inputs = train_ds.onehot()
    targets = train_ds.labels.astype(np.float32)
    n = len(train_ds)
    state = AdamState(model.params)

    history: list[dict] = []
    best_value = -math.inf
    best_params: Optional[dict[str, np.ndarray]] = None
    best_epoch = -1
    stale = 0

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.epochs, cfg.lr_max, cfg.warmup_frac)
        order = rng.permutation(n)
        running = 0.0
        for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            logits = model.forward(Tensor(inputs[idx]), training=True, rng=rng)
            loss = bce_multilabel_loss(logits, targets[idx])
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise TrainingDiverged(epoch, batch_index, loss_value)
            loss.backward()
            adam_step(model.params, state, lr)
            running += loss_value * len(idx)
        epoch_loss = running / n

        if monitor_fn is not None:
            value = float(monitor_fn(model, val_ds))
        else:
            value = monitored_value(model, val_ds, cfg.monitor)
        history.append({"epoch": epoch, "loss": epoch_loss, "lr": lr,
                        cfg.monitor: value})
        logger.info("epoch %d: loss %.5f lr %.6f %s %.5f",
                    epoch, epoch_loss, lr, cfg.monitor, value)

        if value > best_value:
            best_value = value
            best_params = model.parameter_arrays()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("early stop at epoch %d (no improvement for %d epochs)",
                            epoch, stale)
                break

    assert best_params is not None
    model.load_arrays(best_params)
    metadata = {"epoch": str(best_epoch),
                "best_value": repr(best_value),
                "monitor": cfg.monitor}
    return (ModelCheckpoint(model.config, list(train_ds.label_names),
                            best_params, metadata), history)


def ensure_labels_match(ckpt: ModelCheckpoint, ds: EncodedDataset) -> None:
    if ckpt.label_names != ds.label_names:
        raise DataError(
            f"checkpoint labels {ckpt.label_names} do not match dataset "
            f"labels {ds.label_names}")


def build_model(ckpt: ModelCheckpoint) -> TcnModel:
    params = {name: Tensor(arr.copy(), requires_grad=True)
              for name, arr in ckpt.params.items()}
    try:
        return TcnModel(ckpt.config, params)
    except KeyError as exc:
        raise DataError(f"checkpoint is missing parameter {exc}") from None


# ---------------------------------------------------------------------------
# checkpoint file format (little-endian binary)
#
#   magic "TCNB" | u32 version | u32 config length | config text
#   | u32 tensor count | per tensor: u16 name length, name, u8 ndim,
#     u32 dims[], f32 payload row-major
#
# The config text is one key=value pair per line and includes the label
# names comma-separated. Any bytes after the last tensor are an error.

def save_checkpoint(ckpt: ModelCheckpoint, path,
                    extra: Optional[dict[str, str]] = None) -> None:
    lines = []
    for f in fields(ModelConfig):
        value = getattr(ckpt.config, f.name)
        lines.append(f"{f.name}={'' if value is None else value}")
    lines.append("label_names=" + ",".join(ckpt.label_names))
    for key, value in {**ckpt.metadata, **(extra or {})}.items():
        lines.append(f"{key}={value}")
    block = ("\n".join(lines) + "\n").encode("utf-8")

    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(block))
    buf += block
    buf += struct.pack("<I", len(ckpt.params))
    for name, arr in ckpt.params.items():
        encoded = name.encode("utf-8")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    offset = 0

    def take(count: int, what: str) -> memoryview:
        nonlocal offset
        if offset + count > len(raw):
            raise DataError(f"truncated checkpoint while reading {what}")
        chunk = view[offset:offset + count]
        offset += count
        return chunk

    if bytes(take(4, "magic")) != CHECKPOINT_MAGIC:
        raise DataError("bad checkpoint magic")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    config_len = struct.unpack("<I", take(4, "config length"))[0]
    block = bytes(take(config_len, "config block")).decode("utf-8")

    pairs: dict[str, str] = {}
    for line in block.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"malformed config line {line!r}")
        key, value = line.split("=", 1)
        pairs[key] = value

    config_fields = {f.name: f for f in fields(ModelConfig)}
    kwargs = {}
    for name in config_fields:
        if name not in pairs:
            raise DataError(f"checkpoint config missing {name!r}")
        text = pairs.pop(name)
        if name == "dropout":
            kwargs[name] = float(text)
        elif name == "cnn_kernel_size":
            kwargs[name] = None if text == "" else int(text)
        elif name == "classifier_input":
            kwargs[name] = text
        else:
            kwargs[name] = int(text)
    if "label_names" not in pairs:
        raise DataError("checkpoint config missing label names")
    label_names = [s for s in pairs.pop("label_names").split(",") if s]
    config = ModelConfig(**kwargs)
    if len(label_names) != config.num_labels:
        raise DataError("label names do not match num_labels")

    count = struct.unpack("<I", take(4, "tensor count"))[0]
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2, "name length"))[0]
        name = bytes(take(name_len, "name")).decode("utf-8")
        ndim = struct.unpack("<B", take(1, "ndim"))[0]
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        size = int(np.prod(dims)) if ndim else 1
        payload = take(4 * size, f"tensor {name!r}")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if offset != len(raw):
        raise DataError(f"{len(raw) - offset} trailing bytes after checkpoint")
    return ModelCheckpoint(config, label_names, params, pairs)
