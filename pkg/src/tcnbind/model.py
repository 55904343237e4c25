"""Causal convolutional sequence classifier.

One-hot DNA goes through a small stack of causal convolutions, then
residual blocks of dilated causal convolutions (dilation doubling per
block), and the feature vector at the last time position feeds a one
hidden layer perceptron that emits one raw logit per label.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    input_length: int
    num_labels: int
    alphabet_size: int = 4
    cnn_layers: int = 2
    cnn_kernels: int = 32
    tcn_blocks: int = 6
    tcn_channels: int = 32
    kernel_size: int = 32
    cnn_kernel_size: Optional[int] = None  # None: reuse kernel_size
    mlp_hidden: int = 100
    dropout: float = 0.5
    classifier_input: str = "last"  # "last": final-position tap; "mean": temporal average

    def __post_init__(self):
        for name in ("input_length", "num_labels", "alphabet_size",
                     "cnn_kernels", "tcn_channels", "kernel_size", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.cnn_layers < 0 or self.tcn_blocks < 0:
            raise ValueError("layer counts must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.cnn_kernel_size is not None and self.cnn_kernel_size < 1:
            raise ValueError("cnn_kernel_size must be positive")
        if self.classifier_input not in ("last", "mean"):
            raise ValueError(
                f"classifier_input must be 'last' or 'mean', got "
                f"{self.classifier_input!r}")

    @property
    def effective_cnn_kernel_size(self) -> int:
        return self.kernel_size if self.cnn_kernel_size is None else self.cnn_kernel_size

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Conv1dParams:
    weights: Tensor  # [out_channels, in_channels, kernel_size]
    bias: Tensor     # [out_channels]
    dilation: int = 1

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]


@dataclass
class TcnBlockParams:
    conv1: Conv1dParams
    conv2: Conv1dParams
    projection: Optional[Conv1dParams]  # 1x1 conv, present iff channels change
    dropout_ratio: float = 0.0


def receptive_field(config: ModelConfig) -> int:
    """Input positions visible from one output position.

    Each causal convolution of width k and dilation d extends the history
    by (k-1)*d; blocks contribute two convolutions at dilation 2^b.
    """
    cnn_span = config.cnn_layers * (config.effective_cnn_kernel_size - 1)
    tcn_span = 2 * (config.kernel_size - 1) * (2 ** config.tcn_blocks - 1)
    return 1 + cnn_span + tcn_span


# Above this many im2col elements the materialized buffer thrashes memory,
# so wide kernels fall back to a per-tap batched-GEMM accumulation.
_IM2COL_ELEMENT_LIMIT = 4_000_000


def conv1d_causal(x: Tensor, p: Conv1dParams) -> Tensor:
    """y[t, o] = bias[o] + sum_{c,i} W[o,c,i] * x[t - d*i, c], zeros off the left edge.

    Accepts [L, C_in] or [B, L, C_in]; output length always equals input length.
    """
    out_ch, in_ch, k = p.weights.shape
    d = p.dilation
    batched = x.ndim == 3
    if x.ndim not in (2, 3) or x.shape[-1] != in_ch:
        raise ValueError(
            f"conv expects [..., L, {in_ch}] input, got shape {x.shape}")

    xd = x.data if batched else x.data[None]
    nb, length, _ = xd.shape
    pad = (k - 1) * d
    xpad = np.pad(xd, ((0, 0), (pad, 0), (0, 0)))

    if nb * length * k * in_ch <= _IM2COL_ELEMENT_LIMIT:
        y, backward_fn = _conv_im2col(xpad, p, nb, length)
    else:
        y, backward_fn = _conv_taploop(xpad, p, nb, length)
    if not batched:
        inner = backward_fn
        backward_fn = lambda g: _squeeze_first(inner(g[None]))

    return ad.make_op(y if batched else y[0], "conv1d_causal",
                      (x, p.weights, p.bias), backward_fn)


def _squeeze_first(grads):
    dx, dw, db = grads
    return dx[0], dw, db


def _conv_im2col(xpad, p, nb, length):
    """Materialize sliding windows once and run a single GEMM each way."""
    out_ch, in_ch, k = p.weights.shape
    d = p.dilation
    pad = (k - 1) * d
    sb, st, sc = xpad.strides
    cols = np.lib.stride_tricks.as_strided(
        xpad, (nb, length, k, in_ch), (sb, st, d * st, sc))
    cols2 = np.ascontiguousarray(cols).reshape(nb * length, k * in_ch)
    # wr[(j, c), o] = W[o, c, k-1-j] realigns taps so cols2 @ wr is causal
    wr = p.weights.data[:, :, ::-1].transpose(2, 1, 0).reshape(k * in_ch, out_ch)
    y = (cols2 @ wr + p.bias.data).reshape(nb, length, out_ch)

    def backward_fn(gd: np.ndarray):
        g2 = np.ascontiguousarray(gd).reshape(nb * length, out_ch)
        dwr = cols2.T @ g2
        dw = np.ascontiguousarray(
            dwr.reshape(k, in_ch, out_ch).transpose(2, 1, 0)[:, :, ::-1])
        db = g2.sum(axis=0, dtype=np.float64).astype(np.float32)
        dcols = (g2 @ wr.T).reshape(nb, length, k, in_ch)
        dxpad = np.zeros_like(xpad)
        for j in range(k):
            dxpad[:, j * d:j * d + length, :] += dcols[:, :, j, :]
        return dxpad[:, pad:, :], dw, db

    return y, backward_fn


def _conv_taploop(xpad, p, nb, length):
    """One batched GEMM per kernel tap; never builds the im2col buffer."""
    out_ch, in_ch, k = p.weights.shape
    d = p.dilation
    pad = (k - 1) * d
    # tap j multiplies xpad[:, j*d : j*d+L, :] by W[:, :, k-1-j]^T
    taps = [np.ascontiguousarray(p.weights.data[:, :, k - 1 - j].T)
            for j in range(k)]
    y = np.empty((nb, length, out_ch), dtype=np.float32)
    y[:] = p.bias.data
    for j in range(k):
        y += np.matmul(xpad[:, j * d:j * d + length, :], taps[j])

    def backward_fn(gd: np.ndarray):
        gd = np.ascontiguousarray(gd)
        gdt = gd.transpose(0, 2, 1)
        dw = np.empty_like(p.weights.data)
        dxpad = np.zeros_like(xpad)
        for j in range(k):
            xslice = xpad[:, j * d:j * d + length, :]
            dw[:, :, k - 1 - j] = np.matmul(gdt, xslice).sum(axis=0)
            dxpad[:, j * d:j * d + length, :] += np.matmul(gd, taps[j].T)
        db = gd.sum(axis=(0, 1), dtype=np.float64).astype(np.float32)
        return dxpad[:, pad:, :], dw, db

    return y, backward_fn


def dropout(x: Tensor, ratio: float, training: bool,
            rng: Optional[np.random.Generator]) -> Tensor:
    if not training or ratio == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    draws = rng.random(x.shape, dtype=np.float32)
    keep = (draws >= ratio).astype(np.float32) / np.float32(1.0 - ratio)
    return ad.mul(x, Tensor(keep))


def tcn_block(x: Tensor, p: TcnBlockParams, training: bool = False,
              rng: Optional[np.random.Generator] = None) -> Tensor:
    h = ad.relu(conv1d_causal(x, p.conv1))
    h = dropout(h, p.dropout_ratio, training, rng)
    h = ad.relu(conv1d_causal(h, p.conv2))
    h = dropout(h, p.dropout_ratio, training, rng)
    skip = x if p.projection is None else conv1d_causal(x, p.projection)
    return ad.relu(ad.add(h, skip))


def _glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Named parameter registry: uniform(-a, a) weights with a = sqrt(6/(fan_in+fan_out)), zero biases."""
    params: dict[str, Tensor] = {}

    def conv_entry(name: str, out_ch: int, in_ch: int, k: int):
        w = _glorot_uniform(rng, (out_ch, in_ch, k), in_ch * k, out_ch * k)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(out_ch, dtype=np.float32),
                                        requires_grad=True)

    def linear_entry(name: str, in_dim: int, out_dim: int):
        w = _glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(out_dim, dtype=np.float32),
                                        requires_grad=True)

    channels = config.alphabet_size
    kc = config.effective_cnn_kernel_size
    for i in range(config.cnn_layers):
        conv_entry(f"cnn.{i}", config.cnn_kernels, channels, kc)
        channels = config.cnn_kernels
    for b in range(config.tcn_blocks):
        conv_entry(f"tcn.{b}.conv1", config.tcn_channels, channels, config.kernel_size)
        conv_entry(f"tcn.{b}.conv2", config.tcn_channels, config.tcn_channels,
                   config.kernel_size)
        if channels != config.tcn_channels:
            conv_entry(f"tcn.{b}.projection", config.tcn_channels, channels, 1)
        channels = config.tcn_channels
    linear_entry("mlp.hidden", channels, config.mlp_hidden)
    linear_entry("mlp.out", config.mlp_hidden, config.num_labels)
    return params


class TcnModel:
    """Architecture configuration plus its named parameter tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._cnn: list[Conv1dParams] = []
        self._blocks: list[TcnBlockParams] = []
        self._wire()

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "TcnModel":
        model = cls(config, init_parameters(config, rng))
        rf = receptive_field(config)
        if rf < config.input_length and config.classifier_input == "last":
            logger.warning(
                "receptive field %d shorter than input length %d; "
                "distant positions cannot reach the classifier", rf, config.input_length)
        return model

    def _wire(self):
        cfg = self.config
        for i in range(cfg.cnn_layers):
            self._cnn.append(Conv1dParams(self.params[f"cnn.{i}.weight"],
                                          self.params[f"cnn.{i}.bias"], dilation=1))
        for b in range(cfg.tcn_blocks):
            proj = None
            if f"tcn.{b}.projection.weight" in self.params:
                proj = Conv1dParams(self.params[f"tcn.{b}.projection.weight"],
                                    self.params[f"tcn.{b}.projection.bias"], dilation=1)
            self._blocks.append(TcnBlockParams(
                conv1=Conv1dParams(self.params[f"tcn.{b}.conv1.weight"],
                                   self.params[f"tcn.{b}.conv1.bias"], dilation=2 ** b),
                conv2=Conv1dParams(self.params[f"tcn.{b}.conv2.weight"],
                                   self.params[f"tcn.{b}.conv2.bias"], dilation=2 ** b),
                projection=proj,
                dropout_ratio=cfg.dropout))

    def forward(self, x: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                capture: Optional[dict] = None) -> Tensor:
        """Map one-hot input [L, 4] to logits [k], or [B, L, 4] to [B, k].

        ``capture``, when given, receives copies of every intermediate
        activation keyed by layer name (used by the causality checks).
        """
        cfg = self.config
        squeeze = x.ndim == 2
        if x.shape[-2] != cfg.input_length or x.shape[-1] != cfg.alphabet_size:
            raise ValueError(
                f"expected input [{cfg.input_length}, {cfg.alphabet_size}], "
                f"got {x.shape}")
        h = ad.reshape(x, (1,) + x.shape) if squeeze else x

        for i, conv in enumerate(self._cnn):
            h = dropout(ad.relu(conv1d_causal(h, conv)), cfg.dropout, training, rng)
            if capture is not None:
                capture[f"cnn.{i}"] = h.data.copy()
        for b, block in enumerate(self._blocks):
            h = tcn_block(h, block, training, rng)
            if capture is not None:
                capture[f"tcn.{b}"] = h.data.copy()

        if cfg.classifier_input == "mean":
            feats = ad.reduce_mean(h, axes=(1,))  # [B, C] averaged over time
        else:
            feats = ad.getitem(h, (slice(None), h.shape[1] - 1))  # [B, C] final position
        if capture is not None:
            capture["features"] = feats.data.copy()
        hidden = ad.relu(ad.add(ad.matmul(feats, self.params["mlp.hidden.weight"]),
                                self.params["mlp.hidden.bias"]))
        hidden = dropout(hidden, cfg.dropout, training, rng)
        logits = ad.add(ad.matmul(hidden, self.params["mlp.out.weight"]),
                        self.params["mlp.out.bias"])
        return ad.reshape(logits, (cfg.num_labels,)) if squeeze else logits

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ValueError(f"parameter names do not match: {sorted(missing)}")
        for name, value in arrays.items():
            current = self.params[name]
            if value.shape != current.shape:
                raise ValueError(f"{name}: shape {value.shape} != {current.shape}")
            current.data = np.asarray(value, dtype=np.float32).copy()
