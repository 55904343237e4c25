from types import SimpleNamespace

import numpy as np
import pytest

from tcnbind import autodiff as ad
from tcnbind.autodiff import Tensor
from tcnbind.model import ModelConfig, TcnModel


def naive_causal_conv(x, w, b, dilation):
    """Direct-summation convolution oracle: y[t,o] = b[o] + sum W[o,c,i] x[t-d*i,c]
    with zeros off the left edge. float64 throughout."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    length, _ = x.shape
    out_ch, _, k = w.shape
    y = np.zeros((length, out_ch))
    for t in range(length):
        for o in range(out_ch):
            acc = b[o]
            for i in range(k):
                src = t - dilation * i
                if src >= 0:
                    acc += float(np.dot(w[o, :, i], x[src]))
            y[t, o] = acc
    return y


def tiny_config(**overrides):
    base = dict(input_length=32, num_labels=3, cnn_layers=1, cnn_kernels=8,
                tcn_blocks=2, tcn_channels=8, kernel_size=3, mlp_hidden=16,
                dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return TcnModel.initialize(tiny_config(), np.random.default_rng(7))


def measured_receptive_field(config: ModelConfig, trials: int = 3) -> int:
    """Perturbation oracle: count input positions whose change moves the logits."""
    length = config.input_length
    affected = np.zeros(length, dtype=bool)
    for trial in range(trials):
        model = TcnModel.initialize(config, np.random.default_rng(1000 + trial))
        rng = np.random.default_rng(2000 + trial)
        base = rng.uniform(0, 1, (length, 4)).astype(np.float32)
        batch = np.repeat(base[None], length + 1, axis=0)
        for pos in range(length):
            batch[pos + 1, pos] = rng.uniform(1.5, 2.5, 4)
        with ad.no_grad():
            logits = model.forward(Tensor(batch)).data
        affected |= np.any(logits[1:] != logits[0], axis=1)
    return int(affected.sum())


class LinearProbe:
    """F(x) = sum(w * x): gradient is w everywhere, so integrated gradients
    have the closed form (x - baseline) * w."""

    def __init__(self, weights: np.ndarray, num_labels: int = 1):
        self.w = Tensor(np.asarray(weights, dtype=np.float32))
        self.config = SimpleNamespace(num_labels=num_labels)

    def forward(self, x: Tensor, training: bool = False, rng=None):
        total = ad.reduce_sum(ad.mul(x, self.w), axes=(1, 2))
        return ad.reshape(total, (x.shape[0], 1))
