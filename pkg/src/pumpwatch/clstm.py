"""C-LSTM detector: conv/ReLU/pool encoder, one LSTM layer, affine head, sigmoid."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import LabelOutOfRange, NonFiniteLoss, SegmentTooShort
from .nn import functional as F
from .nn.module import Module, uniform_init
from .nn.tensor import Tensor, as_tensor, no_grad, relu, sigmoid, transpose


@dataclass(frozen=True)
class CLstmConfig:
    input_width: int = 15
    conv_out: int = 350
    conv_k: int = 3
    conv_stride: int = 1
    pool_k: int = 2
    pool_stride: int = 1
    lstm_hidden: int = 350
    head_out: int = 1
    learning_rate: float = 1e-3

    def min_segment_length(self) -> int:
        return self.conv_k + self.pool_k - 1

    def as_dict(self) -> dict:
        return asdict(self)


class CLSTM(Module):
    name = "clstm"

    def __init__(self, config: CLstmConfig | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        self.config = cfg = config or CLstmConfig()
        rng = rng or np.random.default_rng(0)
        fan_conv = cfg.input_width * cfg.conv_k
        H = cfg.lstm_hidden
        self.conv_w = self.add_param("conv.weight", uniform_init(rng, (cfg.conv_out, cfg.input_width, cfg.conv_k), fan_conv))
        self.conv_b = self.add_param("conv.bias", uniform_init(rng, (cfg.conv_out,), fan_conv))
        self.lstm_W = self.add_param("lstm.W", uniform_init(rng, (cfg.conv_out, 4 * H), H))
        self.lstm_U = self.add_param("lstm.U", uniform_init(rng, (H, 4 * H), H))
        bias = np.zeros(4 * H)
        bias[H : 2 * H] = 1.0  # forget gate starts open
        self.lstm_b = self.add_param("lstm.b", bias)
        self.head_w = self.add_param("head.weight", uniform_init(rng, (H, cfg.head_out), H))
        self.head_b = self.add_param("head.bias", uniform_init(rng, (cfg.head_out,), H))

    def sequence_lengths(self, s: int) -> tuple[int, int]:
        cfg = self.config
        after_conv = (s - cfg.conv_k) // cfg.conv_stride + 1
        after_pool = (after_conv - cfg.pool_k) // cfg.pool_stride + 1
        return after_conv, after_pool

    def forward(self, x) -> Tensor:
        """(B, s, features) segments -> (B,) pump probabilities for each last chunk."""
        x = as_tensor(x)
        cfg = self.config
        if x.ndim != 3 or x.shape[2] != cfg.input_width:
            raise SegmentTooShort(f"expected (B, s, {cfg.input_width}) input, got {x.shape}")
        if x.shape[1] < cfg.min_segment_length():
            raise SegmentTooShort(
                f"segment length {x.shape[1]} < {cfg.min_segment_length()} (conv_k + pool_k - 1)"
            )
        h = F.conv1d(transpose(x, (0, 2, 1)), self.conv_w, self.conv_b, stride=cfg.conv_stride)
        h = F.maxpool1d(relu(h), cfg.pool_k, cfg.pool_stride)
        _, last, _ = F.lstm(transpose(h, (0, 2, 1)), self.lstm_W, self.lstm_U, self.lstm_b)
        logits = F.linear(last, self.head_w, self.head_b)
        return sigmoid(logits).reshape(-1)

    __call__ = forward

    def loss(self, probs, labels) -> Tensor:
        return clstm_loss(probs, labels)

    def train_step(self, x: np.ndarray, y: np.ndarray, optimizer, batch_index: int = 0) -> float:
        optimizer.zero_grad()
        loss = self.loss(self.forward(x), y)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteLoss(batch_index, value)
        loss.backward()
        optimizer.step()
        return value

    def predict(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        out = []
        with no_grad():
            for start in range(0, len(x), batch_size):
                out.append(self.forward(x[start : start + batch_size]).data)
        return np.concatenate(out) if out else np.zeros(0)


def clstm_loss(probs, labels) -> Tensor:
    """Mean binary cross-entropy, probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if np.any((y != 0) & (y != 1)):
        raise LabelOutOfRange("labels must be 0 or 1")
    return F.binary_cross_entropy(probs, y)
