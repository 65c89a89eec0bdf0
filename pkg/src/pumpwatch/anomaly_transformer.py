"""Supervised Anomaly Transformer.

Each encoder layer computes a series association (softmax self-attention)
and a prior association (row-normalised Gaussian kernel with a learned,
per-position width). Training alternates two updates per batch:

* min phase: ``MSE + lambda * mean|AD(P, stop(S))|`` pulls the prior toward
  the frozen series association while MSE pushes the series paths toward
  the labels;
* max phase: ``MSE - lambda * mean|AD(stop(P), S)|`` enlarges the
  discrepancy from the series side.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import LabelOutOfRange, NonFiniteLoss, NonPositiveSigma, ShapeMismatch
from .nn import functional as F
from .nn.module import Module, uniform_init
from .nn.tensor import (
    Tensor,
    as_tensor,
    clip,
    exp,
    matmul,
    mean,
    no_grad,
    relu,
    sigmoid,
    softplus,
    stop_gradient,
    swapaxes,
    tabs,
    tsum,
)

SIGMA_MIN = 1e-3


@dataclass(frozen=True)
class AnomTransConfig:
    seq_len: int = 15
    input_width: int = 15
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    lam: float = 1e-4
    head_out: int = 1
    mse_mode: str = "last"  # or "all"
    learning_rate: float = 1e-4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")
        if self.mse_mode not in ("last", "all"):
            raise ValueError(f"mse_mode must be 'last' or 'all', got {self.mse_mode!r}")

    def as_dict(self) -> dict:
        return asdict(self)


def series_association(q, k) -> Tensor:
    """Row-wise softmax of q k^T / sqrt(d), d being the width of q and k."""
    q, k = as_tensor(q), as_tensor(k)
    if q.shape[-1] != k.shape[-1] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeMismatch(f"Q {q.shape} and K {k.shape} disagree")
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    return F.softmax(scores, axis=-1)


def _offsets_sq(n: int) -> np.ndarray:
    idx = np.arange(n, dtype=np.float64)
    return (idx[None, :] - idx[:, None]) ** 2


def prior_association(sigma, n: int | None = None) -> Tensor:
    """Gaussian kernel rows centred on each position, normalised to sum to 1.

    ``sigma`` holds one positive width per position (last axis); row i is
    exp(-(j - i)^2 / (2 sigma_i^2)) over j, rescaled. The Gaussian's
    normalising constant cancels in the rescale.
    """
    sigma = as_tensor(sigma)
    n = sigma.shape[-1] if n is None else n
    if sigma.shape[-1] != n:
        raise ShapeMismatch(f"need {n} widths, got {sigma.shape[-1]}")
    if np.any(sigma.data <= 0):
        raise NonPositiveSigma("sigma must be > 0")
    s = sigma.reshape(*sigma.shape, 1)
    kernel = exp(-Tensor(_offsets_sq(n)) / (2.0 * s * s))
    return kernel / tsum(kernel, axis=-1, keepdims=True)


def association_discrepancy(P, S) -> Tensor:
    """Mean over layers of row-wise symmetric KL between prior and series.

    P, S: sequences of per-layer tensors of shape (..., N, N). Returns (..., N).
    """
    if len(P) != len(S) or not P:
        raise ShapeMismatch(f"layer counts differ: {len(P)} vs {len(S)}")
    total = None
    for p, s in zip(P, S):
        p, s = as_tensor(p), as_tensor(s)
        if p.shape != s.shape or p.shape[-1] != p.shape[-2]:
            raise ShapeMismatch(f"P {p.shape} and S {s.shape} must be matching square rows")
        term = F.symmetric_kl(p, s, axis=-1)
        total = term if total is None else total + term
    return total * (1.0 / len(P))


def _ad_norm(P, S) -> Tensor:
    ad = association_discrepancy(P, S)  # (B, H, N)
    return mean(tabs(mean(ad, axis=-2)))  # heads averaged, then mean |.| over batch and positions


def _mse_term(probs, labels, mode: str) -> Tensor:
    y = np.asarray(labels, dtype=np.float64)
    if np.any((y != 0) & (y != 1)):
        raise LabelOutOfRange("labels must be 0 or 1")
    probs = as_tensor(probs)
    if mode == "all" or probs.ndim == 1:
        return F.mse(probs, y)
    return F.mse(probs[:, -1], y if y.ndim == 1 else y[:, -1])


def min_phase_loss(probs, labels, P, S, lam: float, mode: str = "last") -> Tensor:
    """MSE + lam * mean|AD(P, stop(S))|."""
    S_stop = [stop_gradient(s) for s in S]
    return _mse_term(probs, labels, mode) + lam * _ad_norm(P, S_stop)


def max_phase_loss(probs, labels, P, S, lam: float, mode: str = "last") -> Tensor:
    """MSE - lam * mean|AD(stop(P), S)|."""
    P_stop = [stop_gradient(p) for p in P]
    return _mse_term(probs, labels, mode) - lam * _ad_norm(P_stop, S)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return pe


class AnomalyTransformer(Module):
    name = "anomaly_transformer"

    def __init__(self, config: AnomTransConfig | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        self.config = cfg = config or AnomTransConfig()
        rng = rng or np.random.default_rng(0)
        d, ff = cfg.d_model, cfg.d_ff

        def dense(name, d_in, d_out, bias=True):
            w = self.add_param(f"{name}.weight", uniform_init(rng, (d_in, d_out), d_in))
            if not bias:
                return (w,)
            b = self.add_param(f"{name}.bias", uniform_init(rng, (d_out,), d_in))
            return w, b

        self.embed = dense("embed", cfg.input_width, d)
        self.layers = []
        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            layer = {
                "q": dense(f"{p}.query", d, d),
                # a key bias adds q.b to every score in a row; softmax cancels it, so it would never train
                "k": dense(f"{p}.key", d, d, bias=False),
                "v": dense(f"{p}.value", d, d),
                "sigma": dense(f"{p}.sigma", d, cfg.n_heads),
                "out": dense(f"{p}.out", d, d),
                "ff1": dense(f"{p}.ff1", d, ff),
                "ff2": dense(f"{p}.ff2", ff, d),
                "norm1": (self.add_param(f"{p}.norm1.gamma", np.ones(d)), self.add_param(f"{p}.norm1.beta", np.zeros(d))),
                "norm2": (self.add_param(f"{p}.norm2.gamma", np.ones(d)), self.add_param(f"{p}.norm2.beta", np.zeros(d))),
            }
            self.layers.append(layer)
        self.final_norm = (self.add_param("norm.gamma", np.ones(d)), self.add_param("norm.beta", np.zeros(d)))
        self.head = dense("head", d, cfg.head_out)
        self._pos = sinusoidal_positions(cfg.seq_len, d)

    def _split_heads(self, t: Tensor) -> Tensor:
        B, N, d = t.shape
        H = self.config.n_heads
        return t.reshape(B, N, H, d // H).transpose(0, 2, 1, 3)  # (B, H, N, dk)

    def sigma(self, x: Tensor, layer: dict) -> Tensor:
        raw = F.linear(x, *layer["sigma"]).transpose(0, 2, 1)  # (B, H, N)
        return clip(softplus(raw), SIGMA_MIN, float(self.config.seq_len))

    def forward_all(self, x):
        """Per-position probabilities (B, N) plus per-layer prior and series associations.

        P and S are lists with one (B, H, N, N) tensor per layer.
        """
        x = as_tensor(x)
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.seq_len or x.shape[2] != cfg.input_width:
            raise ShapeMismatch(f"expected (B, {cfg.seq_len}, {cfg.input_width}) input, got {x.shape}")
        B, N, _ = x.shape
        h = F.linear(x, *self.embed) + self._pos
        P, S = [], []
        for layer in self.layers:
            q = self._split_heads(F.linear(h, *layer["q"]))
            k = self._split_heads(F.linear(h, *layer["k"]))
            v = self._split_heads(F.linear(h, *layer["v"]))
            series = series_association(q, k)
            prior = prior_association(self.sigma(h, layer), N)
            mixed = matmul(series, v).transpose(0, 2, 1, 3).reshape(B, N, cfg.d_model)
            h = F.layer_norm(h + F.linear(mixed, *layer["out"]), *layer["norm1"])
            y = F.linear(relu(F.linear(h, *layer["ff1"])), *layer["ff2"])
            h = F.layer_norm(h + y, *layer["norm2"])
            P.append(prior)
            S.append(series)
        h = F.layer_norm(h, *self.final_norm)
        probs = sigmoid(F.linear(h, *self.head)).reshape(B, N)
        return probs, P, S

    def forward(self, x):
        """(probs for the last position (B,), P per layer, S per layer)."""
        probs, P, S = self.forward_all(x)
        return probs[:, -1], P, S

    def __call__(self, x):
        return self.forward(x)

    def _probs_for_loss(self, x):
        probs, P, S = self.forward_all(x)
        return (probs if self.config.mse_mode == "all" else probs[:, -1]), P, S

    def min_loss(self, x, labels) -> Tensor:
        probs, P, S = self._probs_for_loss(x)
        return min_phase_loss(probs, labels, P, S, self.config.lam, self.config.mse_mode)

    def max_loss(self, x, labels) -> Tensor:
        probs, P, S = self._probs_for_loss(x)
        return max_phase_loss(probs, labels, P, S, self.config.lam, self.config.mse_mode)

    def train_step(self, x: np.ndarray, y: np.ndarray, optimizer, batch_index: int = 0):
        """Two sequential updates: min phase, then max phase on the updated weights.

        ``y`` is (B,) last-chunk labels, or (B, N) window labels when mse_mode is "all".
        """
        losses = []
        for phase in (self.min_loss, self.max_loss):
            optimizer.zero_grad()
            loss = phase(x, y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLoss(batch_index, value)
            loss.backward()
            optimizer.step()
            losses.append(value)
        return tuple(losses)

    def predict(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        out = []
        with no_grad():
            for start in range(0, len(x), batch_size):
                probs, _, _ = self.forward_all(x[start : start + batch_size])
                out.append(probs.data[:, -1])
        return np.concatenate(out) if out else np.zeros(0)
