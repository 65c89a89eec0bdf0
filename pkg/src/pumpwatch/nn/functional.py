"""Network primitives built on the autodiff tensor.

conv1d, maxpool1d and softmax carry hand-written backward rules; the rest
compose smaller ops so their gradients come for free.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NotADistribution, ShapeMismatch
from .tensor import (
    Tensor,
    as_tensor,
    clip,
    log,
    make_node,
    matmul,
    mean,
    sqrt,
    tsum,
)

LOG_CLAMP = 1e-12


def conv1d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation.

    x: (C_in, L) or (B, C_in, L); weight: (C_out, C_in, k); bias: (C_out,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or weight.ndim != 3:
        raise ShapeMismatch(f"conv1d expects (B, C, L) input and 3-D weight, got {x.shape}, {weight.shape}")
    B, C_in, L = xd.shape
    C_out, wc, k = weight.shape
    if wc != C_in:
        raise ShapeMismatch(f"input has {C_in} channels, weight expects {wc}")
    if L < k:
        raise ShapeMismatch(f"input length {L} shorter than kernel {k}")
    L_out = (L - k) // stride + 1

    # cols: (B, L_out, C_in, k)
    cols = sliding_window_view(xd, k, axis=2)[:, :, ::stride, :].transpose(0, 2, 1, 3)
    cols2 = cols.reshape(B, L_out, C_in * k)
    w2 = weight.data.reshape(C_out, C_in * k)
    out = cols2 @ w2.T  # (B, L_out, C_out)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.transpose(0, 2, 1)
    if squeeze:
        out = out[0]

    def backward(g):
        gb = g[None] if squeeze else g
        gt = gb.transpose(0, 2, 1)  # (B, L_out, C_out)
        gw = np.einsum("blo,blc->oc", gt, cols2).reshape(weight.shape)
        gcols = (gt @ w2).reshape(B, L_out, C_in, k)
        gx = np.zeros_like(xd)
        for j in range(k):
            gx[:, :, j : j + stride * (L_out - 1) + 1 : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        if squeeze:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gt.sum(axis=(0, 1)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def maxpool1d(x, k: int, stride: int = 1) -> Tensor:
    """Windowed max over the last axis; ties send the gradient to the first max."""
    x = as_tensor(x)
    L = x.shape[-1]
    if L < k:
        raise ShapeMismatch(f"input length {L} shorter than pool kernel {k}")
    L_out = (L - k) // stride + 1
    span = stride * (L_out - 1) + 1
    out = x.data[..., 0:span:stride].copy()
    arg = np.zeros(out.shape, dtype=np.intp)
    for j in range(1, k):
        cand = x.data[..., j : j + span : stride]
        better = cand > out  # strict: earlier index wins ties
        out[better] = cand[better]
        arg[better] = j
    src = arg + np.arange(L_out) * stride

    def backward(g):
        gx = np.zeros(x.shape)  # C-contiguous, so the reshape below is a view
        flat_g = g.reshape(-1, g.shape[-1])
        flat_src = src.reshape(-1, src.shape[-1])
        flat_gx = gx.reshape(-1, L)
        rows = np.repeat(np.arange(flat_g.shape[0]), flat_g.shape[1])
        np.add.at(flat_gx, (rows, flat_src.ravel()), flat_g.ravel())
        return (gx,)

    return make_node(out, (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight + bias with weight stored as (d_in, d_out)."""
    out = matmul(x, weight)
    return out if bias is None else out + bias


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * gamma + beta


def _lstm_packed(x, W, U, b, h0, c0):
    """Fused LSTM node. Output packs (B, T+1, H): hidden states then final cell."""
    # time-major buffers keep every per-step slice contiguous for BLAS
    xd = np.ascontiguousarray(x.data.transpose(1, 0, 2))  # (T, B, d)
    T, B, _ = xd.shape
    H = U.shape[0]
    Wd, Ud = W.data, U.data
    xw = xd @ Wd
    xw += b.data
    hs = np.empty((T + 1, B, H))
    hs[0] = h0.data
    cs = np.empty((T + 1, B, H))
    cs[0] = c0.data
    gates = np.empty((T, B, 4 * H))
    tanh_c = np.empty((T, B, H))
    for t in range(T):
        z = xw[t] + hs[t] @ Ud
        a = gates[t]
        a[:, : 2 * H] = _sig(z[:, : 2 * H])
        np.tanh(z[:, 2 * H : 3 * H], out=a[:, 2 * H : 3 * H])
        a[:, 3 * H :] = _sig(z[:, 3 * H :])
        i, f, g, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        cs[t + 1] = f * cs[t] + i * g
        np.tanh(cs[t + 1], out=tanh_c[t])
        hs[t + 1] = o * tanh_c[t]
    out = np.concatenate([hs[1:], cs[T:]], axis=0).transpose(1, 0, 2)

    def backward(gout):
        gout = gout.transpose(1, 0, 2)  # (T+1, B, H)
        dh_next = np.zeros((B, H))
        dc_next = gout[T].copy()
        dz = np.empty((T, B, 4 * H))
        for t in range(T - 1, -1, -1):
            a = gates[t]
            i, f, g, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
            th = tanh_c[t]
            dh = gout[t] + dh_next
            dc = dc_next + dh * o * (1.0 - th * th)
            d = dz[t]
            d[:, :H] = dc * g * i * (1.0 - i)
            d[:, H : 2 * H] = dc * cs[t] * f * (1.0 - f)
            d[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
            d[:, 3 * H :] = dh * th * o * (1.0 - o)
            dc_next = dc * f
            dh_next = d @ Ud.T
        dz2 = dz.reshape(T * B, 4 * H)
        gx = (dz2 @ Wd.T).reshape(T, B, -1).transpose(1, 0, 2)
        gW = xd.reshape(T * B, -1).T @ dz2
        gU = hs[:T].reshape(T * B, H).T @ dz2
        gb = dz2.sum(axis=0)
        return gx, gW, gU, gb, dh_next, dc_next

    return make_node(out, (x, W, U, b, h0, c0), backward)


def _sig(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm(inputs, W, U, b, h0=None, c0=None):
    """Single-layer LSTM with one bias per gate, gate order (input, forget, cell, output).

    inputs: (T, d_in) or (B, T, d_in); W: (d_in, 4h); U: (h, 4h); b: (4h,).
    Returns (hidden states (..., T, h), final h, final c).
    """
    inputs = as_tensor(inputs)
    W, U, b = as_tensor(W), as_tensor(U), as_tensor(b)
    squeeze = inputs.ndim == 2
    if squeeze:
        inputs = inputs.reshape(1, *inputs.shape)
    if inputs.ndim != 3:
        raise ShapeMismatch(f"LSTM input must be (T, d) or (B, T, d), got {inputs.shape}")
    B, T, d_in = inputs.shape
    if W.ndim != 2 or W.shape[0] != d_in or W.shape[1] % 4:
        raise ShapeMismatch(f"W must be ({d_in}, 4h), got {W.shape}")
    H = W.shape[1] // 4
    if U.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeMismatch(f"U must be ({H}, {4 * H}) and b ({4 * H},), got {U.shape}, {b.shape}")

    def _state(s):
        if s is None:
            return Tensor(np.zeros((B, H)))
        s = as_tensor(s)
        if s.shape == (H,):
            s = s.reshape(1, H) + Tensor(np.zeros((B, H)))
        if s.shape != (B, H):
            raise ShapeMismatch(f"initial state must be ({H},) or ({B}, {H}), got {s.shape}")
        return s

    packed = _lstm_packed(inputs, W, U, b, _state(h0), _state(c0))
    seq = packed[:, :T]
    h_last = packed[:, T - 1]
    c_last = packed[:, T]
    if squeeze:
        return seq[0], h_last[0], c_last[0]
    return seq, h_last, c_last


def _check_distribution(p: np.ndarray, what: str, tol: float = 1e-6):
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol) or np.any(p < 0):
        raise NotADistribution(f"{what} rows must be nonnegative and sum to 1 (±{tol})")


def kl_divergence(p, q, axis: int = -1, validate: bool = False) -> Tensor:
    """KL(p || q) along ``axis``; 0·ln(0/q) = 0, both arguments clamped at 1e-12 inside logs."""
    p, q = as_tensor(p), as_tensor(q)
    if validate:
        _check_distribution(p.data, "p")
        _check_distribution(q.data, "q")
    terms = p * (log(clip(p, LOG_CLAMP, None)) - log(clip(q, LOG_CLAMP, None)))
    return tsum(terms, axis=axis)


def symmetric_kl(a, b, axis: int = -1, validate: bool = False) -> Tensor:
    return kl_divergence(a, b, axis, validate) + kl_divergence(b, a, axis, validate)


def mse(pred, target) -> Tensor:
    diff = as_tensor(pred) - as_tensor(target)
    return mean(diff * diff)


def binary_cross_entropy(probs, labels, eps: float = 1e-7) -> Tensor:
    p = clip(probs, eps, 1.0 - eps)
    y = as_tensor(labels)
    return -mean(y * log(p) + (1.0 - y) * log(1.0 - p))
