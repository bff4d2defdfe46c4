"""Dense tensor primitives: forward ops and their backward counterparts.

Tensors are plain numpy arrays in channels-last layout. Every op accepts a
single sample ``[H, W, C]`` / ``[N]`` or a batch with a leading axis.
Compute dtypes are float32 (training, inference) and float64 (gradient
checking); storage dtypes such as uint8, int8 and float16 must be decoded
before they reach these functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

COMPUTE_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class MissingCacheError(ValueError):
    pass


def round_half_away(x):
    """Round to nearest integer, ties away from zero (numpy's round is half-even)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _compute_dtype(*arrays):
    for a in arrays:
        dt = np.asarray(a).dtype
        if dt not in COMPUTE_DTYPES:
            raise TypeError(f"storage dtype {dt} must be decoded to float32/float64 first")
    return np.result_type(*arrays)


def _batched(x, rank):
    """Return (batched view, was_single)."""
    x = np.asarray(x)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def _check_cache(cache, kind):
    if cache is None or not isinstance(cache, kind):
        raise MissingCacheError(f"{kind.__name__} from the forward pass is required")


# ---------------------------------------------------------------- conv2d


def same_padding(size, k, stride):
    """(before, after) zero padding for 'same' convolution; odd extra goes after."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


@dataclass
class ConvCache:
    xp: np.ndarray
    kernels: np.ndarray
    stride: int
    pads: tuple
    input_shape: tuple
    single: bool


def conv2d_forward(x, kernels, bias, padding="same", stride=1):
    xb, single = _batched(x, 3)
    kernels = np.asarray(kernels)
    bias = np.asarray(bias)
    dt = _compute_dtype(xb, kernels, bias)
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be [kh, kw, Cin, Cout], got {kernels.shape}")
    kh, kw, cin, cout = kernels.shape
    if xb.shape[-1] != cin:
        raise ShapeError(f"input has {xb.shape[-1]} channels, kernels expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    N, H, W, _ = xb.shape
    if padding == "same":
        pt, pb = same_padding(H, kh, stride)
        pl, pr = same_padding(W, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    Hp, Wp = H + pt + pb, W + pl + pr
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    xp = np.zeros((N, Hp, Wp, cin), dtype=dt)
    xp[:, pt:pt + H, pl:pl + W, :] = xb
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    out = np.empty((N, Ho, Wo, cout), dtype=dt)
    w = np.ascontiguousarray(kernels, dtype=dt)
    _kernels.conv_forward(xp, w, bias.astype(dt, copy=False), stride, out)
    cache = ConvCache(xp, w, stride, (pt, pl), xb.shape, single)
    return (out[0] if single else out), cache


def conv2d(x, kernels, bias, padding="same", stride=1):
    return conv2d_forward(x, kernels, bias, padding, stride)[0]


def conv2d_grad(dout, cache, need_input_grad=True):
    """Returns (d_input, d_kernels, d_bias); d_input is None when not requested."""
    _check_cache(cache, ConvCache)
    g = np.ascontiguousarray(dout[None] if cache.single else dout, dtype=cache.xp.dtype)
    dw = np.zeros_like(cache.kernels)
    db = np.zeros(dw.shape[-1], dtype=dw.dtype)
    _kernels.conv_weight_grad(cache.xp, g, cache.stride, dw, db)
    dx = None
    if need_input_grad:
        dxp = np.zeros_like(cache.xp)
        wt = np.ascontiguousarray(cache.kernels.transpose(0, 1, 3, 2))
        _kernels.conv_input_grad(g, wt, cache.stride, dxp)
        _, H, W, _ = cache.input_shape
        pt, pl = cache.pads
        dx = dxp[:, pt:pt + H, pl:pl + W, :]
        if cache.single:
            dx = dx[0]
    return dx, dw, db


# ---------------------------------------------------------------- maxpool


@dataclass
class PoolCache:
    argmax: np.ndarray
    input_shape: tuple
    single: bool


def maxpool2d_forward(x, window=2, stride=2):
    if window != 2 or stride != 2:
        raise ValueError("only 2x2 windows with stride 2 are supported")
    xb, single = _batched(x, 3)
    N, H, W, C = xb.shape
    if H < 2 or W < 2:
        raise ShapeError(f"maxpool needs H, W >= 2, got {H}x{W}")
    out = np.empty((N, H // 2, W // 2, C), dtype=xb.dtype)
    arg = np.empty(out.shape, dtype=np.int8)
    _kernels.maxpool_forward(np.ascontiguousarray(xb), out, arg)
    cache = PoolCache(arg, xb.shape, single)
    return (out[0] if single else out), cache


def maxpool2d(x, window=2, stride=2):
    return maxpool2d_forward(x, window, stride)[0]


def maxpool2d_grad(dout, cache):
    _check_cache(cache, PoolCache)
    g = np.ascontiguousarray(dout[None] if cache.single else dout)
    dx = np.zeros(cache.input_shape, dtype=g.dtype)
    _kernels.maxpool_backward(g, cache.argmax, dx)
    return dx[0] if cache.single else dx


# ---------------------------------------------------------------- batchnorm


@dataclass
class NormCache:
    xhat: np.ndarray
    gamma: np.ndarray
    inv_std: np.ndarray
    mode: str


def _channel_stats(x):
    x2 = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    rows = x2.shape[0]
    s = np.zeros(x2.shape[1], dtype=np.float64)
    _kernels.channel_sums(x2, s)
    mean = s / rows
    sq = np.zeros_like(s)
    _kernels.channel_sq_dev(x2, mean, sq)
    return mean, sq / rows


def _channel_sum(x):
    x2 = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    s = np.zeros(x2.shape[1], dtype=np.float64)
    _kernels.channel_sums(x2, s)
    return s


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="infer",
                      epsilon=1e-3, momentum=0.9):
    """Per-channel normalisation over every axis but the last.

    Returns ``(out, new_running_mean, new_running_var, cache)``. In train mode
    the batch statistics normalise the input and the running statistics move
    towards them: ``running = momentum * running + (1 - momentum) * batch``.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    x = np.asarray(x)
    dt = _compute_dtype(x, gamma, beta)
    C = x.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if np.shape(p) != (C,):
            raise ShapeError(f"{name} must have shape ({C},), got {np.shape(p)}")
    if mode == "train":
        mean64, var64 = _channel_stats(x)
        mean, var = mean64.astype(dt), var64.astype(dt)
        m = dt.type(momentum)
        new_mean = (m * running_mean + (1 - m) * mean).astype(running_mean.dtype)
        new_var = (m * running_var + (1 - m) * var).astype(running_var.dtype)
    elif mode == "infer":
        mean, var = running_mean.astype(dt), running_var.astype(dt)
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1 / np.sqrt(var + dt.type(epsilon))).astype(dt)
    xhat = (x - mean) * inv_std
    out = gamma.astype(dt) * xhat + beta.astype(dt)
    return out, new_mean, new_var, NormCache(xhat, gamma.astype(dt), inv_std, mode)


def batchnorm(x, gamma, beta, running_mean, running_var, mode="infer", epsilon=1e-3,
              momentum=0.9):
    return batchnorm_forward(x, gamma, beta, running_mean, running_var, mode, epsilon,
                             momentum)[0]


def batchnorm_grad(dout, cache):
    """Returns (d_input, d_gamma, d_beta)."""
    _check_cache(cache, NormCache)
    dt = cache.xhat.dtype
    dbeta64 = _channel_sum(dout)
    dgamma64 = _channel_sum(dout * cache.xhat)
    dbeta, dgamma = dbeta64.astype(dt), dgamma64.astype(dt)
    if cache.mode == "infer":
        return dout * (cache.gamma * cache.inv_std), dgamma, dbeta
    rows = cache.xhat.size // cache.xhat.shape[-1]
    dx = (cache.gamma * cache.inv_std / dt.type(rows)) * (
        dt.type(rows) * dout - dbeta - cache.xhat * dgamma)
    return dx.astype(dt, copy=False), dgamma, dbeta


# ---------------------------------------------------------------- pointwise / dense


def relu(x):
    return np.maximum(x, 0).astype(np.asarray(x).dtype, copy=False)


def relu_grad(dout, x):
    return np.where(np.asarray(x) > 0, dout, 0).astype(np.asarray(dout).dtype, copy=False)


def flatten(x, batched=False):
    x = np.asarray(x)
    return x.reshape(x.shape[0], -1) if batched else x.reshape(-1)


@dataclass
class DenseCache:
    x: np.ndarray
    weights: np.ndarray
    single: bool


def dense_forward(x, weights, bias):
    xb, single = _batched(x, 1)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    dt = _compute_dtype(xb, weights, bias)
    if weights.ndim != 2 or weights.shape[0] != xb.shape[1]:
        raise ShapeError(f"weights {weights.shape} do not accept input of length {xb.shape[1]}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias must have shape ({weights.shape[1]},), got {bias.shape}")
    xb = np.ascontiguousarray(xb, dtype=dt)
    w = np.ascontiguousarray(weights, dtype=dt)
    out = np.empty((xb.shape[0], w.shape[1]), dtype=dt)
    _kernels.dense_forward(xb, w, bias.astype(dt, copy=False), out)
    return (out[0] if single else out), DenseCache(xb, w, single)


def dense(x, weights, bias):
    return dense_forward(x, weights, bias)[0]


def dense_grad(dout, cache):
    """Returns (d_input, d_weights, d_bias)."""
    _check_cache(cache, DenseCache)
    g = np.ascontiguousarray(dout[None] if cache.single else dout, dtype=cache.x.dtype)
    dx = np.zeros_like(cache.x)
    dw = np.zeros_like(cache.weights)
    db = np.zeros(dw.shape[1], dtype=dw.dtype)
    _kernels.dense_backward(cache.x, np.ascontiguousarray(cache.weights.T), g, dx, dw, db)
    return (dx[0] if cache.single else dx), dw, db


# ---------------------------------------------------------------- softmax / loss


def softmax(x):
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains NaN or infinity")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of the true classes."""
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(labels)
    p = probs[np.arange(len(labels)), labels].astype(np.float64)
    return float(-np.mean(np.log(np.maximum(p, 1e-12))))


def softmax_crossentropy_grad(probs, labels):
    """Gradient of mean cross-entropy w.r.t. the logits: (probs - onehot) / batch."""
    if probs is None:
        raise MissingCacheError("softmax probabilities from the forward pass are required")
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(labels)
    if len(labels) != probs.shape[0]:
        raise ShapeError("one label per row of probabilities is required")
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1
    return g / probs.dtype.type(len(labels))
