"""Post-training quantization: float16 storage, dynamic-range int8, full uint8.

All three transforms take a trained f32 :class:`~usgrip.model.ModelGraph` and
return a new graph; none retrains weights. Granularity is per tensor.

* ``f16``: every parameter stored as IEEE binary16 and decoded to f32 at
  load, so inference is exactly the f32 network with rounded weights.
* ``dynamic_i8``: conv/dense weights symmetric int8; each call quantizes the
  incoming activation with ``max|a| / 127``, multiplies in int32 and scales
  the accumulator back to f32. Norm, pooling and softmax stay in f32.
* ``uint8_affine``: batchnorm folded into the preceding conv, weights and
  activations affine uint8 (``real = scale * (q - zero_point)``), int32
  accumulators with fixed-point requantization between layers. Activation
  ranges come from a calibration pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import tensor as T
from .model import (BN_EPSILON, SAME, Layer, ModelGraph, QuantParams, forward_batch,
                    prepare_input, run_float, validate)
from .rng import SplitMix64, derive_key

F16_MAX = 65504.0
_CALIBRATION = 3   # derive_key stream tag


class QuantizationError(ValueError):
    pass


def _require_f32(model):
    if model.quant != "f32":
        raise QuantizationError(f"model is already quantized ({model.quant}); "
                                "quantization is single-shot from an f32 model")


def _derived(model, layers, quant, input_act=None):
    m = ModelGraph(layers, model.input_shape, model.num_classes, model.epochs, quant, input_act)
    validate(m)
    return m


# ---------------------------------------------------------------- float16


def to_f16(x):
    """binary16 round-to-nearest-even, saturating at +-65504."""
    return np.clip(np.asarray(x, np.float32), -F16_MAX, F16_MAX).astype(np.float16)


def quantize_f16(model):
    _require_f32(model)
    layers = [Layer(l.kind, l.dims, [to_f16(p) for p in l.params]) for l in model.layers]
    return _derived(model, layers, "f16")


# ---------------------------------------------------------------- dynamic range int8


def symmetric_params(w):
    amax = float(np.max(np.abs(w))) if np.size(w) else 0.0
    return QuantParams(amax / 127 if amax > 0 else 1.0, 0, "dynamic_i8")


def quantize_dynamic(model):
    _require_f32(model)
    layers = []
    for l in model.layers:
        if l.kind in ("conv", "dense"):
            w, b = l.params
            qp = symmetric_params(w)
            q = qp.quantize(w, -127, 127).astype(np.int8)
            layers.append(Layer(l.kind, l.dims, [q, b.copy()], [qp, None]))
        else:
            layers.append(Layer(l.kind, l.dims, [p.copy() for p in l.params]))
    return _derived(model, layers, "dynamic_i8")


def _dynamic_activation(x):
    """Per-sample symmetric int8 quantization of a float batch: (int32 q, f32 scale[N])."""
    n = x.shape[0]
    amax = np.abs(x.reshape(n, -1)).max(axis=1)
    scale = np.where(amax > 0, amax / np.float32(127), np.float32(1)).astype(np.float32)
    shape = (n,) + (1,) * (x.ndim - 1)
    q = np.clip(T.round_half_away(x / scale.reshape(shape)), -127, 127).astype(np.int32)
    return q, scale.reshape(shape)


def _run_dynamic(model, x):
    for layer in model.layers:
        k = layer.kind
        if k in ("conv", "dense"):
            wq, b = layer.params
            if wq.dtype != np.int8 or layer.qparams[0] is None:
                raise QuantizationError(f"dynamic_i8 {k} layer holds {wq.dtype} weights")
            xq, s_a = _dynamic_activation(x)
            w32 = np.ascontiguousarray(wq, np.int32)
            zero = np.zeros(w32.shape[-1], np.int32)
            if k == "conv":
                acc = _int_conv(xq, w32, zero, layer.dims, 0)
            else:
                acc = np.empty((xq.shape[0], w32.shape[1]), np.int32)
                _kernels.dense_forward(xq, w32, zero, acc)
            x = acc.astype(np.float32) * (np.float32(layer.qparams[0].scale) * s_a) + b
        elif k == "softmax":
            break
        else:
            x = run_float([layer], [layer.params], x)
    return x


# ---------------------------------------------------------------- calibration


@dataclass
class CalibrationProfile:
    """Observed output range of every layer of an f32 model."""
    mins: np.ndarray
    maxs: np.ndarray
    sample_count: int

    def merge(self, other):
        if len(self.mins) != len(other.mins):
            raise ValueError("profiles cover different layer counts")
        return CalibrationProfile(np.minimum(self.mins, other.mins),
                                  np.maximum(self.maxs, other.maxs),
                                  self.sample_count + other.sample_count)

    def equals(self, other):
        return (np.array_equal(self.mins, other.mins) and np.array_equal(self.maxs, other.maxs)
                and self.sample_count == other.sample_count)


def calibration_indices(dataset, n=100, seed=42):
    """First ``n`` train-split indices after a seeded SplitMix64 shuffle."""
    idx = [int(i) for i in dataset.indices("train")]
    SplitMix64(derive_key(seed, _CALIBRATION)).shuffle(idx)
    return np.array(idx[:n], np.int64)


def calibrate(model, frames, batch_size=64):
    """Run f32 inference over ``frames`` and record per-layer output min/max."""
    _require_f32(model)
    frames = np.asarray(frames)
    if frames.ndim == 3 and frames.shape[1:] != model.input_shape:
        frames = frames[..., None]
    if len(frames) == 0:
        raise QuantizationError("calibration needs at least one sample")
    L = len(model.layers)
    mins = np.full(L, np.inf, np.float32)
    maxs = np.full(L, -np.inf, np.float32)
    params = model.float_params()
    for s in range(0, len(frames), batch_size):
        x = prepare_input(model, frames[s:s + batch_size])
        for i, (layer, p) in enumerate(zip(model.layers, params)):
            x = T.softmax(x) if layer.kind == "softmax" else run_float([layer], [p], x)
            mins[i] = min(mins[i], x.min())
            maxs[i] = max(maxs[i], x.max())
    return CalibrationProfile(mins, maxs, len(frames))


# ---------------------------------------------------------------- uint8 affine


def affine_params(lo, hi):
    """uint8 params covering [lo, hi] widened to include 0; degenerate ranges get scale 1, zp 128."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = (hi - lo) / 255
    if np.float32(scale) == 0:
        return QuantParams(1.0, 128, "uint8_affine")
    # zero point from the exact scale; the stored scale is then rounded to f32
    zp = int(np.clip(T.round_half_away(-lo / scale), 0, 255))
    return QuantParams(scale, zp, "uint8_affine")


def quantize_multiplier(m):
    """Real multiplier -> (int32 mantissa in [2**30, 2**31), right shift) with m ~ q * 2**-shift."""
    if not m > 0:
        raise QuantizationError(f"requantization multiplier must be positive, got {m}")
    frac, exp = np.frexp(m)
    q = int(T.round_half_away(frac * (1 << 31)))
    if q == 1 << 31:
        q //= 2
        exp += 1
    return q, 31 - int(exp)


def requantize(acc, multiplier, zero_point):
    """zero_point + round_half_away(acc * multiplier), saturated to [0, 255], in integer arithmetic."""
    q, shift = quantize_multiplier(multiplier)
    prod = acc.astype(np.int64) * q
    if shift > 0:
        half = np.int64(1) << np.int64(shift - 1)
        mag = (np.abs(prod) + half) >> np.int64(shift)
        out = np.where(prod < 0, -mag, mag)
    else:
        out = prod << np.int64(-shift)
    return np.clip(out + zero_point, 0, 255).astype(np.uint8)


def _fold_batchnorm(conv, bn):
    gamma, beta, mean, var = (p.astype(np.float64) for p in bn.params)
    g = gamma / np.sqrt(var + np.float64(np.float32(BN_EPSILON)))
    w = conv.params[0].astype(np.float64) * g
    b = (conv.params[1].astype(np.float64) - mean) * g + beta
    return w, b


def quantize_uint8(model, profile):
    _require_f32(model)
    L = len(model.layers)
    if profile is None or len(profile.mins) != L:
        raise QuantizationError(f"calibration profile must cover all {L} layers")
    if not np.all(np.isfinite(profile.mins)) or not np.all(np.isfinite(profile.maxs)):
        raise QuantizationError("calibration profile has layers with no observations")
    input_act = QuantParams(1 / 255, 0, "uint8_affine")
    s_in = input_act.scale
    layers = []
    i = 0
    src = model.layers
    while i < L:
        l = src[i]
        if l.kind in ("conv", "dense"):
            if l.kind == "conv" and i + 1 < L and src[i + 1].kind == "batchnorm":
                w, b = _fold_batchnorm(l, src[i + 1])
                last = i + 1
            else:
                w, b = l.params[0].astype(np.float64), l.params[1].astype(np.float64)
                last = i
            # requantize straight into the range of a directly following relu
            if last + 1 < L and src[last + 1].kind == "relu":
                last += 1
            wq_params = affine_params(w.min(), w.max())
            wq = wq_params.quantize(w, 0, 255).astype(np.uint8)
            bias_params = QuantParams(wq_params.scale * s_in, 0, "uint8_affine")
            bq = T.round_half_away(b / (wq_params.scale * s_in))
            if np.any(np.abs(bq) > np.iinfo(np.int32).max):
                raise QuantizationError(f"layer {i}: bias overflows int32")
            act = affine_params(profile.mins[last], profile.maxs[last])
            layers.append(Layer(l.kind, l.dims, [wq, bq.astype(np.int32)],
                                [wq_params, bias_params], act))
            if src[last].kind == "relu":
                layers.append(Layer("relu"))
            s_in = act.scale
            i = last + 1
        elif l.kind == "batchnorm":
            raise QuantizationError(f"layer {i}: batchnorm without a preceding conv to fold into")
        else:
            layers.append(Layer(l.kind, l.dims))
            i += 1
    return _derived(model, layers, "uint8_affine", input_act)


def _int_conv(xq, w32, b32, dims, pad_value):
    kh, kw, _, cout, stride, pad = dims
    N, H, W, C = xq.shape
    if pad == SAME:
        pt, pb = T.same_padding(H, kh, stride)
        pl, pr = T.same_padding(W, kw, stride)
    else:
        pt = pb = pl = pr = 0
    xp = np.full((N, H + pt + pb, W + pl + pr, C), pad_value, np.int32)
    xp[:, pt:pt + H, pl:pl + W] = xq
    Ho = (xp.shape[1] - kh) // stride + 1
    Wo = (xp.shape[2] - kw) // stride + 1
    acc = np.empty((N, Ho, Wo, cout), np.int32)
    _kernels.conv_forward(xp, w32, b32, stride, acc)
    return acc


def _run_uint8(model, frames):
    x = np.asarray(frames)
    if x.shape == model.input_shape:
        x = x[None]
    if x.dtype != np.uint8 or x.shape[1:] != model.input_shape:
        raise T.ShapeError(f"expected uint8 frames of shape {model.input_shape}, got {x.dtype} {x.shape}")
    act = model.input_act
    if act is None:
        raise QuantizationError("uint8 model lacks input quantization params")
    for layer in model.layers:
        k = layer.kind
        if k in ("conv", "dense"):
            wq, bq = layer.params
            if wq.dtype != np.uint8 or bq.dtype != np.int32 or layer.act is None:
                raise QuantizationError(f"uint8_affine {k} layer holds {wq.dtype}/{bq.dtype} tensors")
            wp = layer.qparams[0]
            w32 = np.ascontiguousarray(wq.astype(np.int32) - wp.zero_point)
            xc = x.astype(np.int32) - act.zero_point
            if k == "conv":
                acc = _int_conv(xc, w32, bq, layer.dims, 0)
            else:
                acc = np.empty((xc.shape[0], w32.shape[1]), np.int32)
                _kernels.dense_forward(np.ascontiguousarray(xc), w32, bq, acc)
            x = requantize(acc, wp.scale * act.scale / layer.act.scale, layer.act.zero_point)
            act = layer.act
        elif k == "relu":
            x = np.maximum(x, np.uint8(act.zero_point))
        elif k == "maxpool":
            x = T.maxpool2d(x)
        elif k == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif k == "softmax":
            break
        else:
            raise QuantizationError(f"layer kind {k!r} has no uint8 kernel")
    return (np.float32(act.scale) * (x.astype(np.float32) - np.float32(act.zero_point)))


# ---------------------------------------------------------------- inference


def predict_batch(model, frames):
    """Probabilities [N, classes] for u8 frames [N, H, W, C] under any scheme."""
    frames = np.asarray(frames)
    if model.quant in ("f32", "f16"):
        return forward_batch(model, frames)
    if model.quant == "dynamic_i8":
        return T.softmax(_run_dynamic(model, prepare_input(model, frames)))
    if model.quant == "uint8_affine":
        return T.softmax(_run_uint8(model, frames))
    raise QuantizationError(f"unknown quant mode {model.quant!r}")


def quantized_forward(model, frame, timings=None):
    """Probabilities for one frame; appends the call's wall time (s) to ``timings`` if given."""
    frame = np.asarray(frame)
    if frame.shape != model.input_shape:
        raise T.ShapeError(f"expected frame shape {model.input_shape}, got {frame.shape}")
    t0 = time.perf_counter()
    probs = predict_batch(model, frame[None])[0]
    if timings is not None:
        timings.append(time.perf_counter() - t0)
    return probs


def quantize(model, scheme, calibration_frames=None):
    """Dispatch by scheme name: ``f16``, ``dynamic_i8`` / ``dynamic``, ``uint8_affine`` / ``uint8``."""
    if scheme == "f16":
        return quantize_f16(model)
    if scheme in ("dynamic", "dynamic_i8"):
        return quantize_dynamic(model)
    if scheme in ("uint8", "uint8_affine"):
        if calibration_frames is None:
            raise QuantizationError("uint8 quantization needs calibration frames")
        return quantize_uint8(model, calibrate(model, calibration_frames))
    raise QuantizationError(f"unknown scheme {scheme!r}")
