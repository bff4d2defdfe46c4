"""Gesture CNN: layer graph, float forward pass and the UQM1 model file.

The default network takes an 80x80x1 frame through five
conv3x3 -> batchnorm -> relu -> maxpool blocks (8, 16, 32, 64, 64 filters),
flattens the 2x2x64 map and finishes with dense(128) -> relu -> dense(4) ->
softmax.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import GESTURES

INPUT_SHAPE = (80, 80, 1)
NUM_CLASSES = len(GESTURES)
DEFAULT_FILTERS = (8, 16, 32, 64, 64)
DENSE_UNITS = 128
BN_EPSILON = 1e-3
BN_MOMENTUM = 0.9

QUANT_MODES = ("f32", "f16", "dynamic_i8", "uint8_affine")

LAYER_CODES = {"conv": 1, "batchnorm": 2, "relu": 3, "maxpool": 4,
               "flatten": 5, "dense": 6, "softmax": 7}
_INPUT_CODE = 0
_LAYER_NAMES = {v: k for k, v in LAYER_CODES.items()}
SAME, VALID = 0, 1

# parameter record dtypes; ACT records carry only scale/zero_point
DTYPE_CODES = {"f32": 0, "f16": 1, "i8": 2, "u8": 3, "i32": 4, "act": 5}
_NP_DTYPES = {0: np.float32, 1: np.float16, 2: np.int8, 3: np.uint8, 4: np.int32}
_NP_CODES = {np.dtype(v): k for k, v in _NP_DTYPES.items()}


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    scheme: str = "uint8_affine"

    def __post_init__(self):
        # the file stores scale as f32; keep the in-memory value identical
        object.__setattr__(self, "scale", float(np.float32(self.scale)))
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.scheme == "dynamic_i8" and self.zero_point != 0:
            raise ValueError("dynamic_i8 quantization is symmetric (zero_point 0)")
        if self.scheme == "uint8_affine" and not 0 <= self.zero_point <= 255:
            raise ValueError(f"uint8 zero_point {self.zero_point} outside [0, 255]")

    def quantize(self, x, qmin, qmax):
        q = T.round_half_away(np.asarray(x, np.float64) / self.scale) + self.zero_point
        return np.clip(q, qmin, qmax)

    def dequantize(self, q):
        return self.scale * (np.asarray(q, np.float64) - self.zero_point)


@dataclass
class Layer:
    kind: str
    dims: tuple = ()
    params: list = field(default_factory=list)
    qparams: list = field(default_factory=list)   # parallel to params, None when unused
    act: QuantParams | None = None                # output activation params (uint8)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.qparams) < len(self.params):
            self.qparams = list(self.qparams) + [None] * (len(self.params) - len(self.qparams))


@dataclass
class ModelGraph:
    layers: list
    input_shape: tuple = INPUT_SHAPE
    num_classes: int = NUM_CLASSES
    epochs: int = 0
    quant: str = "f32"
    input_act: QuantParams | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self._float = None

    def copy(self):
        m = copy.deepcopy(self)
        m._float = None
        return m

    def float_params(self):
        """Per-layer parameters decoded to float32 (f32 and f16 models only).

        f16 weights are decoded once and cached, so inference runs on exactly
        the f32 values the binary16 encoding represents.
        """
        if self.quant not in ("f32", "f16"):
            raise TypeError(f"{self.quant} models have no float parameter view")
        if self._float is None:
            self._float = [[np.asarray(p, np.float32) for p in layer.params]
                           for layer in self.layers]
        return self._float

    def param_count(self, learnable_only=False):
        n = 0
        for layer in self.layers:
            ps = layer.params[:2] if (learnable_only and layer.kind == "batchnorm") else layer.params
            n += sum(int(np.size(p)) for p in ps)
        return n

    def payload_bytes(self):
        return sum(int(np.asarray(p).nbytes) for layer in self.layers for p in layer.params)

    def equals(self, other):
        """Bit-exact comparison of structure, parameters and quant metadata."""
        if (self.input_shape, self.num_classes, self.epochs, self.quant, self.input_act) != (
                other.input_shape, other.num_classes, other.epochs, other.quant, other.input_act):
            return False
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if (a.kind, a.dims, a.qparams, a.act) != (b.kind, b.dims, b.qparams, b.act):
                return False
            if len(a.params) != len(b.params):
                return False
            for p, q in zip(a.params, b.params):
                p, q = np.asarray(p), np.asarray(q)
                if p.dtype != q.dtype or p.shape != q.shape or p.tobytes() != q.tobytes():
                    return False
        return True


def param_shapes(kind, dims):
    if kind == "conv":
        kh, kw, cin, cout = dims[:4]
        return [(kh, kw, cin, cout), (cout,)]
    if kind == "batchnorm":
        return [(dims[0],)] * 4
    if kind == "dense":
        return [(dims[0], dims[1]), (dims[1],)]
    return []


def output_shapes(model):
    """Shape after every layer; raises ShapeError when the chain is broken."""
    shape = model.input_shape
    shapes = []
    for i, layer in enumerate(model.layers):
        k, d = layer.kind, layer.dims
        if k == "conv":
            kh, kw, cin, cout, stride, pad = d
            if len(shape) != 3 or shape[2] != cin:
                raise T.ShapeError(f"layer {i}: conv expects {cin} channels, got {shape}")
            H, W = shape[:2]
            if pad == SAME:
                shape = (-(-H // stride), -(-W // stride), cout)
            else:
                shape = ((H - kh) // stride + 1, (W - kw) // stride + 1, cout)
        elif k == "batchnorm":
            if shape[-1] != d[0]:
                raise T.ShapeError(f"layer {i}: batchnorm over {d[0]} channels, got {shape}")
        elif k == "maxpool":
            if len(shape) != 3 or min(shape[:2]) < 2:
                raise T.ShapeError(f"layer {i}: maxpool needs a 2-D map, got {shape}")
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif k == "flatten":
            shape = (int(np.prod(shape)),)
        elif k == "dense":
            if shape != (d[0],):
                raise T.ShapeError(f"layer {i}: dense expects ({d[0]},), got {shape}")
            shape = (d[1],)
        elif k not in ("relu", "softmax"):
            raise T.ShapeError(f"layer {i}: unknown layer kind {k!r}")
        shapes.append(shape)
    return shapes


def validate(model):
    shapes = output_shapes(model)
    if model.quant not in QUANT_MODES:
        raise ValueError(f"unknown quant mode {model.quant!r}")
    if not shapes or shapes[-1] != (model.num_classes,):
        raise T.ShapeError(f"network ends in {shapes[-1] if shapes else None}, "
                           f"expected ({model.num_classes},)")
    kinds = [layer.kind for layer in model.layers]
    if "flatten" not in kinds or kinds.count("conv") != 5 or \
            kinds.index("flatten") < max(i for i, k in enumerate(kinds) if k == "conv"):
        raise T.ShapeError("expected exactly 5 conv blocks before flatten")
    for i, layer in enumerate(model.layers):
        want = param_shapes(layer.kind, layer.dims)
        got = [np.shape(p) for p in layer.params]
        if got[:len(want)] != want:
            raise T.ShapeError(f"layer {i} ({layer.kind}): parameter shapes {got}, expected {want}")
        if model.quant == "f32" and any(np.asarray(p).dtype != np.float32 for p in layer.params):
            raise TypeError(f"layer {i}: f32 model holds non-f32 parameters")
    return shapes


def build_default_model(seed=42, filters=DEFAULT_FILTERS, dense_units=DENSE_UNITS,
                        input_shape=INPUT_SHAPE, num_classes=NUM_CLASSES):
    """Fresh model with He-uniform weights from ``numpy.random.default_rng(seed)``."""
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, shape).astype(np.float32)

    layers = []
    cin = input_shape[2]
    for f in filters:
        layers += [
            Layer("conv", (3, 3, cin, f, 1, SAME), [he((3, 3, cin, f), 9 * cin),
                                                    np.zeros(f, np.float32)]),
            Layer("batchnorm", (f,), [np.ones(f, np.float32), np.zeros(f, np.float32),
                                      np.zeros(f, np.float32), np.ones(f, np.float32)]),
            Layer("relu"),
            Layer("maxpool", (2, 2)),
        ]
        cin = f
    side_h, side_w = input_shape[0] >> len(filters), input_shape[1] >> len(filters)
    flat = side_h * side_w * cin
    layers += [
        Layer("flatten"),
        Layer("dense", (flat, dense_units), [he((flat, dense_units), flat),
                                             np.zeros(dense_units, np.float32)]),
        Layer("relu"),
        Layer("dense", (dense_units, num_classes), [he((dense_units, num_classes), dense_units),
                                                    np.zeros(num_classes, np.float32)]),
        Layer("softmax"),
    ]
    model = ModelGraph(layers, input_shape, num_classes)
    validate(model)
    return model


# ---------------------------------------------------------------- float forward


def prepare_input(model, frames):
    """u8 frames -> float32 batch in [0, 1]; single frames must match the input shape."""
    x = np.asarray(frames)
    if x.dtype != np.uint8:
        raise TypeError(f"frames must be uint8, got {x.dtype}")
    if x.shape == model.input_shape:
        x = x[None]
    elif x.shape[1:] != model.input_shape:
        raise T.ShapeError(f"expected frame shape {model.input_shape}, got {x.shape}")
    return x.astype(np.float32) / np.float32(255)


def run_float(layers, params, x, mode="infer", caches=None, stats=None):
    """Float pass over a batch. Returns logits (pre-softmax).

    ``caches`` (a list) collects per-layer backward caches; ``stats`` (a list)
    collects updated batchnorm running statistics in train mode.
    """
    for layer, p in zip(layers, params):
        k = layer.kind
        cache = None
        if k == "conv":
            x, cache = T.conv2d_forward(x, p[0], p[1], "same" if layer.dims[5] == SAME else "valid",
                                        layer.dims[4])
        elif k == "batchnorm":
            x, mean, var, cache = T.batchnorm_forward(x, p[0], p[1], p[2], p[3], mode,
                                                      BN_EPSILON, BN_MOMENTUM)
            if stats is not None:
                stats.append((mean, var))
        elif k == "relu":
            cache = x
            x = T.relu(x)
        elif k == "maxpool":
            x, cache = T.maxpool2d_forward(x)
        elif k == "flatten":
            cache = x.shape
            x = T.flatten(x, batched=True)
        elif k == "dense":
            x, cache = T.dense_forward(x, p[0], p[1])
        elif k == "softmax":
            break
        if caches is not None:
            caches.append(cache)
    return x


def forward_batch(model, frames):
    """Probabilities for a batch of u8 frames (f32 and f16 models)."""
    x = prepare_input(model, frames)
    return T.softmax(run_float(model.layers, model.float_params(), x))


def forward(model, frame):
    """Class probabilities [num_classes] for one u8 frame of the model's input shape."""
    frame = np.asarray(frame)
    if frame.shape != model.input_shape:
        raise T.ShapeError(f"expected frame shape {model.input_shape}, got {frame.shape}")
    return forward_batch(model, frame)[0]


# ---------------------------------------------------------------- UQM1 files

MAGIC = b"UQM1"
VERSION = 1
_HEAD = struct.Struct("<4sBBH")
_LAYER_HEAD = struct.Struct("<BB")
_RECORD = struct.Struct("<BIfi")


class ModelFormatError(ValueError):
    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


def _record(dtype_code, raw, qp):
    scale, zp = (qp.scale, qp.zero_point) if qp is not None else (1.0, 0)
    return _RECORD.pack(dtype_code, len(raw), scale, zp) + raw


def model_to_bytes(model):
    out = [_HEAD.pack(MAGIC, VERSION, QUANT_MODES.index(model.quant), len(model.layers) + 1)]
    # leading input record: dims (H, W, C, classes, epochs), input act params if any
    dims = (*model.input_shape, model.num_classes, model.epochs)
    out.append(_LAYER_HEAD.pack(_INPUT_CODE, len(dims)) + struct.pack(f"<{len(dims)}I", *dims))
    acts = [model.input_act] if model.input_act is not None else []
    out.append(struct.pack("<B", len(acts)))
    out += [_record(DTYPE_CODES["act"], b"", qp) for qp in acts]
    for layer in model.layers:
        out.append(_LAYER_HEAD.pack(LAYER_CODES[layer.kind], len(layer.dims)))
        out.append(struct.pack(f"<{len(layer.dims)}I", *layer.dims))
        n = len(layer.params) + (layer.act is not None)
        out.append(struct.pack("<B", n))
        for p, qp in zip(layer.params, layer.qparams):
            p = np.ascontiguousarray(p)
            out.append(_record(_NP_CODES[p.dtype], p.astype(p.dtype.newbyteorder("<")).tobytes(), qp))
        if layer.act is not None:
            out.append(_record(DTYPE_CODES["act"], b"", layer.act))
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, fmt):
        s = struct.Struct(fmt)
        if self.pos + s.size > len(self.buf):
            raise ModelFormatError("truncated", f"file ends at byte {len(self.buf)}")
        vals = s.unpack_from(self.buf, self.pos)
        self.pos += s.size
        return vals

    def raw(self, n):
        if self.pos + n > len(self.buf):
            raise ModelFormatError("truncated", f"file ends at byte {len(self.buf)}")
        b = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return b


def _scheme_for(quant):
    return "dynamic_i8" if quant == "dynamic_i8" else "uint8_affine"


def model_from_bytes(buf):
    r = _Reader(buf)
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise ModelFormatError("bad_magic", f"expected {MAGIC!r}, got {bytes(buf[:4])!r}")
    _, version, qmode, count = r.take("<4sBBH")
    if version != VERSION:
        raise ModelFormatError("version_mismatch", f"unsupported version {version}")
    if qmode >= len(QUANT_MODES):
        raise ModelFormatError("bad_quant_mode", f"quant mode {qmode}")
    quant = QUANT_MODES[qmode]
    scheme = _scheme_for(quant)
    header = None
    input_act = None
    layers = []
    for i in range(count):
        code, ndim = r.take("<BB")
        dims = r.take(f"<{ndim}I")
        (nrec,) = r.take("<B")
        params, qps, act = [], [], None
        for _ in range(nrec):
            dcode, blen, scale, zp = r.take("<BIfi")
            raw = r.raw(blen)
            qp = None
            if dcode == DTYPE_CODES["act"]:
                act = QuantParams(scale, zp, scheme)
                continue
            if dcode not in _NP_DTYPES:
                raise ModelFormatError("bad_dtype", f"dtype code {dcode}")
            arr = np.frombuffer(raw, np.dtype(_NP_DTYPES[dcode]).newbyteorder("<"))
            params.append(arr.astype(_NP_DTYPES[dcode]))
            if dcode in (2, 3, 4) and quant in ("dynamic_i8", "uint8_affine"):
                qp = QuantParams(scale, zp, scheme)
            qps.append(qp)
        if i == 0:
            if code != _INPUT_CODE or ndim != 5:
                raise ModelFormatError("invalid_graph", "first record must describe the input")
            header, input_act = dims, act
            continue
        if code not in _LAYER_NAMES:
            raise ModelFormatError("invalid_graph", f"unknown layer code {code}")
        kind = _LAYER_NAMES[code]
        shapes = param_shapes(kind, dims)
        if len(shapes) != len(params):
            raise ModelFormatError("invalid_graph", f"layer {i}: {len(params)} tensors for {kind}")
        try:
            params = [p.reshape(s) for p, s in zip(params, shapes)]
        except ValueError as exc:
            raise ModelFormatError("invalid_graph", f"layer {i}: {exc}") from None
        layers.append(Layer(kind, dims, params, qps, act))
    if r.pos != len(buf):
        raise ModelFormatError("length_mismatch", f"{len(buf) - r.pos} trailing bytes")
    if header is None:
        raise ModelFormatError("invalid_graph", "no input record")
    H, W, C, classes, epochs = header
    model = ModelGraph(layers, (H, W, C), classes, epochs, quant, input_act)
    try:
        validate(model)
    except (T.ShapeError, TypeError, ValueError) as exc:
        raise ModelFormatError("invalid_graph", str(exc)) from None
    return model


def save_model(model, path):
    """Write the UQM1 encoding of ``model``; returns bytes written."""
    data = model_to_bytes(model)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_model(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
