"""Synthetic forearm-ultrasound-like frames, stratified splits and the UGD1 file.

Each frame is a speckled, depth-attenuated background with a bright
horizontal bone band near the bottom and three elliptical muscle blobs.
The gesture is encoded by which blob is lifted (and slightly brightened at
the expense of the other two, so every class has the same mean intensity).
Per-frame jitter on positions and intensities makes the classes overlap a
little, so a small CNN lands in the low-to-high nineties instead of 100%.

All randomness comes from SplitMix64 (:mod:`usgrip.rng`) and all pixel
arithmetic is plain float64 add/multiply, so a dataset is a pure function of
its config.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _kernels
from .rng import SplitMix64, derive_key, uniform_at

log = logging.getLogger(__name__)

GESTURES = ("open_hand", "index_pinch", "middle_pinch", "ring_pinch")

TRAIN, TEST = 0, 1

# sub-stream tags for derive_key
_FRAME, _SPLIT = 1, 2
# per-frame draws live at these indices of the frame stream; pixel noise
# starts at _NOISE_BASE
_N_PARAMS = 16
_NOISE_BASE = 64


@dataclass(frozen=True)
class GenConfig:
    classes: int = 4
    frames_per_class: int = 600
    native_size: int = 640
    seed: int = 42
    background: float = 70.0
    attenuation: float = 0.35
    speckle_amplitude: float = 70.0
    blob_intensity: float = 80.0
    # class-dependent structure: vertical lift of the active blob and the
    # brightness it borrows from the other two
    blob_lift: float = 0.055
    intensity_shift: float = 10.0
    # per-frame jitter half-widths
    position_jitter: float = 0.035
    intensity_jitter: float = 30.0
    probe_shift: float = 0.05

    def __post_init__(self):
        if self.classes != len(GESTURES):
            raise ValueError(f"exactly {len(GESTURES)} gesture classes are supported")
        if self.frames_per_class < 4:
            raise ValueError("frames_per_class must be >= 4")
        if self.native_size < 80 or self.native_size % 8:
            raise ValueError("native_size must be a multiple of 8 and >= 80")


@dataclass
class Dataset:
    frames: np.ndarray                  # [N, H, W] uint8
    labels: np.ndarray                  # [N] uint8
    seed: int = 0
    split_assignments: np.ndarray | None = None   # [N] uint8, TRAIN/TEST
    class_means: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.frames) != len(self.labels):
            raise ValueError("frames and labels differ in length")
        if self.split_assignments is not None and len(self.split_assignments) != len(self.labels):
            raise ValueError("split assignments differ in length from labels")

    def __len__(self):
        return len(self.labels)

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    def indices(self, split):
        if self.split_assignments is None:
            raise ValueError("dataset has not been split")
        code = {"train": TRAIN, "test": TEST}[split] if isinstance(split, str) else split
        return np.flatnonzero(self.split_assignments == code)

    def subset(self, split):
        """(frames, labels) of one split."""
        idx = self.indices(split)
        return self.frames[idx], self.labels[idx]

    def equals(self, other):
        return (np.array_equal(self.frames, other.frames)
                and np.array_equal(self.labels, other.labels)
                and self.seed == other.seed
                and np.array_equal(self._splits(), other._splits()))

    def _splits(self):
        if self.split_assignments is None:
            return np.zeros(len(self), np.uint8)
        return self.split_assignments


# ---------------------------------------------------------------- generation


@njit(cache=True)
def _bump(d2):
    """Smooth compact profile (1 - d^2)^2 on the unit disc."""
    if d2 >= 1.0:
        return 0.0
    t = 1.0 - d2
    return t * t


@njit(cache=True)
def _render(key, p, out):
    """p: [bg, atten, speckle, band_y, band_half, band_I,
           cx0, cy0, I0, cx1, cy1, I1, cx2, cy2, I2, ax, ay]"""
    H, W = out.shape
    bg, atten, speckle = p[0], p[1], p[2]
    band_y, band_half, band_i = p[3], p[4], p[5]
    ax, ay = p[15], p[16]
    n = 0
    for r in range(H):
        y = (r + 0.5) / H
        base = bg * (1.0 - atten * y)
        db = (y - band_y) / band_half
        band = band_i * _bump(db * db)
        for c in range(W):
            x = (c + 0.5) / W
            v = base + speckle * (uniform_at(key, _NOISE_BASE + n) - 0.5) + band
            for k in range(3):
                dx = (x - p[6 + 3 * k]) / ax
                dy = (y - p[7 + 3 * k]) / ay
                v += p[8 + 3 * k] * _bump(dx * dx + dy * dy)
            q = np.floor(v + 0.5)
            if q < 0.0:
                q = 0.0
            elif q > 255.0:
                q = 255.0
            out[r, c] = np.uint8(q)
            n += 1


def _frame_params(cfg, key, label):
    u = [uniform_at(np.uint64(key), i) for i in range(_N_PARAMS)]

    def jit(i, half):
        # triangular jitter on [-half, half]
        return half * (u[i] + u[i + 1] - 1.0)

    shift = cfg.probe_shift * (2 * u[0] - 1)
    p = np.empty(17)
    p[0:3] = cfg.background, cfg.attenuation, cfg.speckle_amplitude
    p[3] = 0.82 + shift + 0.01 * (2 * u[1] - 1)
    p[4] = 0.03
    p[5] = 90.0
    for k, cx in enumerate((0.22, 0.5, 0.78)):
        active = label == k + 1
        lift = cfg.blob_lift if active else 0.0
        d_int = 0.0
        if label != 0:
            d_int = cfg.intensity_shift if active else -cfg.intensity_shift / 2
        p[6 + 3 * k] = cx + 0.02 * (2 * u[2 + k] - 1)
        p[7 + 3 * k] = 0.42 + shift - lift + jit(5 + 2 * k, cfg.position_jitter)
        p[8 + 3 * k] = cfg.blob_intensity + d_int + cfg.intensity_jitter * (2 * u[11 + k] - 1)
    p[15], p[16] = 0.11, 0.07
    return p


def render_frame(cfg, index, label):
    """One native-size frame; pure function of (config, index, label)."""
    key = derive_key(cfg.seed, _FRAME, index)
    out = np.empty((cfg.native_size, cfg.native_size), np.uint8)
    _render(np.uint64(key), _frame_params(cfg, key, label), out)
    return out


def generate(config=GenConfig(), out_size=None):
    """Generate ``classes * frames_per_class`` labelled frames.

    Frame ``k`` has label ``k % classes``. Frames are native size unless
    ``out_size`` is given, in which case each one is block-mean downsampled as
    it is produced (a full native dataset is ~1 GB).
    """
    n = config.classes * config.frames_per_class
    size = config.native_size if out_size is None else out_size
    if config.native_size % size:
        raise ValueError(f"out_size {size} must divide native size {config.native_size}")
    frames = np.empty((n, size, size), np.uint8)
    labels = (np.arange(n) % config.classes).astype(np.uint8)
    for k in range(n):
        f = render_frame(config, k, int(labels[k]))
        frames[k] = f if size == config.native_size else downsample(f, config.native_size // size)
    means = np.array([frames[labels == c].mean(dtype=np.float64) for c in range(config.classes)])
    spread = means.max() / means.min() - 1
    if spread > 0.01:
        log.warning("per-class mean intensity spread %.2f%% exceeds 1%%", 100 * spread)
    return Dataset(frames, labels, seed=config.seed, class_means=means)


def split(dataset, test_fraction=0.25, seed=None):
    """Stratified seeded train/test assignment.

    The total test count is ``round(N * test_fraction)``. Each class first gets
    ``floor(n_c * test_fraction)`` test frames; leftover test slots go to the
    classes with the largest fractional remainders, ties broken by a seeded
    shuffle. Which frames of a class are held out is also seeded.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    seed = dataset.seed if seed is None else seed
    rng = SplitMix64(derive_key(seed, _SPLIT))
    labels = dataset.labels
    classes = np.unique(labels)
    counts = {int(c): int(np.sum(labels == c)) for c in classes}
    total_test = int(np.floor(len(labels) * test_fraction + 0.5))
    quota = {c: int(np.floor(n * test_fraction)) for c, n in counts.items()}
    order = rng.shuffle([int(c) for c in classes])
    order.sort(key=lambda c: -(counts[c] * test_fraction - quota[c]))
    for c in order[:max(total_test - sum(quota.values()), 0)]:
        quota[c] += 1
    assign = np.full(len(labels), TRAIN, np.uint8)
    for c in sorted(counts):
        idx = [int(i) for i in np.flatnonzero(labels == c)]
        rng.shuffle(idx)
        assign[idx[:quota[c]]] = TEST
    return Dataset(dataset.frames, dataset.labels, seed=dataset.seed,
                   split_assignments=assign, class_means=dataset.class_means)


def downsample(frame, factor=8):
    """Block-mean downsample of a u8 image (or a stack of them)."""
    frame = np.asarray(frame)
    if frame.dtype != np.uint8:
        raise TypeError("downsample expects uint8 pixels")
    if frame.ndim == 3:
        return np.stack([downsample(f, factor) for f in frame])
    H, W = frame.shape
    if H % factor or W % factor:
        raise ValueError(f"{H}x{W} is not divisible by {factor}")
    out = np.empty((H // factor, W // factor), np.uint8)
    _kernels.block_mean_u8(np.ascontiguousarray(frame), factor, out)
    return out


# ---------------------------------------------------------------- UGD1 files

MAGIC = b"UGD1"
VERSION = 1
_HEADER = struct.Struct("<4sBIHHQ")


class DatasetFormatError(ValueError):
    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


def dataset_to_bytes(ds):
    n, H, W = ds.frames.shape
    head = _HEADER.pack(MAGIC, VERSION, n, H, W, ds.seed)
    rec = np.empty((n, 2 + H * W), np.uint8)
    rec[:, 0] = ds.labels
    rec[:, 1] = ds._splits()
    rec[:, 2:] = ds.frames.reshape(n, H * W)
    return head + rec.tobytes()


def dataset_from_bytes(buf):
    if len(buf) < _HEADER.size:
        raise DatasetFormatError("truncated", "file shorter than header")
    magic, version, n, H, W, seed = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetFormatError("bad_magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise DatasetFormatError("version_mismatch", f"unsupported version {version}")
    body = len(buf) - _HEADER.size
    want = n * (2 + H * W)
    if body < want:
        raise DatasetFormatError("truncated", f"expected {want} body bytes, found {body}")
    if body > want:
        raise DatasetFormatError("length_mismatch", f"{body - want} trailing bytes")
    rec = np.frombuffer(buf, np.uint8, offset=_HEADER.size).reshape(n, 2 + H * W)
    labels = rec[:, 0].copy()
    splits = rec[:, 1].copy()
    if n and labels.max() >= len(GESTURES):
        raise DatasetFormatError("bad_label", f"label {labels.max()} out of range")
    if n and splits.max() > TEST:
        raise DatasetFormatError("bad_split", f"split code {splits.max()} out of range")
    frames = rec[:, 2:].reshape(n, H, W).copy()
    return Dataset(frames, labels, seed=seed, split_assignments=splits)


def save_dataset(ds, path):
    data = dataset_to_bytes(ds)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_dataset(path):
    with open(path, "rb") as f:
        return dataset_from_bytes(f.read())
