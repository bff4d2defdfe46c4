"""
Synthetic ultrasound frames
===========================

Four gesture classes, seeded generation, a stratified split and the on-disk
dataset file.
"""

import tempfile
from pathlib import Path

import numpy as np

from usgrip import data as D

# a small dataset: 8 frames per class, rendered at 640x640 and stored at 80x80
cfg = D.GenConfig(frames_per_class=8, seed=42)
ds = D.generate(cfg, out_size=80)
print(ds.frames.shape, np.bincount(ds.labels))

# the classes share the same mean brightness; only the blob layout differs
print(ds.class_means.round(2))

# the same config always gives the same pixels
print(D.generate(cfg, out_size=80).equals(ds))

# stratified 75 / 25 split
ds = D.split(ds, test_fraction=0.25)
print(len(ds.indices("train")), len(ds.indices("test")))

# downsampling is an 8x8 block mean with round-half-up
block = np.arange(64, dtype=np.uint8).reshape(8, 8)
print(D.downsample(block))

# round trip through a file
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "small.ugd"
    print(D.save_dataset(ds, path), "bytes")
    print(D.load_dataset(path).equals(ds))

# print one frame of each class as coarse ASCII art
for c, name in enumerate(D.GESTURES):
    frame = D.downsample(ds.frames[ds.labels == c][0], 4)
    print(name)
    for row in frame:
        print("".join(" .:-=+*#%@"[int(v) * 10 // 256] for v in row))
