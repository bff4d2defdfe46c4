"""
Post-training quantization
==========================

float16 storage, dynamic-range int8 and full uint8 from one f32 model.
"""

import numpy as np

from usgrip import bench as B
from usgrip import data as D
from usgrip import model as M
from usgrip import quant as Q
from usgrip.train import TrainConfig, train

ds = D.split(D.generate(D.GenConfig(frames_per_class=100), out_size=80))
f32, _ = train(M.build_default_model(42), ds, TrainConfig(epochs=6, batch_size=16))

# uint8 needs activation ranges, collected from seeded train frames
calib = ds.frames[Q.calibration_indices(ds, 50)][..., None]
models = {
    "f32": f32,
    "f16": Q.quantize(f32, "f16"),
    "dynamic_i8": Q.quantize(f32, "dynamic"),
    "uint8_affine": Q.quantize(f32, "uint8", calib),
}

x, y = ds.subset("test")
top = B.predict_classes(f32, x)
for name, m in models.items():
    size = len(M.model_to_bytes(m))
    pred = B.predict_classes(m, x)
    print(f"{name:13s} {size:7d} bytes  accuracy {np.mean(pred == y):.3f}  "
          f"agreement with f32 {np.mean(pred == top):.3f}")

# the scale / zero-point arithmetic behind uint8
qp = Q.affine_params(-1.0, 1.0)
print(qp, qp.quantize([-1.0, 0.0, 1.0], 0, 255))
