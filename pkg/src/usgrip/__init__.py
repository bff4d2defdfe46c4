"""Edge gesture recognition from forearm-ultrasound-like frames.

A small CNN runtime in numpy/numba, three post-training quantization
schemes, a UDP frame-streaming server/client and a benchmark harness.
"""

from .data import GESTURES, Dataset, GenConfig, downsample, generate, load_dataset, save_dataset, split
from .model import (ModelGraph, QuantParams, build_default_model, forward, forward_batch, load_model,
                    save_model)
from .quant import (CalibrationProfile, calibrate, predict_batch, quantize, quantize_dynamic,
                    quantize_f16, quantize_uint8, quantized_forward)
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "GESTURES", "Dataset", "GenConfig", "downsample", "generate", "load_dataset", "save_dataset",
    "split", "ModelGraph", "QuantParams", "build_default_model", "forward", "forward_batch",
    "load_model", "save_model", "CalibrationProfile", "calibrate", "predict_batch", "quantize",
    "quantize_dynamic", "quantize_f16", "quantize_uint8", "quantized_forward", "TrainConfig",
    "train",
]
