"""Accuracy, confusion matrices, latency and the per-scheme benchmark report."""

from __future__ import annotations

import platform
from dataclasses import dataclass, field

import numpy as np

from . import quant as Q
from .model import model_to_bytes

SCHEMES = ("f32", "f16", "dynamic_i8", "uint8_affine")
SCHEME_TITLES = {"f32": "No Quantization", "f16": "Float16 Quantization",
                 "dynamic_i8": "Dynamic Range Quantization", "uint8_affine": "UInt8 Quantization"}


def confusion_matrix(predictions, labels, num_classes=4):
    """counts[i, j] = number of samples with true class i predicted as j."""
    predictions = np.asarray(predictions, np.int64)
    labels = np.asarray(labels, np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    for name, v in (("label", labels), ("prediction", predictions)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValueError(f"{name} outside 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def accuracy_from_confusion(cm):
    total = int(cm.sum())
    return int(np.trace(cm)) / total if total else 0.0


def latency_summary(seconds):
    s = np.asarray(seconds, np.float64)
    if s.size == 0:
        return {"mean": None, "p50": None, "p95": None, "n": 0}
    return {"mean": float(s.mean()), "p50": float(np.percentile(s, 50)),
            "p95": float(np.percentile(s, 95)), "n": int(s.size)}


def _frames4(frames):
    return frames[..., None] if frames.ndim == 3 else frames


def predict_classes(model, frames, batch_size=100):
    frames = _frames4(np.asarray(frames))
    out = [np.argmax(Q.predict_batch(model, frames[s:s + batch_size]), axis=1)
           for s in range(0, len(frames), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, np.int64)


@dataclass
class EvalResult:
    quant: str
    split: str
    confusion: np.ndarray
    predictions: np.ndarray = field(repr=False)

    @property
    def count(self):
        return int(self.confusion.sum())

    @property
    def accuracy(self):
        return accuracy_from_confusion(self.confusion)


def evaluate(model, frames, labels, split="test"):
    preds = predict_classes(model, frames)
    return EvalResult(model.quant, split, confusion_matrix(preds, labels, model.num_classes), preds)


def measure_latency(model, frames, n=100):
    """Wall time of ``n`` single-frame inference calls (cycling through ``frames``)."""
    frames = _frames4(np.asarray(frames))
    if len(frames) == 0 or n <= 0:
        return []
    Q.quantized_forward(model, frames[0])          # warm-up: compile / decode caches
    timings = []
    for i in range(n):
        Q.quantized_forward(model, frames[i % len(frames)], timings)
    return timings


@dataclass
class SchemeResult:
    scheme: str
    model_file_bytes: int
    weight_payload_bytes: int
    train: EvalResult
    test: EvalResult
    train_latency: dict
    test_latency: dict


@dataclass
class BenchReport:
    results: dict
    config: dict
    machine: str = field(default_factory=lambda: f"{platform.node()} {platform.machine()} "
                                                 f"{platform.processor() or platform.system()} "
                                                 f"python {platform.python_version()}")


def run_bench(f32_model, dataset, calib_samples=100, seed=42, latency_samples=100,
              models=None):
    """Evaluate the f32 model and its three quantized variants on both splits.

    ``models`` may supply prebuilt variants by scheme name; missing ones are
    derived here (uint8 calibrates on ``calib_samples`` seeded train frames).
    """
    models = dict(models or {})
    models.setdefault("f32", f32_model)
    models.setdefault("f16", Q.quantize_f16(f32_model))
    models.setdefault("dynamic_i8", Q.quantize_dynamic(f32_model))
    if "uint8_affine" not in models:
        calib = dataset.frames[Q.calibration_indices(dataset, calib_samples, seed)]
        models["uint8_affine"] = Q.quantize_uint8(f32_model, Q.calibrate(f32_model, _frames4(calib)))
    tr_x, tr_y = dataset.subset("train")
    te_x, te_y = dataset.subset("test")
    results = {}
    for s in SCHEMES:
        m = models[s]
        results[s] = SchemeResult(
            s, len(model_to_bytes(m)), m.payload_bytes(),
            evaluate(m, tr_x, tr_y, "train"), evaluate(m, te_x, te_y, "test"),
            latency_summary(measure_latency(m, tr_x, latency_samples)),
            latency_summary(measure_latency(m, te_x, latency_samples)))
    config = {"calib_samples": calib_samples, "seed": seed, "latency_samples": latency_samples,
              "dataset_frames": len(dataset), "dataset_seed": dataset.seed,
              "latency_scope": "forward_only (single-frame quantized_forward wall time)"}
    return BenchReport(results, config), models


# ---------------------------------------------------------------- text formats


def _cm_text(cm):
    return ";".join(",".join(str(int(v)) for v in row) for row in cm)


def format_eval(res):
    lines = [f"quant = {res.quant}", f"split = {res.split}", f"samples = {res.count}",
             f"correct = {int(np.trace(res.confusion))}", f"accuracy = {res.accuracy:.6f}",
             f"confusion = {_cm_text(res.confusion)}"]
    return "\n".join(lines) + "\n"


def format_report(report):
    """Stable key = value report; nondeterministic fields live in their own section."""
    det = [f"config.{k} = {v}" for k, v in sorted(report.config.items())]
    nondet = [f"machine = {report.machine}"]
    for s in SCHEMES:
        r = report.results[s]
        det += [f"{s}.model_file_bytes = {r.model_file_bytes}",
                f"{s}.weight_payload_bytes = {r.weight_payload_bytes}",
                f"{s}.train_accuracy = {r.train.accuracy:.6f}",
                f"{s}.test_accuracy = {r.test.accuracy:.6f}",
                f"{s}.train_confusion = {_cm_text(r.train.confusion)}",
                f"{s}.test_confusion = {_cm_text(r.test.confusion)}"]
        for split, lat in (("train", r.train_latency), ("test", r.test_latency)):
            for k in ("mean", "p50", "p95"):
                v = lat[k]
                nondet.append(f"{s}.{split}_latency_{k}_s = " + ("none" if v is None else f"{v:.6f}"))
    return "[deterministic]\n" + "\n".join(det) + "\n[nondeterministic]\n" + "\n".join(nondet) + "\n"


def parse_report(text):
    """Inverse of the key = value layout: {section: {key: value-string}}."""
    out, section = {}, None
    for line in text.splitlines():
        if line.startswith("[") and line.endswith("]"):
            section = out.setdefault(line[1:-1], {})
        elif " = " in line and section is not None:
            k, v = line.split(" = ", 1)
            section[k] = v
    return out


def _ms(seconds):
    return "-" if seconds is None else f"{seconds * 1e3:.2f} ms"


def format_table(report):
    """Human-readable size / accuracy / time table, one column per scheme."""
    cols = [SCHEME_TITLES[s] for s in SCHEMES]
    rows = [("Size of Model (bytes)", [str(report.results[s].model_file_bytes) for s in SCHEMES]),
            ("Train Accuracy", [f"{100 * report.results[s].train.accuracy:.1f}%" for s in SCHEMES]),
            ("Train Data Time (sample, inference)",
             [_ms(report.results[s].train_latency["mean"]) for s in SCHEMES]),
            ("Test Accuracy", [f"{100 * report.results[s].test.accuracy:.1f}%" for s in SCHEMES]),
            ("Test Data Time (sample, inference)",
             [_ms(report.results[s].test_latency["mean"]) for s in SCHEMES])]
    w0 = max(len(r[0]) for r in rows)
    widths = [max(len(c), *(len(r[1][i]) for r in rows)) for i, c in enumerate(cols)]
    line = lambda first, cells: " | ".join([first.ljust(w0)] + [c.rjust(w) for c, w in zip(cells, widths)])
    out = [line("Quantization", cols), "-+-".join("-" * w for w in [w0] + widths)]
    out += [line(name, cells) for name, cells in rows]
    return "\n".join(out) + "\n"
