"""Adam training loop for the gesture CNN."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import prepare_input, run_float

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 42
    test_fraction: float = 0.25

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float | None = None
    test_accuracy: float | None = None


@dataclass
class History:
    epochs: list = field(default_factory=list)

    def as_dict(self):
        return [vars(e) for e in self.epochs]


class Adam:
    """Adam with bias correction, updating float32 arrays in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        dt = self.params[0].dtype.type if self.params else np.float32
        b1, b2 = dt(self.beta1), dt(self.beta2)
        c1 = dt(1 - self.beta1 ** self.t)
        c2 = dt(1 - self.beta2 ** self.t)
        lr, eps = dt(self.lr), dt(self.eps)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def backward(layers, params, caches, dlogits):
    """Gradients for every learnable tensor, as a list per layer."""
    grads = [[None] * len(p) for p in params]
    g = dlogits
    n = len(caches)
    for i in range(n - 1, -1, -1):
        layer, cache = layers[i], caches[i]
        k = layer.kind
        first = i == 0
        if k == "conv":
            g, dw, db = T.conv2d_grad(g, cache, need_input_grad=not first)
            grads[i][:2] = [dw, db]
        elif k == "batchnorm":
            g, dgamma, dbeta = T.batchnorm_grad(g, cache)
            grads[i][:2] = [dgamma, dbeta]
        elif k == "relu":
            g = T.relu_grad(g, cache)
        elif k == "maxpool":
            g = T.maxpool2d_grad(g, cache)
        elif k == "flatten":
            g = g.reshape(cache)
        elif k == "dense":
            g, dw, db = T.dense_grad(g, cache)
            grads[i][:2] = [dw, db]
    return grads


def _learnable(model):
    """(layer index, param index) of every trained tensor; batchnorm running stats excluded."""
    out = []
    for i, layer in enumerate(model.layers):
        if layer.kind in ("conv", "dense", "batchnorm"):
            out += [(i, 0), (i, 1)]
    return out


def evaluate(model, frames, labels, batch_size=128):
    """(mean cross-entropy, accuracy, predicted classes) in inference mode."""
    from .model import forward_batch
    preds, losses = [], []
    for s in range(0, len(labels), batch_size):
        p = forward_batch(model, _with_channel(frames[s:s + batch_size]))
        preds.append(np.argmax(p, axis=1))
        losses.append(T.cross_entropy(p, labels[s:s + batch_size]) * len(p))
    preds = np.concatenate(preds) if preds else np.zeros(0, np.int64)
    n = max(len(labels), 1)
    return sum(losses) / n, int(np.sum(preds == labels)) / n, preds


def _with_channel(frames):
    return frames[..., None] if frames.ndim == 3 else frames


def train(model, dataset, config=TrainConfig(), progress=None):
    """Train a copy of ``model`` on the train split of ``dataset``.

    Returns ``(trained_model, history)``. Each epoch reshuffles the train split
    with ``numpy.random.default_rng([seed, epoch])``. ``progress`` is called with
    every finished :class:`EpochStats`.
    """
    if model.quant != "f32":
        raise ValueError("only f32 models can be trained")
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    train_idx = dataset.indices("train")
    test_idx = dataset.indices("test")
    if np.intersect1d(train_idx, test_idx).size:
        raise TrainingError("train and test splits overlap")
    if len(train_idx) == 0:
        raise TrainingError("train split is empty")
    if config.batch_size > len(train_idx):
        raise TrainingError(f"batch_size {config.batch_size} exceeds train set size {len(train_idx)}")

    model = model.copy()
    params = [[np.array(p, np.float32) for p in layer.params] for layer in model.layers]
    keys = _learnable(model)
    opt = Adam([params[i][j] for i, j in keys], config.learning_rate, config.beta1,
               config.beta2, config.epsilon)
    frames = _with_channel(dataset.frames)
    labels = dataset.labels.astype(np.int64)
    history = History()
    for epoch in range(config.epochs):
        order = train_idx[np.random.default_rng([config.seed, epoch]).permutation(len(train_idx))]
        loss_sum, correct, seen = 0.0, 0, 0
        for b, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s:s + config.batch_size]
            x = prepare_input(model, frames[idx])
            y = labels[idx]
            caches, stats = [], []
            logits = run_float(model.layers, params, x, "train", caches, stats)
            if not np.all(np.isfinite(logits)):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            probs = T.softmax(logits)
            loss = T.cross_entropy(probs, y)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            grads = backward(model.layers, params, caches, T.softmax_crossentropy_grad(probs, y))
            opt.step([grads[i][j] for i, j in keys])
            bn = iter(stats)
            for i, layer in enumerate(model.layers):
                if layer.kind == "batchnorm":
                    mean, var = next(bn)
                    params[i][2][...] = mean
                    params[i][3][...] = var
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == y))
            seen += len(idx)
        for layer, p in zip(model.layers, params):
            layer.params = [q.copy() for q in p]
        model._float = None
        st = EpochStats(epoch + 1, loss_sum / seen, correct / seen)
        if len(test_idx):
            st.test_loss, st.test_accuracy, _ = evaluate(model, frames[test_idx], labels[test_idx])
        history.epochs.append(st)
        log.info("epoch %d: loss %.4f acc %.4f test acc %s", st.epoch, st.train_loss,
                 st.train_accuracy, st.test_accuracy)
        if progress is not None:
            progress(st)
    model.epochs += config.epochs
    return model, history
