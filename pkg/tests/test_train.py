import numpy as np
import pytest

from usgrip import data as D
from usgrip import model as M
from usgrip import tensor as T
from usgrip.train import Adam, TrainConfig, TrainingError, backward, evaluate, train

from oracles import adam_reference, central_difference, relative_error


@pytest.fixture(scope="module")
def tiny_ds():
    ds = D.generate(D.GenConfig(frames_per_class=16, native_size=160), out_size=80)
    return D.split(ds, 0.25, seed=42)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_is_fixed_point():
    w = np.array([1.0, -2.0, 3.0], np.float32)
    opt = Adam([w])
    for _ in range(5):
        opt.step([np.zeros(3, np.float32)])
    np.testing.assert_array_equal(w, [1, -2, 3])


def test_adam_first_step_moves_by_lr():
    w = np.array([1.0], np.float32)
    Adam([w]).step([np.array([1.0], np.float32)])
    assert abs(float(w[0]) - 0.999) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_adam_matches_reference(seed):
    grads = np.random.default_rng(seed).standard_normal(20)
    w = np.array([0.5])
    opt = Adam([w], lr=0.01)
    for g in grads:
        opt.step([np.array([g])])
    assert abs(w[0] - adam_reference(0.5, grads, lr=0.01)) < 1e-12


# ---------------------------------------------------------------- whole-network gradient


def test_network_backward_matches_finite_difference():
    rng = np.random.default_rng(0)
    net = M.build_default_model(1, filters=(2, 3, 3, 4, 4), dense_units=6, input_shape=(32, 32, 1))
    params = [[np.asarray(p, np.float64) for p in layer.params] for layer in net.layers]
    for layer, p in zip(net.layers, params):
        if layer.kind == "batchnorm":
            p[0][:] = rng.uniform(0.5, 1.5, p[0].shape)
            p[1][:] = rng.standard_normal(p[1].shape) * 0.1
    x = rng.uniform(0, 1, (4, 32, 32, 1))
    y = np.array([0, 1, 2, 3])

    def loss():
        return T.cross_entropy(T.softmax(M.run_float(net.layers, params, x, "train")), y)

    caches = []
    probs = T.softmax(M.run_float(net.layers, params, x, "train", caches))
    grads = backward(net.layers, params, caches, T.softmax_crossentropy_grad(probs, y))
    for i, layer in enumerate(net.layers):
        if layer.kind in ("conv", "dense", "batchnorm"):
            for j in range(2):
                numeric = central_difference(loss, params[i][j])
                if layer.kind == "conv" and j == 1:
                    # batchnorm in train mode cancels any per-channel offset
                    assert np.abs(grads[i][j]).max() < 1e-9 and np.abs(numeric).max() < 1e-8
                else:
                    assert relative_error(grads[i][j], numeric) <= 1e-4


# ---------------------------------------------------------------- training loop


def test_short_training_run(tiny_ds):
    net = M.build_default_model(42)
    seen = []
    trained, hist = train(net, tiny_ds, TrainConfig(epochs=2, batch_size=16), seen.append)
    assert len(hist.epochs) == 2 and seen == hist.epochs
    assert all(np.isfinite(e.train_loss) for e in hist.epochs)
    assert hist.epochs[0].test_accuracy is not None
    assert trained.epochs == 2 and net.epochs == 0
    assert not trained.equals(net)
    # running statistics moved away from their initial values
    bn = trained.layers[1].params
    assert not np.array_equal(bn[2], 0) and not np.array_equal(bn[3], 1)
    loss, acc, preds = evaluate(trained, *tiny_ds.subset("test"))
    assert loss == pytest.approx(hist.epochs[-1].test_loss)
    assert acc == hist.epochs[-1].test_accuracy and len(preds) == 16


def test_training_is_bit_reproducible(tiny_ds):
    cfg = TrainConfig(epochs=1, batch_size=16)
    a, ha = train(M.build_default_model(42), tiny_ds, cfg)
    b, hb = train(M.build_default_model(42), tiny_ds, cfg)
    assert a.equals(b)
    assert ha.as_dict() == hb.as_dict()


def test_training_errors(tiny_ds):
    net = M.build_default_model(42)
    empty = D.Dataset(np.zeros((0, 80, 80), np.uint8), np.zeros(0, np.uint8),
                      split_assignments=np.zeros(0, np.uint8))
    with pytest.raises(TrainingError):
        train(net, empty)
    with pytest.raises(TrainingError):
        train(net, tiny_ds, TrainConfig(batch_size=1000))
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)


def test_training_reports_nan(tiny_ds):
    net = M.build_default_model(42)
    net.layers[0].params[0][...] = np.nan
    with pytest.raises(TrainingError, match="epoch 1, batch 1"):
        train(net, tiny_ds, TrainConfig(epochs=1, batch_size=16))
