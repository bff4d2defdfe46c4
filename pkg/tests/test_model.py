import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usgrip import model as M
from usgrip.tensor import ShapeError


@pytest.fixture(scope="module")
def net():
    return M.build_default_model(42)


def frames(n, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, 80, 80, 1), np.uint8)


def expected_file_size(model):
    """Byte count from the format layout: header, input record, then per layer
    type/dim-count/dims/record-count followed by 13-byte records and payload."""
    size = 8 + (2 + 5 * 4 + 1)
    for layer in model.layers:
        size += 2 + 4 * len(layer.dims) + 1
        size += sum(13 + np.asarray(p).nbytes for p in layer.params)
    return size


def test_parameter_counts(net):
    # conv: 9*cin*cout + cout, batchnorm: 4*c (2 learnable), dense: n*m + m
    convs = [(1, 8), (8, 16), (16, 32), (32, 64), (64, 64)]
    conv = sum(9 * a * b + b for a, b in convs)
    bn = sum(b for _, b in convs)
    dense = 2 * 2 * 64 * 128 + 128 + 128 * 4 + 4
    assert net.param_count() == conv + 4 * bn + dense == 95_460
    assert net.param_count(learnable_only=True) == conv + 2 * bn + dense == 95_092
    assert net.payload_bytes() == 4 * 95_460


def test_shape_chain(net):
    shapes = M.output_shapes(net)
    pools = [s for s, layer in zip(shapes, net.layers) if layer.kind == "maxpool"]
    assert [s[:2] for s in pools] == [(40, 40), (20, 20), (10, 10), (5, 5), (2, 2)]
    assert shapes[-1] == (4,)
    assert [layer.kind for layer in net.layers[:4]] == ["conv", "batchnorm", "relu", "maxpool"]


def test_seeded_init_is_deterministic(net):
    assert M.build_default_model(42).equals(net)
    assert not M.build_default_model(43).equals(net)


def test_he_uniform_bounds(net):
    w = net.layers[0].params[0]
    assert np.abs(w).max() <= np.sqrt(6 / 9)
    assert not net.layers[0].params[1].any()


def test_forward_probabilities(net):
    p = M.forward(net, frames(1)[0])
    assert p.shape == (4,) and p.dtype == np.float32
    assert abs(float(p.sum()) - 1) <= 1e-6
    assert (p >= 0).all()


def test_batched_forward_equals_single(net):
    x = frames(5, 1)
    batch = M.forward_batch(net, x)
    for i in range(5):
        np.testing.assert_array_equal(batch[i], M.forward(net, x[i]))


def test_forward_rejects_wrong_shape(net):
    with pytest.raises(ShapeError):
        M.forward(net, np.zeros((64, 64, 1), np.uint8))
    with pytest.raises(TypeError):
        M.forward(net, np.zeros((80, 80, 1), np.float32))


def test_validate_rejects_broken_chain(net):
    bad = net.copy()
    bad.layers[4] = M.Layer("conv", (3, 3, 4, 16, 1, M.SAME), bad.layers[4].params)
    with pytest.raises(ShapeError):
        M.validate(bad)
    short = net.copy()
    del short.layers[:4]
    with pytest.raises(ShapeError):
        M.validate(short)


def test_quant_params_coerce_and_check():
    qp = M.QuantParams(0.1, 3)
    assert qp.scale == float(np.float32(0.1))
    with pytest.raises(ValueError):
        M.QuantParams(0.0)
    with pytest.raises(ValueError):
        M.QuantParams(1.0, 300)
    with pytest.raises(ValueError):
        M.QuantParams(1.0, 1, "dynamic_i8")


# ---------------------------------------------------------------- UQM1


def test_file_round_trip_bit_exact(net, tmp_path):
    path = tmp_path / "m.uqm"
    n = M.save_model(net, path)
    assert n == path.stat().st_size == expected_file_size(net) == 382_584
    back = M.load_model(path)
    assert back.equals(net)
    x = frames(3)
    assert M.forward_batch(back, x).tobytes() == M.forward_batch(net, x).tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 1000))
def test_file_round_trip_property(seed, epochs):
    rng = np.random.default_rng(seed)
    net = M.build_default_model(seed, filters=(2, 2, 3, 3, 4), dense_units=5)
    net.epochs = epochs
    for layer in net.layers:
        layer.params = [rng.standard_normal(p.shape).astype(np.float32) for p in layer.params]
    data = M.model_to_bytes(net)
    assert len(data) == expected_file_size(net)
    assert M.model_from_bytes(data).equals(net)


def test_header_layout(net):
    data = M.model_to_bytes(net)
    magic, version, qmode, count = struct.unpack_from("<4sBBH", data)
    assert (magic, version, qmode, count) == (b"UQM1", 1, 0, len(net.layers) + 1)


def _corrupt(data, offset, value):
    return data[:offset] + value + data[offset + len(value):]


@pytest.mark.parametrize("mutate,code", [
    (lambda b: _corrupt(b, 0, b"XXXX"), "bad_magic"),
    (lambda b: b[:2], "bad_magic"),
    (lambda b: _corrupt(b, 4, b"\x09"), "version_mismatch"),
    (lambda b: _corrupt(b, 5, b"\x07"), "bad_quant_mode"),
    (lambda b: b[:-1], "truncated"),
    (lambda b: b[:100], "truncated"),
    (lambda b: b + b"\x00", "length_mismatch"),
    (lambda b: _corrupt(b, 31, b"\x09"), "invalid_graph"),   # first layer code
    (lambda b: _corrupt(b, 8 + 23 + 2 + 24 + 1, b"\x08"), "bad_dtype"),
])
def test_file_errors(net, mutate, code):
    with pytest.raises(M.ModelFormatError) as err:
        M.model_from_bytes(mutate(M.model_to_bytes(net)))
    assert err.value.code == code


def test_copy_is_independent(net):
    c = net.copy()
    c.layers[0].params[0][0, 0, 0, 0] += 1
    assert not c.equals(net)
