import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usgrip import model as M
from usgrip import quant as Q
from usgrip import tensor as T

from oracles import f16_reference


@pytest.fixture(scope="module")
def net():
    return M.build_default_model(3)


@pytest.fixture(scope="module")
def frames():
    return np.random.default_rng(0).integers(0, 256, (24, 80, 80, 1), np.uint8)


@pytest.fixture(scope="module")
def u8(net, frames):
    return Q.quantize(net, "uint8", frames[:16])


# ---------------------------------------------------------------- float16


def test_f16_examples():
    assert float(Q.to_f16(1.0)) == 1.0
    assert float(Q.to_f16(0.1)) == 0.0999755859375
    assert float(Q.to_f16(1e6)) == 65504.0
    assert float(Q.to_f16(-1e6)) == -65504.0


@settings(max_examples=300, deadline=None)
@given(st.floats(-1e6, 1e6, width=32))
def test_f16_matches_struct_oracle(x):
    assert float(Q.to_f16(np.float32(x))) == f16_reference(np.float32(x))


def test_f16_inference_is_f32_with_rounded_weights(net, frames):
    h = Q.quantize(net, "f16")
    assert h.quant == "f16"
    rounded = net.copy()
    for layer in rounded.layers:
        layer.params = [np.array([f16_reference(v) for v in p.ravel()], np.float32).reshape(p.shape)
                        for p in layer.params]
    assert Q.predict_batch(h, frames).tobytes() == M.forward_batch(rounded, frames).tobytes()


def test_f16_file_round_trip(net):
    h = Q.quantize_f16(net)
    assert M.model_from_bytes(M.model_to_bytes(h)).equals(h)
    assert h.payload_bytes() * 2 == net.payload_bytes()


# ---------------------------------------------------------------- dynamic int8


def test_symmetric_example():
    w = np.array([-0.5, 0.25, 0.5], np.float32)
    qp = Q.symmetric_params(w)
    assert qp.scale == pytest.approx(0.5 / 127)
    assert qp.quantize(w, -127, 127).tolist() == [-127, 64, 127]


def test_symmetric_all_zero():
    qp = Q.symmetric_params(np.zeros(4))
    assert qp.scale == 1.0
    assert not qp.quantize(np.zeros(4), -127, 127).any()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100, width=32), min_size=1, max_size=50))
def test_symmetric_round_trip_error(values):
    w = np.array(values, np.float32)
    qp = Q.symmetric_params(w)
    q = qp.quantize(w, -127, 127)
    assert np.abs(q).max() <= 127
    assert np.abs(qp.dequantize(q) - w).max() <= qp.scale / 2 * (1 + 1e-6)


def test_dynamic_tracks_float(net, frames):
    d = Q.quantize(net, "dynamic")
    assert d.quant == "dynamic_i8"
    assert d.layers[0].params[0].dtype == np.int8
    p, f = Q.predict_batch(d, frames), M.forward_batch(net, frames)
    assert np.abs(p - f).max() < 0.05
    assert np.mean(p.argmax(1) == f.argmax(1)) >= 0.9
    assert M.model_from_bytes(M.model_to_bytes(d)).equals(d)


# ---------------------------------------------------------------- uint8 affine


def test_affine_examples():
    qp = Q.affine_params(-1.0, 1.0)
    assert qp.scale == pytest.approx(2 / 255) and qp.zero_point == 128
    assert M.QuantParams(0.01, 0).dequantize(100) == pytest.approx(1.0)
    # ranges are widened to include zero, which stays exactly representable
    qp = Q.affine_params(2.0, 5.0)
    assert qp.zero_point == 0 and qp.dequantize(qp.quantize(0.0, 0, 255)) == 0.0
    assert Q.affine_params(3.0, 3.0).zero_point == 0
    assert Q.affine_params(0.0, 0.0) == M.QuantParams(1.0, 128)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e3, 0), st.floats(0, 1e3))
def test_affine_covers_range(lo, hi):
    qp = Q.affine_params(lo, hi)
    assert 0 <= qp.zero_point <= 255
    for v in (lo, hi, 0.0):
        q = qp.quantize(v, 0, 255)
        assert abs(qp.dequantize(q) - v) <= qp.scale * 0.5 + 1e-6 * max(abs(lo), hi, 1)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 0.999), st.integers(-2**24, 2**24), st.integers(0, 255))
def test_requantize_matches_float(m, acc, zp):
    got = int(Q.requantize(np.array([acc], np.int32), m, zp)[0])
    exact = acc * m
    ref = int(np.clip(T.round_half_away(exact) + zp, 0, 255))
    if abs(abs(exact - np.floor(exact)) - 0.5) > 1e-6:
        assert got == ref
    else:
        assert abs(got - ref) <= 1


def test_quantize_multiplier_range():
    for m in (1e-5, 0.25, 0.5, 0.7, 0.999999, 3.0):
        q, shift = Q.quantize_multiplier(m)
        assert 2**30 <= q < 2**31
        assert q * 2.0**-shift == pytest.approx(m, rel=2**-30)
    with pytest.raises(Q.QuantizationError):
        Q.quantize_multiplier(0.0)


def _simulate(model, frame):
    """Float64 walk of a uint8 graph: dequantize, compute, round to the next layer's grid."""
    act = model.input_act
    xq = frame.astype(np.float64)
    for layer in model.layers:
        if layer.kind in ("conv", "dense"):
            wq, bq = layer.params
            wp = layer.qparams[0]
            rx = act.scale * (xq - act.zero_point)
            rw = wp.scale * (wq.astype(np.float64) - wp.zero_point)
            rb = wp.scale * act.scale * bq.astype(np.float64)
            y = T.conv2d(rx, rw, rb) if layer.kind == "conv" else rx @ rw + rb
            xq = np.clip(np.floor(y / layer.act.scale + 0.5) + layer.act.zero_point, 0, 255)
            act = layer.act
        elif layer.kind == "relu":
            xq = np.maximum(xq, act.zero_point)
        elif layer.kind == "maxpool":
            xq = T.maxpool2d(xq)
        elif layer.kind == "flatten":
            xq = xq.reshape(-1)
    return act.scale * (xq - act.zero_point), act.scale


def test_uint8_integer_path_matches_float_simulation(u8, frames):
    for f in frames[16:]:
        got = Q._run_uint8(u8, f)[0]
        ref, step = _simulate(u8, f)
        assert np.abs(got - ref).max() <= step


def test_uint8_structure(net, u8):
    kinds = [layer.kind for layer in u8.layers]
    assert "batchnorm" not in kinds
    assert kinds.count("conv") == 5 and kinds.count("dense") == 2
    conv = u8.layers[0]
    assert conv.params[0].dtype == np.uint8 and conv.params[1].dtype == np.int32
    assert u8.input_act == M.QuantParams(1 / 255, 0)
    assert M.model_from_bytes(M.model_to_bytes(u8)).equals(u8)


def test_uint8_tracks_float(net, u8, frames):
    p = Q.predict_batch(u8, frames)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(1), 1, atol=1e-6)
    f = M.run_float(net.layers, net.float_params(), M.prepare_input(net, frames))
    g = Q._run_uint8(u8, frames)
    assert np.abs(g - f).max() < 0.05 * np.ptp(f)


def test_single_and_batched_agree(net, u8, frames):
    for m in (Q.quantize(net, "f16"), Q.quantize(net, "dynamic"), u8):
        batch = Q.predict_batch(m, frames[:4])
        timings = []
        for i in range(4):
            np.testing.assert_array_equal(Q.quantized_forward(m, frames[i], timings), batch[i])
        assert len(timings) == 4 and min(timings) > 0


def test_sizes_shrink(net, u8):
    f32 = net.payload_bytes()
    assert Q.quantize(net, "f16").payload_bytes() / f32 == 0.5
    assert Q.quantize(net, "dynamic").payload_bytes() / f32 <= 0.35
    assert u8.payload_bytes() / f32 <= 0.35
    assert len(M.model_to_bytes(u8)) < len(M.model_to_bytes(Q.quantize(net, "f16")))


# ---------------------------------------------------------------- calibration and errors


def test_calibration_is_deterministic_and_merges(net, frames):
    a = Q.calibrate(net, frames[:8])
    assert a.equals(Q.calibrate(net, frames[:8]))
    b = Q.calibrate(net, frames[8:16])
    whole = Q.calibrate(net, frames[:16])
    assert a.merge(b).equals(whole)
    assert b.merge(a).equals(whole)
    # batching does not change the observed ranges
    assert Q.calibrate(net, frames[:16], batch_size=3).equals(whole)


def test_calibration_indices(net):
    from usgrip.data import Dataset, TEST, TRAIN
    splits = np.array([TRAIN, TEST] * 20, np.uint8)
    ds = Dataset(np.zeros((40, 1, 1), np.uint8), np.zeros(40, np.uint8), split_assignments=splits)
    idx = Q.calibration_indices(ds, 10, 42)
    assert len(idx) == 10 and len(set(idx)) == 10
    assert (splits[idx] == TRAIN).all()
    np.testing.assert_array_equal(idx, Q.calibration_indices(ds, 10, 42))
    assert not np.array_equal(idx, Q.calibration_indices(ds, 10, 43))


def test_double_quantization_rejected(net, u8):
    h = Q.quantize(net, "f16")
    for scheme in ("f16", "dynamic", "uint8"):
        with pytest.raises(Q.QuantizationError):
            Q.quantize(h, scheme, np.zeros((1, 80, 80, 1), np.uint8))
        with pytest.raises(Q.QuantizationError):
            Q.quantize(u8, scheme, np.zeros((1, 80, 80, 1), np.uint8))


def test_quantize_argument_errors(net):
    with pytest.raises(Q.QuantizationError):
        Q.quantize(net, "int4")
    with pytest.raises(Q.QuantizationError):
        Q.quantize(net, "uint8")
    with pytest.raises(Q.QuantizationError):
        Q.calibrate(net, np.zeros((0, 80, 80, 1), np.uint8))


def test_quantized_forward_shape_error(u8):
    with pytest.raises(T.ShapeError):
        Q.quantized_forward(u8, np.zeros((40, 40, 1), np.uint8))
