import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rnnpool.errors import NumericError, QuantizationError
from rnnpool.executor import run_naive
from rnnpool.graph import Conv2d, FullyConnected, NetworkSpec, RnnPoolLayer, init_weights, lower
from rnnpool.memplan import layerbylayer_peak
from rnnpool.quant import (dequantize, load_quantized, quant_from_bytes, quant_to_bytes,
                           quantize_per_channel, quantize_weights, round_half_away, run_quantized,
                           save_quantized)
from rnnpool.tensor import TensorMap


def quant_weights(g, seed=0):
    return init_weights(g, rng=seed, gate_nonlin="quantSigmoid", update_nonlin="quantTanh")


def test_rounding_is_half_away():
    assert round_half_away([0.5, 1.5, -0.5, -2.5, 2.4]).tolist() == [1, 2, -1, -3, 2]


def test_endpoints_roundtrip_exactly():
    s = 0.125
    x = np.array([[0.0], [255 * s], [17 * s]])
    q = quantize_per_channel(x, axis=-1)
    assert q.data[:, 0].tolist() == [0, 255, 17]
    assert np.array_equal(dequantize(q), x)


def test_constant_channel_is_exact():
    x = np.full((4, 4, 2), 3.7, dtype=np.float32)
    x[..., 1] = -1.25
    q = quantize_per_channel(TensorMap(x), axis=2)
    assert q.scale.tolist() == [1.0, 1.0]
    assert not q.data.any()
    assert np.array_equal(dequantize(q, np.float32), x)


def test_random_map_error_within_half_scale(rng):
    x = rng.standard_normal((8, 8, 4)) * rng.uniform(0.1, 10, 4)
    q = quantize_per_channel(x, axis=2)
    err = np.abs(dequantize(q) - x)
    for c in range(4):
        assert err[..., c].max() <= q.scale[c] / 2 * (1 + 1e-6)
    assert (q.scale > 0).all()


def test_rejects_nan():
    with pytest.raises(NumericError):
        quantize_per_channel(np.array([[np.nan, 1.0]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_roundtrip_bound_and_idempotence(x):
    q = quantize_per_channel(x, axis=1)
    back = dequantize(q)
    assert np.all(np.abs(back - x) <= q.scale.astype(np.float64) / 2 * (1 + 1e-6) + 1e-12)
    again = dequantize(quantize_per_channel(back, axis=1))
    assert np.allclose(again, back, rtol=0, atol=1e-9 * max(1.0, np.abs(back).max()))


def test_serialization(tmp_path, rng):
    q = quantize_per_channel(rng.standard_normal((3, 4, 5)), axis=1)
    buf = quant_to_bytes(q)
    back, off = quant_from_bytes(buf)
    assert off == len(buf)
    assert back.shape == q.shape and back.axis == 1
    assert np.array_equal(back.data, q.data) and np.array_equal(back.scale, q.scale)
    net = NetworkSpec("n", (8, 8, 2), [Conv2d(3, 3, 4, 1, 1), RnnPoolLayer(4, 4, 3, 3, 4)])
    g = lower(net)
    qw = quantize_weights(g, quant_weights(g))
    save_quantized(tmp_path / "w.rpq", qw)
    loaded = load_quantized(tmp_path / "w.rpq")
    assert set(loaded) == set(qw)
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_quantized(tmp_path / "bad")


def test_zero_input_gives_zero_logits():
    net = NetworkSpec("z", (16, 16, 2), [RnnPoolLayer(4, 4, 4, 4, 4), FullyConnected(5)])
    g = lower(net)
    w = init_weights(g, rng=0, zero_bias=True, gate_nonlin="quantSigmoid", update_nonlin="quantTanh")
    out, _ = run_quantized(g, np.zeros((16, 16, 2), np.float32), weights=w)
    ref, _ = run_naive(g, np.zeros((16, 16, 2), np.float32), weights=w)
    assert not np.any(out) and not np.any(ref)


def test_top_index_agreement_on_rnnpool_toy():
    net = NetworkSpec("toy", (16, 16, 3), [RnnPoolLayer(8, 8, 8, 8, 8), FullyConnected(10)])
    g = lower(net)
    w = quant_weights(g, seed=1)
    rng = np.random.default_rng(0)
    agree = 0
    for _ in range(100):
        x = rng.standard_normal((16, 16, 3)).astype(np.float32)
        out, rep = run_quantized(g, x, weights=w)
        ref, _ = run_naive(g, x, weights=w)
        agree += int(np.argmax(out) == np.argmax(ref))
    assert agree >= 95


def test_grid_weights_match_float_bitwise(rng):
    net = NetworkSpec("lin", (6, 6, 2), [Conv2d(3, 3, 3, 1, 1, act="none")])
    g = lower(net)
    w = init_weights(g, rng=0, zero_bias=True)
    for entry in w.values():
        k = rng.integers(0, 256, entry["w"].shape)
        k[0, 0, 0, :], k[0, 1, 0, :] = 0, 255      # every output channel spans the full grid
        entry["w"] = ((k - 128) * 2.0 ** -6).astype(np.float32)
    k = rng.integers(0, 256, (6, 6, 2))
    k[0, 0, :], k[0, 1, :] = 0, 255
    x = (k * 2.0 ** -5).astype(np.float32)
    out, _ = run_quantized(g, x, weights=w)
    ref, _ = run_naive(g, x, weights=w)
    assert np.array_equal(out, ref)


def test_smooth_cells_are_rejected(rng):
    net = NetworkSpec("s", (8, 8, 1), [RnnPoolLayer(4, 4, 2, 2, 4)])
    with pytest.raises(QuantizationError):
        run_quantized(net, rng.standard_normal((8, 8, 1)).astype(np.float32))


def test_divergence_report(rng):
    net = NetworkSpec("d", (16, 16, 2), [Conv2d(3, 3, 4, 1, 1), RnnPoolLayer(4, 4, 4, 4, 4),
                                         FullyConnected(3)])
    g = lower(net)
    _, rep = run_quantized(g, rng.standard_normal((16, 16, 2)).astype(np.float32),
                           weights=quant_weights(g))
    assert len(rep.per_layer) >= 3
    assert 0 <= rep.worst < 0.2
    assert rep.to_dict()["worst"] == rep.worst


def test_int8_mbconv_memory():
    from rnnpool.graph import MBConv
    net = NetworkSpec("face", (80, 60, 32), [Conv2d(3, 3, 32, 1, 1), MBConv(2, 16, 1),
                                             Conv2d(3, 3, 16, 1, 1)])
    rep = layerbylayer_peak(net, "int8")
    assert dict(rep.contributions)["L1"] == 80 * 60 * (32 + 16)
