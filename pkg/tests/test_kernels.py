import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsep import quantize as Q
from qsep.errors import GraphError, StreamUnderrun
from qsep.ir import Block, LayerDescriptor, TensorBuffer, conv_out
from qsep.kernels import qexec, streams
from qsep.kernels.fast import conv_fast
from qsep.kernels.reference import (float_forward, make_calibration_inputs,
                                    pad_same, ref_conv, ref_conv_shift)
from qsep.kernels.requant import RequantParams


def _rand_case(rng, kind, k=None):
    """Random small quantized conv layer plus an input tensor."""
    k = k if k is not None else int(rng.choice([1, 3] if kind != "pointwise-conv" else [1]))
    stride = int(rng.choice([1, 2])) if kind != "pointwise-conv" else 1
    if kind == "depthwise-conv":
        n = m = g = int(rng.integers(1, 7))
    elif kind == "group-conv":
        g = int(rng.choice([2, 3]))
        n = g * int(rng.integers(1, 4))
        m = g * int(rng.integers(1, 4))
        kind = "normal-conv"
    elif kind == "pointwise-conv":
        n, m, g, k = int(rng.integers(1, 9)), int(rng.integers(1, 9)), 1, 1
    else:
        n, m, g = int(rng.integers(1, 5)), int(rng.integers(1, 5)), 1
    bw = int(rng.choice([4, 8]))
    l = LayerDescriptor(kind, N=n, M=m, K=k, stride=stride, G=g)
    l.weights = TensorBuffer.from_array(
        rng.integers(0, 1 << bw, size=l.weight_shape()).astype(np.uint8),
        "uint8", bw=8)
    l.bias = rng.integers(-50, 50, size=m).astype(np.int32)
    in_spec = Q.make_quant_spec(-float(rng.uniform(0.1, 2)),
                                float(rng.uniform(0.1, 2)), bw)
    w_spec = Q.QuantSpec(rng.uniform(0.01, 0.5, size=m),
                         rng.integers(0, 1 << bw, size=m), bw,
                         granularity="per-channel")
    out_spec = Q.make_quant_spec(-float(rng.uniform(0.1, 2)),
                                 float(rng.uniform(0.1, 2)), bw)
    lq = Q.LayerQuant(in_spec, w_spec, out_spec, None)
    lq.requant = Q.derive_requant(lq)
    l.quant = lq
    h = int(rng.integers(k, k + 5))
    w = int(rng.integers(k, k + 5))
    x = rng.integers(0, 1 << bw, size=(n, h, w)).astype(np.int64)
    return l, x


# -- conv route equivalence --------------------------------------------------

@given(st.integers(0, 10 ** 6))
@settings(max_examples=120, deadline=None)
def test_conv_routes_bit_identical(seed):
    rng = np.random.default_rng(seed)
    kind = rng.choice(["normal-conv", "depthwise-conv", "pointwise-conv",
                       "group-conv"])
    l, x = _rand_case(rng, kind)
    w = qexec.int_weights(l)
    b = l.bias.astype(np.int64)
    y0 = ref_conv(x, w, b, l.stride, l.G)
    y1 = ref_conv_shift(x, w, b, l.stride, l.G)
    y2 = conv_fast(x, w, b, l.stride, l.G)
    np.testing.assert_array_equal(y0, y1)
    np.testing.assert_array_equal(y0, y2)


def test_conv_float_routes_close():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 9, 9))
    w = rng.normal(size=(5, 3, 3, 3))
    b = rng.normal(size=5)
    y0 = ref_conv(x, w, b, 2, 1)
    np.testing.assert_allclose(ref_conv_shift(x, w, b, 2, 1), y0, atol=1e-10)
    np.testing.assert_allclose(conv_fast(x, w, b, 2, 1), y0, atol=1e-10)


def test_ref_conv_shape_checks():
    x = np.zeros((4, 5, 5))
    with pytest.raises(GraphError):
        ref_conv(x, np.zeros((4, 3, 3, 3)), groups=3)
    with pytest.raises(GraphError):
        ref_conv(x, np.zeros((4, 1, 3, 3)), groups=1)


def test_pad_value_used_for_zero_point():
    x = np.full((1, 3, 3), 7, dtype=np.int64)
    w = np.ones((1, 1, 3, 3), dtype=np.int64)
    y = ref_conv(x, w, stride=1, groups=1, pad_value=7)
    assert y[0, 1, 1] == 63 and y[0, 0, 0] == 63
    y0 = ref_conv(x, w, stride=1, groups=1)
    assert y0[0, 0, 0] == 7 * 4


def test_pad_same_border():
    x = np.arange(4).reshape(1, 2, 2)
    p = pad_same(x, 3, fill=9)
    assert p.shape == (1, 4, 4)
    assert p[0, 0, 0] == 9 and p[0, 1, 1] == 0


# -- streaming state machine -------------------------------------------------

def _stream_conv(l, x):
    h, w = x.shape[1], x.shape[2]
    src = streams.tensor_to_stream(x)
    if l.kind == "depthwise-conv":
        gen = streams.stream_conv_dw(src, l, h, w)
    elif l.kind == "pointwise-conv":
        gen = streams.stream_conv_pw(src, l, h, w)
    else:
        gen = streams.stream_conv_normal(src, l, h, w)
    ho, wo = conv_out(h, l.K, l.stride), conv_out(w, l.K, l.stride)
    return streams.stream_to_tensor(gen, l.M, ho, wo)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=100, deadline=None)
def test_stream_conv_matches_reference(seed):
    rng = np.random.default_rng(seed)
    kind = rng.choice(["normal-conv", "depthwise-conv", "pointwise-conv",
                       "group-conv"])
    l, x = _rand_case(rng, kind)
    want = qexec.conv_step(l, x, ref_conv)
    np.testing.assert_array_equal(_stream_conv(l, x), want)


@given(st.integers(0, 10 ** 6), st.integers(1, 9))
@settings(max_examples=60, deadline=None)
def test_pointwise_parallelism_invariant(seed, par):
    rng = np.random.default_rng(seed)
    l, x = _rand_case(rng, "pointwise-conv")
    h, w = x.shape[1], x.shape[2]
    base = _stream_conv(l, x)
    gen = streams.stream_conv_pw(streams.tensor_to_stream(x), l, h, w,
                                 parallelism=par)
    got = streams.stream_to_tensor(gen, l.M, h, w)
    np.testing.assert_array_equal(got, base)


def test_fill_latency_formula():
    rng = np.random.default_rng(3)
    l, x = _rand_case(rng, "depthwise-conv", k=3)
    h, w = x.shape[1], x.shape[2]
    stats = streams.StageStats()
    gen = streams.stream_conv_dw(streams.tensor_to_stream(x), l, h, w, stats)
    next(gen)
    wp = w + l.K - 1
    assert stats.first_output_after == streams.fill_latency(l.K, wp)
    assert stats.first_output_after == (l.K - 1) * wp + l.K


def test_stream_underrun():
    l, x = _rand_case(np.random.default_rng(5), "depthwise-conv", k=3)
    h, w = x.shape[1], x.shape[2]
    short = streams.tensor_to_stream(x[:, :-1])  # one row missing
    gen = streams.stream_conv_dw(short, l, h, w)
    with pytest.raises(StreamUnderrun):
        list(gen)


def test_stream_to_tensor_counts():
    with pytest.raises(StreamUnderrun):
        streams.stream_to_tensor(iter([np.zeros(2)]), 2, 2, 2)
    with pytest.raises(GraphError):
        streams.stream_to_tensor(iter([np.zeros(2)] * 5), 2, 2, 2)


def test_avg_pool_stream_matches_step():
    rng = np.random.default_rng(6)
    for _ in range(20):
        x = rng.integers(0, 256, size=(rng.integers(1, 6), rng.integers(1, 6),
                                       rng.integers(1, 6))).astype(np.int64)
        want = qexec.avg_pool_step(x)
        got = streams.stream_to_tensor(
            streams.avg_pool_stream(streams.tensor_to_stream(x), x.shape[0],
                                    x.shape[1], x.shape[2]),
            x.shape[0], 1, 1)
        np.testing.assert_array_equal(got, want)


def test_residual_stream_matches_add():
    rng = np.random.default_rng(7)
    sa = Q.make_quant_spec(-1.0, 2.0, 4)
    sb = Q.make_quant_spec(-0.5, 3.0, 4)
    so = Q.make_quant_spec(-1.5, 4.0, 4)
    a = rng.integers(0, 16, size=(3, 4, 4)).astype(np.int64)
    b = rng.integers(0, 16, size=(3, 4, 4)).astype(np.int64)
    want = qexec.residual_add(a, sa, b, sb, so)
    gen = streams.residual_add_stream(
        streams.tensor_to_stream(a), streams.tensor_to_stream(b),
        sa, sb, so, 16)
    got = streams.stream_to_tensor(gen, 3, 4, 4)
    np.testing.assert_array_equal(got, want)


def test_se_stream_matches_step(toy_qnet):
    qnet, data = toy_qnet
    se_block = next(b for b in qnet.graph.blocks
                    if any(l.kind == "squeeze-excite" for l in b.layers))
    se = next(l for l in se_block.layers if l.kind == "squeeze-excite")
    rng = np.random.default_rng(8)
    for _ in range(5):
        x = rng.integers(0, 16, size=(se.N, 5, 5)).astype(np.int64)
        want = qexec.se_step(se, x, ref_conv)
        gen = streams.squeeze_excite_stream(
            streams.tensor_to_stream(x), se, 5, 5)
        got = streams.stream_to_tensor(gen, se.N, 5, 5)
        np.testing.assert_array_equal(got, want)


# -- whole-block pipelines ---------------------------------------------------

def _block_sweep(qnet, data, **kw):
    xb = qnet.input_spec.quantize(data[0])
    for block in qnet.graph.blocks:
        want = qexec.run_block(block, xb, conv_fn=ref_conv)
        got = streams.run_block_stream(block, xb, **kw)
        np.testing.assert_array_equal(got, want)
        xb = want


def test_block_stream_single_threaded(toy_qnet):
    qnet, data = toy_qnet
    _block_sweep(qnet, data, pw_parallelism=3)


def test_block_stream_threaded(toy_qnet):
    qnet, data = toy_qnet
    _block_sweep(qnet, data, threaded=True)


def test_block_stream_tiny_channel_capacity(toy_qnet_plain):
    qnet, data = toy_qnet_plain
    _block_sweep(qnet, data, threaded=True, channel_capacity=1)


def test_stream_channel_counters():
    ch = streams.StreamChannel(2)
    ch.push(1)
    ch.push(2)
    ch.close()
    assert list(ch) == [1, 2]
    assert ch.pushed == ch.popped == 2
    with pytest.raises(GraphError):
        streams.StreamChannel(0)


def test_stream_channel_propagates_errors():
    ch = streams.StreamChannel(1)
    ch.fail(StreamUnderrun("boom"))
    with pytest.raises(StreamUnderrun):
        next(iter(ch))


# -- float model -------------------------------------------------------------

def test_float_forward_records_calibration_keys():
    from qsep.zoo import build_toy
    g = Q.fuse_graph_bn(build_toy(seed=4, with_se=True, resolution=16))
    stats = Q.CalibrationStats()
    x = make_calibration_inputs(g, 1, seed=0)[0]
    stats.update(Q.INPUT_KEY, x)
    float_forward(g, x, stats=stats)
    keys = set(stats.mins)
    assert Q.INPUT_KEY in keys
    assert any(k.endswith(".sq") for k in keys)
    assert any(k.endswith(".res") for k in keys)


def test_graph_forward_routes_agree(toy_qnet):
    qnet, data = toy_qnet
    xq = qnet.input_spec.quantize(data[0])
    y0 = qexec.graph_forward_ref(qnet, xq)
    np.testing.assert_array_equal(
        qexec.graph_forward(qnet, xq, conv_fn=conv_fast), y0)
    np.testing.assert_array_equal(
        qexec.graph_forward(qnet, xq, conv_fn=ref_conv_shift), y0)
