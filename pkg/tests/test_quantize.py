import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsep import quantize as Q
from qsep.errors import GraphError, QuantError
from qsep.ir import BatchNormParams, LayerDescriptor, TensorBuffer
from qsep.kernels import qexec
from qsep.kernels.fast import conv_fast
from qsep.kernels.requant import (RequantParams, accumulator_bound,
                                  approximate_and_clip,
                                  check_accumulator_budget,
                                  quantize_multiplier, requant_exact,
                                  round_half_away, rounding_rshift)
from qsep.zoo import build_toy


# -- quant specs -------------------------------------------------------------

@given(lo=st.floats(-100.0, -1e-3), hi=st.floats(1e-3, 100.0),
       bw=st.sampled_from([2, 3, 4, 6, 8]))
@settings(max_examples=200)
def test_roundtrip_error_bound(lo, hi, bw):
    spec = Q.make_quant_spec(lo, hi, bw)
    xs = np.linspace(lo, hi, 257)
    err = np.abs(spec.dequantize(spec.quantize(xs)) - xs)
    assert err.max() <= float(spec.scale) / 2 + 1e-9


@given(lo=st.floats(-50.0, -0.01), hi=st.floats(0.01, 50.0),
       bw=st.sampled_from([3, 4, 6, 8]))
@settings(max_examples=200)
def test_asymmetric_endpoints_exact(lo, hi, bw):
    spec = Q.make_quant_spec(lo, hi, bw)
    assert spec.quantize(lo) == 0
    assert spec.quantize(hi) == (1 << bw) - 1


def test_zero_exactly_representable():
    spec = Q.make_quant_spec(-1.7, 3.3, 4)
    z = int(spec.zero_point)
    assert spec.dequantize(z) == 0.0


def test_degenerate_range_widens():
    spec = Q.make_quant_spec(2.0, 2.0, 4)
    assert float(spec.scale) > 0
    q = spec.quantize(2.0)
    assert abs(float(spec.dequantize(q)) - 2.0) <= float(spec.scale)


def test_symmetric_mode():
    spec = Q.make_quant_spec(-3.0, 2.0, 4, mode="symmetric")
    assert int(np.ravel(spec.zero_point)[0]) == 0


def test_spec_validation():
    with pytest.raises(QuantError):
        Q.make_quant_spec(1.0, -1.0, 4)
    with pytest.raises(QuantError):
        Q.make_quant_spec(0.0, 1.0, 1)
    with pytest.raises(QuantError):
        Q.QuantSpec(-1.0, 0, 4)


def test_quantize_tensor_saturates():
    spec = Q.make_quant_spec(0.0, 6.0, 4)
    t = TensorBuffer.from_array(np.array([-5.0, 0.0, 3.0, 99.0],
                                         dtype=np.float32))
    q = Q.quantize_tensor(t, spec)
    assert q.data.min() >= 0 and q.data.max() <= 15
    assert q.data[0] == 0 and q.data[3] == 15


def test_weight_spec_per_channel():
    w = np.stack([np.full((2, 3, 3), s) for s in (0.1, 1.0, 10.0)])
    spec = Q.weight_spec(w, 4)
    assert spec.granularity == "per-channel"
    assert spec.scale.shape == (3,)
    assert spec.scale[2] > spec.scale[0]


def test_spec_doc_roundtrip():
    spec = Q.make_quant_spec(-1.0, 5.0, 6)
    spec2 = Q.QuantSpec.from_doc(spec.to_doc())
    assert float(spec2.scale) == float(spec.scale)
    assert int(spec2.zero_point) == int(spec.zero_point)
    assert spec2.bw == spec.bw and spec2.clip_range == spec.clip_range


# -- activations -------------------------------------------------------------

def test_relu6_and_hard_sigmoid():
    x = np.array([-10.0, -3.0, 0.0, 3.0, 10.0])
    np.testing.assert_array_equal(Q.relu6(x), [0, 0, 0, 3, 6])
    np.testing.assert_allclose(Q.hard_sigmoid(x), [0, 0, 0.5, 1, 1])


# -- batch-norm fusion -------------------------------------------------------

def _random_conv_bn(rng, n=4, m=6, k=3):
    conv = LayerDescriptor("normal-conv", N=n, M=m, K=k)
    conv.weights = TensorBuffer.from_array(
        rng.normal(size=(m, n, k, k)).astype(np.float32))
    bn = LayerDescriptor("batch-norm", N=m, M=m)
    bn.bn = BatchNormParams(
        gamma=rng.uniform(0.5, 1.5, m).astype(np.float32),
        beta=rng.normal(size=m).astype(np.float32),
        mean=rng.normal(size=m).astype(np.float32),
        var=rng.uniform(0.2, 2.0, m).astype(np.float32))
    return conv, bn


def test_bn_fusion_matches_composition():
    rng = np.random.default_rng(0)
    for _ in range(25):
        conv, bn = _random_conv_bn(rng)
        fused = Q.fuse_batch_norm(conv, bn)
        x = rng.normal(size=(conv.N, 7, 7))
        y0 = conv_fast(x, conv.weights.array.astype(np.float64))
        v = 1.0 / np.sqrt(bn.bn.var.astype(np.float64) + bn.bn.eps)
        y0 = (bn.bn.gamma * v).reshape(-1, 1, 1) * \
            (y0 - bn.bn.mean.reshape(-1, 1, 1)) + bn.bn.beta.reshape(-1, 1, 1)
        y1 = conv_fast(x, fused.weights.array.astype(np.float64), fused.bias)
        assert np.abs(y0 - y1).max() < 1e-4


def test_bn_fusion_errors():
    rng = np.random.default_rng(1)
    conv, bn = _random_conv_bn(rng)
    bn.bn.var = np.full(conv.M, -1.0, dtype=np.float32)
    with pytest.raises(GraphError):
        Q.fuse_batch_norm(conv, bn)
    conv2, _ = _random_conv_bn(rng, m=3)
    with pytest.raises(GraphError):
        Q.fuse_batch_norm(conv2, _random_conv_bn(rng, m=5)[1])


def test_fuse_graph_bn_structure():
    g = build_toy(seed=3)
    fused = Q.fuse_graph_bn(g)
    assert all(l.kind != "batch-norm" for l in fused.layers())
    for l in fused.weighted_layers():
        assert l.bias is not None


# -- fixed-point requantization ----------------------------------------------

@given(st.integers(-2**40, 2**40), st.integers(1, 40))
@settings(max_examples=300)
def test_rounding_rshift_is_half_away(v, s):
    expect = int(round_half_away(v / 2.0 ** s))
    assert int(rounding_rshift(v, s)) == expect


@given(st.floats(1e-8, 100.0))
@settings(max_examples=300)
def test_quantize_multiplier_precision(r):
    m, s = quantize_multiplier(r)
    assert abs(m * 2.0 ** -s - r) <= r * 2.0 ** -29


@given(st.lists(st.integers(-2**24, 2**24), min_size=1, max_size=8),
       st.floats(1e-5, 0.5), st.integers(0, 15),
       st.sampled_from([4, 6, 8]))
@settings(max_examples=500)
def test_requant_within_one_lsb_of_real(accs, r, zp, bw):
    acc = np.array(accs, dtype=np.int64)
    params = RequantParams.from_scales([r] * len(accs), zp, bw)
    got = approximate_and_clip(acc, params)
    want = requant_exact(acc, [r] * len(accs), zp, bw)
    assert np.abs(got - want).max() <= 1


def test_requant_multiplier_validation():
    with pytest.raises(QuantError):
        quantize_multiplier(0.0)
    with pytest.raises(QuantError):
        quantize_multiplier(2.0 ** 40)


def test_accumulator_budget():
    assert accumulator_bound(1, 8, 8) == 255 * 255
    check_accumulator_budget(512, 8, 4)
    with pytest.raises(QuantError):
        check_accumulator_budget(10 ** 6, 8, 8)


# -- gate lowering -----------------------------------------------------------

def test_gate_saturated_is_identity():
    in_spec = Q.make_quant_spec(-1.0, 5.0, 4)
    gate_spec = Q.QuantSpec(1.0 / 256, 0, 8)
    lq = Q.LayerQuant(in_spec, gate_spec, in_spec, None)
    rp = Q.derive_requant(lq)
    z = int(in_spec.zero_point)
    x = np.arange(0, 16, dtype=np.int64)
    out = approximate_and_clip((x - z) * 256, rp)
    np.testing.assert_array_equal(out, x)
    out0 = approximate_and_clip((x - z) * 0, rp)
    np.testing.assert_array_equal(out0, np.full_like(x, z))


def test_gate_range_clamp():
    # gate accumulators far beyond the hinge saturate at exactly 2^8
    in_spec = Q.make_quant_spec(0.0, 6.0, 4)
    w_spec = Q.make_quant_spec(-1.0, 1.0, 4)
    lq = Q.LayerQuant(in_spec, w_spec, None, None, gate=True)
    rp = Q.derive_requant(lq)
    assert rp.qmax == 256 and rp.zero_point == 128
    big = np.array([10 ** 7, -10 ** 7], dtype=np.int64)
    out = approximate_and_clip(big, rp)
    np.testing.assert_array_equal(out, [256, 0])


# -- residual add ------------------------------------------------------------

def test_residual_add_commutative_and_exact():
    rng = np.random.default_rng(4)
    sa = Q.make_quant_spec(-1.0, 3.0, 4)
    sb = Q.make_quant_spec(-2.0, 2.0, 4)
    so = Q.make_quant_spec(-3.0, 5.0, 4)
    a = rng.integers(0, 16, size=(3, 5, 5))
    b = rng.integers(0, 16, size=(3, 5, 5))
    ab = qexec.residual_add(a, sa, b, sb, so)
    ba = qexec.residual_add(b, sb, a, sa, so)
    np.testing.assert_array_equal(ab, ba)
    real = so.quantize(sa.dequantize(a) + sb.dequantize(b))
    assert np.abs(ab - real).max() <= 1
    with pytest.raises(GraphError):
        qexec.residual_add(a, sa, b[:, :2], sb, so)


# -- calibration and QNet emission -------------------------------------------

def test_calibration_stats():
    s1, s2 = Q.CalibrationStats(), Q.CalibrationStats()
    s1.update("k", np.array([[1.0, 2.0]]))
    s1.update("k", np.array([[0.0, 5.0]]))
    assert s1.layer_range("k") == (0.0, 5.0)
    s2.update("k", np.array([[-1.0, 1.0]]))
    merged = s1.merge(s2)
    assert merged.layer_range("k") == (-1.0, 5.0)
    s3 = Q.CalibrationStats.from_doc(merged.to_doc())
    assert s3.layer_range("k") == (-1.0, 5.0)
    with pytest.raises(QuantError):
        s1.update("nan", np.array([[np.nan]]))


def test_calibrate_empty_dataset():
    g = Q.fuse_graph_bn(build_toy(seed=0))
    with pytest.raises(QuantError):
        Q.calibrate(g, [])


def test_fuse_activation_structure(toy_qnet):
    qnet, _ = toy_qnet
    qnet.validate()
    kinds = [l.kind for l in qnet.graph.layers()]
    assert "relu6" not in kinds and "batch-norm" not in kinds
    dense = [l for l in qnet.graph.layers() if l.kind == "dense"][0]
    assert dense.quant.out_spec is None  # raw logits
    res_blocks = [b for b in qnet.graph.blocks if b.residual]
    assert res_blocks and all(b.res_quant is not None for b in res_blocks)
    # relu6-fed convs clamp inside [0, 6]
    for l in qnet.graph.layers():
        if l.kind == "depthwise-conv":
            lo, hi = l.quant.out_spec.clip_range
            assert lo >= 0.0 and hi <= 6.0


def test_quantize_requires_fused_bn():
    g = build_toy(seed=0)
    stats = Q.calibrate(Q.fuse_graph_bn(g),
                        [np.zeros((3, 16, 16)) + 0.5])
    with pytest.raises(GraphError):
        Q.fuse_activation(g, stats, bw=4)  # graph still has batch-norm
    with pytest.raises(QuantError):
        Q.fuse_activation(Q.fuse_graph_bn(g), Q.CalibrationStats(), bw=4)


def test_quantized_accuracy_tracks_float(toy_qnet):
    qnet, data = toy_qnet
    g = Q.fuse_graph_bn(build_toy(seed=1, with_se=True, resolution=16))
    from qsep.kernels.reference import float_forward
    agree = 0
    for x in data:
        yf = float_forward(g, x)
        yq = qexec.graph_forward(qnet, qnet.input_spec.quantize(x))
        agree += int(np.argmax(yf) == np.argmax(yq))
    assert agree >= len(data) - 1
