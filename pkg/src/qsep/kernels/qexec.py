"""Integer execution semantics for quantized layers.

One canonical definition of the per-layer arithmetic, parameterized by the
convolution routine so the monolithic oracle (naive conv) and the scheduled
runtime (vectorized conv) share the requantization plumbing while taking
independent convolution routes. The streaming simulators reimplement the
same arithmetic elementwise.
"""

from __future__ import annotations

import numpy as np

from ..errors import GraphError
from ..ir import Block, LayerDescriptor, NetworkGraph, CONV_KINDS
from ..quantize import QNetModel, QuantSpec
from .requant import approximate_and_clip, rounding_rshift
from .reference import ref_conv

RESIDUAL_SHIFT = 40


def int_weights(l: LayerDescriptor) -> np.ndarray:
    """Stored quantized weights minus their per-channel zero point."""
    q = l.weights.array.astype(np.int64)
    z = np.atleast_1d(l.quant.w_spec.zero_point)
    return q - z.reshape((-1,) + (1,) * (q.ndim - 1))


def conv_step(l: LayerDescriptor, x_q: np.ndarray, conv_fn) -> np.ndarray:
    """Quantized conv: subtract zero points, convolve, requantize-clip."""
    lq = l.quant
    xi = x_q.astype(np.int64) - int(np.ravel(lq.in_spec.zero_point)[0])
    acc = conv_fn(xi, int_weights(l), l.bias.astype(np.int64), l.stride, l.G)
    if lq.requant is None:
        return acc  # raw accumulator output (classifier logits)
    return approximate_and_clip(acc, lq.requant, channel_axis=0)


def dense_step(l: LayerDescriptor, x_q: np.ndarray) -> np.ndarray:
    lq = l.quant
    xi = x_q.reshape(-1).astype(np.int64) - int(np.ravel(lq.in_spec.zero_point)[0])
    w = int_weights(l).reshape(l.M, l.N)
    acc = w @ xi + l.bias.astype(np.int64)
    if lq.requant is not None:
        acc = approximate_and_clip(acc, lq.requant, channel_axis=0)
    return acc.reshape(-1, 1, 1)


def avg_pool_step(x_q: np.ndarray) -> np.ndarray:
    """Integer mean with half-away rounding; keeps the input spec."""
    c = x_q.shape[0]
    flat = x_q.reshape(c, -1).astype(np.int64)
    n = flat.shape[1]
    return ((2 * flat.sum(axis=1) + n) // (2 * n)).reshape(c, 1, 1)


def se_gate(l: LayerDescriptor, x_q: np.ndarray, conv_fn) -> np.ndarray:
    """Per-channel hard-sigmoid gate values in [0, 2^GATE_BITS]."""
    pooled = avg_pool_step(x_q)
    s_q = conv_step(l.se_squeeze, pooled, conv_fn)
    lq = l.se_excite.quant
    si = s_q.astype(np.int64) - int(np.ravel(lq.in_spec.zero_point)[0])
    acc = conv_fn(si, int_weights(l.se_excite),
                  l.se_excite.bias.astype(np.int64), 1, 1)
    return approximate_and_clip(acc, lq.requant, channel_axis=0).reshape(-1)


def se_step(l: LayerDescriptor, x_q: np.ndarray, conv_fn) -> np.ndarray:
    """Gate multiply: requantize (x - z) * gate_q back into the input spec."""
    gate = se_gate(l, x_q, conv_fn)
    lq = l.quant
    z_in = int(np.ravel(lq.in_spec.zero_point)[0])
    prod = (x_q.astype(np.int64) - z_in) * gate.reshape(-1, 1, 1)
    return approximate_and_clip(prod, lq.requant, channel_axis=0)


def residual_multipliers(spec_a: QuantSpec, spec_b: QuantSpec,
                         spec_out: QuantSpec) -> tuple[int, int]:
    """Fixed-point S_a/S_out and S_b/S_out at RESIDUAL_SHIFT bits."""
    s_out = float(np.ravel(spec_out.scale)[0])
    ma = round(float(np.ravel(spec_a.scale)[0]) / s_out * (1 << RESIDUAL_SHIFT))
    mb = round(float(np.ravel(spec_b.scale)[0]) / s_out * (1 << RESIDUAL_SHIFT))
    return ma, mb


def residual_add(a_q: np.ndarray, spec_a: QuantSpec, b_q: np.ndarray,
                 spec_b: QuantSpec, spec_out: QuantSpec) -> np.ndarray:
    """Dequantize-add-requantize with saturation; commutative."""
    if a_q.shape != b_q.shape:
        raise GraphError("residual operands must have identical shapes")
    ma, mb = residual_multipliers(spec_a, spec_b, spec_out)
    za = int(np.ravel(spec_a.zero_point)[0])
    zb = int(np.ravel(spec_b.zero_point)[0])
    zc = int(np.ravel(spec_out.zero_point)[0])
    v = (a_q.astype(np.int64) - za) * ma + (b_q.astype(np.int64) - zb) * mb
    q = rounding_rshift(v, RESIDUAL_SHIFT) + zc
    return np.clip(q, 0, (1 << spec_out.bw) - 1).astype(np.int64)


def block_input_spec(block: Block) -> QuantSpec:
    for l in block.layers:
        if l.quant is not None:
            return l.quant.in_spec
    raise GraphError("block has no quantized layer")


def block_output_spec(block: Block, fallback: QuantSpec) -> QuantSpec:
    if block.residual and block.res_quant is not None:
        return block.res_quant
    spec = fallback
    for l in block.layers:
        if l.quant is not None and l.quant.out_spec is not None:
            spec = l.quant.out_spec
    return spec


def run_block(block: Block, x_q: np.ndarray, conv_fn=None) -> np.ndarray:
    """Execute one block of an already-quantized graph."""
    from .fast import conv_fast

    conv = conv_fn or conv_fast
    block_in = x_q
    x = x_q
    for l in block.layers:
        if l.kind in CONV_KINDS:
            x = conv_step(l, x, conv)
        elif l.kind == "dense":
            x = dense_step(l, x)
        elif l.kind == "avg-pool":
            x = avg_pool_step(x)
        elif l.kind == "squeeze-excite":
            x = se_step(l, x, conv)
        elif l.kind == "residual-add":
            pass
        else:
            raise GraphError(f"unexpected {l.kind} in quantized block")
    if block.residual:
        spec_a = block_input_spec(block)
        spec_b = block_output_spec_no_res(block)
        x = residual_add(block_in, spec_a, x, spec_b, block.res_quant)
    return x


def block_output_spec_no_res(block: Block) -> QuantSpec:
    spec = None
    for l in block.layers:
        if l.quant is not None and l.quant.out_spec is not None:
            spec = l.quant.out_spec
    if spec is None:
        raise GraphError("block has no conv output spec")
    return spec


def graph_forward(qnet: QNetModel, x_q: np.ndarray, conv_fn=None) -> np.ndarray:
    """Monolithic layer-by-layer execution of the whole QNet."""
    x = x_q
    for block in qnet.graph.blocks:
        x = run_block(block, x, conv_fn)
    return x


def graph_forward_ref(qnet: QNetModel, x_q: np.ndarray) -> np.ndarray:
    """The monolithic oracle: naive reference convolution throughout."""
    return graph_forward(qnet, x_q, conv_fn=ref_conv)
