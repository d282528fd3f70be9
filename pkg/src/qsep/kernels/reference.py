"""Naive reference kernels: the module's ground truth.

ref_conv walks output positions one by one and reduces each receptive
field directly; it is deliberately simple and shares no code with the
vectorized or streaming datapaths it anchors.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import GraphError
from ..ir import NetworkGraph, CONV_KINDS, conv_out
from ..quantize import relu6, hard_sigmoid, INPUT_KEY


def pad_same(x: np.ndarray, k: int, fill=0):
    """Symmetric zero border of (k-1)//2 on the two spatial axes."""
    p = (k - 1) // 2
    if p == 0:
        return x
    c, h, w = x.shape
    out = np.full((c, h + 2 * p, w + 2 * p), fill, dtype=x.dtype)
    out[:, p:p + h, p:p + w] = x
    return out


def ref_conv(x: np.ndarray, w: np.ndarray, bias: Optional[np.ndarray] = None,
             stride: int = 1, groups: int = 1, pad_value=0) -> np.ndarray:
    """Direct convolution, one output position at a time.

    x: (N, H, W); w: (M, N/G, K, K). Returns (M, H_out, W_out) with the
    dtype widened to int64 for integer inputs, float64 otherwise.
    Depthwise is groups == N, pointwise is K == 1.
    """
    n, h, wd = x.shape
    m, npg, k, _ = w.shape
    if n % groups or m % groups:
        raise GraphError("channel counts must divide the group count")
    if npg != n // groups:
        raise GraphError(f"weight shape {w.shape} inconsistent with "
                         f"N={n}, G={groups}")
    acc_dtype = np.int64 if np.issubdtype(x.dtype, np.integer) else np.float64
    xp = pad_same(x.astype(acc_dtype), k, fill=pad_value)
    wa = w.astype(acc_dtype)
    ho, wo = conv_out(h, k, stride), conv_out(wd, k, stride)
    out = np.zeros((m, ho, wo), dtype=acc_dtype)
    mpg = m // groups
    for oy in range(ho):
        for ox in range(wo):
            patch = xp[:, oy * stride:oy * stride + k,
                       ox * stride:ox * stride + k]
            for g in range(groups):
                pg = patch[g * npg:(g + 1) * npg]
                wg = wa[g * mpg:(g + 1) * mpg]
                out[g * mpg:(g + 1) * mpg, oy, ox] = np.tensordot(
                    wg, pg, axes=([1, 2, 3], [0, 1, 2]))
    if bias is not None:
        out += np.asarray(bias, dtype=acc_dtype).reshape(-1, 1, 1)
    return out


def ref_conv_shift(x: np.ndarray, w: np.ndarray,
                   bias: Optional[np.ndarray] = None, stride: int = 1,
                   groups: int = 1, pad_value=0) -> np.ndarray:
    """Shift-and-add direct convolution.

    Loops over the K*K kernel offsets instead of output positions; an
    independent second route used where the per-position loop is too slow.
    """
    n, h, wd = x.shape
    m, npg, k, _ = w.shape
    acc_dtype = np.int64 if np.issubdtype(x.dtype, np.integer) else np.float64
    xp = pad_same(x.astype(acc_dtype), k, fill=pad_value)
    wa = w.astype(acc_dtype)
    ho, wo = conv_out(h, k, stride), conv_out(wd, k, stride)
    out = np.zeros((m, ho, wo), dtype=acc_dtype)
    mpg = m // groups
    for g in range(groups):
        xg = xp[g * npg:(g + 1) * npg]
        wg = wa[g * mpg:(g + 1) * mpg]
        for ky in range(k):
            for kx in range(k):
                plane = xg[:, ky:ky + (ho - 1) * stride + 1:stride,
                           kx:kx + (wo - 1) * stride + 1:stride]
                out[g * mpg:(g + 1) * mpg] += np.tensordot(
                    wg[:, :, ky, kx], plane, axes=([1], [0]))
    if bias is not None:
        out += np.asarray(bias, dtype=acc_dtype).reshape(-1, 1, 1)
    return out


def naive_channel_mean(x: np.ndarray) -> np.ndarray:
    """Float per-channel spatial mean."""
    return x.reshape(x.shape[0], -1).mean(axis=1)


# -- float functional model --------------------------------------------------

def float_forward(g: NetworkGraph, x: np.ndarray, stats=None,
                  conv_fn=None) -> np.ndarray:
    """Run the float model (batch-norm fused or not) on one input.

    Records per-layer post-activation ranges into `stats` when given;
    keys match the calibration convention.
    """
    from .fast import conv_fast

    conv = conv_fn or conv_fast
    x = np.asarray(x, dtype=np.float64)
    for bi, block in enumerate(g.blocks):
        block_in = x
        i = 0
        while i < len(block.layers):
            l = block.layers[i]
            key = f"b{bi}.l{i}"
            if l.kind in CONV_KINDS:
                x = conv(x, l.weights.array.astype(np.float64),
                         l.bias, l.stride, l.G)
                if l.bn is not None:
                    v = 1.0 / np.sqrt(l.bn.var.astype(np.float64) + l.bn.eps)
                    x = (l.bn.gamma * v).reshape(-1, 1, 1) * \
                        (x - l.bn.mean.reshape(-1, 1, 1)) + \
                        l.bn.beta.reshape(-1, 1, 1)
                if i + 1 < len(block.layers) and \
                        block.layers[i + 1].kind == "relu6":
                    x = relu6(x)
                    i += 1
                if stats is not None:
                    stats.update(key, x)
            elif l.kind == "batch-norm":
                v = 1.0 / np.sqrt(l.bn.var.astype(np.float64) + l.bn.eps)
                x = (l.bn.gamma * v).reshape(-1, 1, 1) * \
                    (x - l.bn.mean.reshape(-1, 1, 1)) + \
                    l.bn.beta.reshape(-1, 1, 1)
                if stats is not None:
                    stats.update(key, x)
            elif l.kind == "relu6":
                x = relu6(x)
                if stats is not None:
                    stats.update(key, x)
            elif l.kind == "avg-pool":
                x = naive_channel_mean(x).reshape(-1, 1, 1)
            elif l.kind == "squeeze-excite":
                x = float_squeeze_excite(l, x, stats, key)
            elif l.kind == "dense":
                v = x.reshape(-1)
                x = (l.weights.array.reshape(l.M, l.N) @ v)
                if l.bias is not None:
                    x = x + l.bias
                x = x.reshape(-1, 1, 1)
            elif l.kind == "residual-add":
                pass  # handled via the block residual flag
            elif l.kind == "hard-sigmoid":
                x = hard_sigmoid(x)
            i += 1
        if block.residual:
            x = x + block_in
            if stats is not None:
                stats.update(f"b{bi}.res", x)
    return x


def float_squeeze_excite(l, x, stats=None, key=""):
    pooled = naive_channel_mean(x)
    sq = l.se_squeeze
    s = sq.weights.array.reshape(sq.M, sq.N) @ pooled
    if sq.bias is not None:
        s = s + sq.bias
    s = relu6(s)
    if stats is not None:
        stats.update(key + ".sq", s.reshape(-1, 1, 1))
    ex = l.se_excite
    e = ex.weights.array.reshape(ex.M, ex.N) @ s
    if ex.bias is not None:
        e = e + ex.bias
    gate = hard_sigmoid(e)
    return x * gate.reshape(-1, 1, 1)


def make_calibration_inputs(g: NetworkGraph, count: int, seed: int,
                            resolution: Optional[int] = None):
    """Deterministic synthetic calibration set in [0, 1)."""
    rng = np.random.default_rng(seed)
    h = resolution or g.input_resolution
    return [rng.random((g.input_channels, h, h)) for _ in range(count)]
