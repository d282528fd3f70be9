"""Fixed-point requantization: approximate (round) and clip.

The real-valued rescale factor r = S_in * S_w / S_out is realized as a
32-bit mantissa with a right shift: r ~= m * 2^-s, m in [2^30, 2^31).
Rounding is half-away-from-zero everywhere, applied in pure integer
arithmetic so results are reproducible bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import QuantError

MANTISSA_BITS = 31


def round_half_away(x):
    """Round half away from zero (scalar or ndarray, float input)."""
    x = np.asarray(x)
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    if out.ndim == 0:
        return float(out)
    return out


def quantize_multiplier(r: float) -> tuple[int, int]:
    """Split a positive real multiplier into (mantissa, right_shift)."""
    if r <= 0:
        raise QuantError(f"requant multiplier must be positive, got {r}")
    frac, exp = math.frexp(r)  # r = frac * 2^exp, frac in [0.5, 1)
    mantissa = round(frac * (1 << MANTISSA_BITS))
    if mantissa == (1 << MANTISSA_BITS):
        mantissa >>= 1
        exp += 1
    shift = MANTISSA_BITS - exp
    if shift < 1:
        raise QuantError(f"requant multiplier too large: {r}")
    return mantissa, shift


def rounding_rshift(v, shift):
    """v * 2^-shift with half-away-from-zero rounding, integer exact."""
    v = np.asarray(v, dtype=np.int64)
    shift = np.asarray(shift, dtype=np.int64)
    half = np.int64(1) << (shift - 1)
    mag = (np.abs(v) + half) >> shift
    return np.where(v < 0, -mag, mag)


@dataclass
class RequantParams:
    """Per-output-channel rescale into the next quantized domain."""

    mantissa: np.ndarray  # int64 (M,)
    shift: np.ndarray     # int64 (M,)
    zero_point: int
    bw: int
    qmax: int = -1  # clamp ceiling; defaults to the full unsigned domain

    def __post_init__(self):
        if self.qmax < 0:
            self.qmax = (1 << self.bw) - 1

    @classmethod
    def from_scales(cls, multipliers, zero_point: int, bw: int,
                    qmax: int = -1) -> "RequantParams":
        ms, ss = [], []
        for r in np.atleast_1d(np.asarray(multipliers, dtype=float)):
            m, s = quantize_multiplier(float(r))
            ms.append(m)
            ss.append(s)
        return cls(np.array(ms, dtype=np.int64), np.array(ss, dtype=np.int64),
                   int(zero_point), int(bw), qmax)

    def real_multipliers(self) -> np.ndarray:
        return self.mantissa.astype(float) * np.ldexp(1.0, -self.shift)


def approximate_and_clip(acc, params: RequantParams, channel_axis: int = 0):
    """Rescale accumulators into [0, 2^BW - 1].

    acc is int64 with output channels along channel_axis; the clamp also
    realizes the fused activation (saturation at the top of the domain).
    """
    acc = np.asarray(acc, dtype=np.int64)
    shape = [1] * acc.ndim
    if acc.ndim:
        shape[channel_axis] = -1
    m = self_broadcast(params.mantissa, shape, acc.ndim)
    s = self_broadcast(params.shift, shape, acc.ndim)
    q = rounding_rshift(acc * m, s) + params.zero_point
    return np.clip(q, 0, params.qmax).astype(np.int64)


def self_broadcast(v, shape, ndim):
    v = np.asarray(v)
    if v.size == 1 or ndim == 0:
        return v.reshape(()) if ndim == 0 else v.reshape([1] * ndim)
    return v.reshape(shape)


def requant_exact(acc, multipliers, zero_point: int, bw: int,
                  channel_axis: int = 0):
    """Real-arithmetic requantization oracle (float path, no fixed point)."""
    acc = np.asarray(acc, dtype=np.float64)
    r = np.atleast_1d(np.asarray(multipliers, dtype=float))
    shape = [1] * acc.ndim
    if acc.ndim:
        shape[channel_axis] = -1
    r = self_broadcast(r, shape, acc.ndim)
    q = round_half_away(acc * r) + zero_point
    return np.clip(q, 0, (1 << bw) - 1).astype(np.int64)


def accumulator_bound(n_taps: int, in_bw: int, w_bw: int) -> int:
    """Worst-case |accumulator| for n_taps products of the given widths."""
    return n_taps * ((1 << in_bw) - 1) * ((1 << w_bw) - 1)


def check_accumulator_budget(n_taps: int, in_bw: int, w_bw: int,
                             acc_bits: int = 32) -> None:
    bound = accumulator_bound(n_taps, in_bw, w_bw)
    if bound >= 1 << (acc_bits - 1):
        raise QuantError(
            f"accumulator overflow: worst case {bound} needs more than "
            f"{acc_bits} signed bits")
