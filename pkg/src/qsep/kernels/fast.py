"""Vectorized convolution used by the scheduled runtime.

im2col + matmul; integer inputs accumulate in int64, so results are
bit-identical to the naive and streaming datapaths.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..ir import conv_out
from .reference import pad_same


def conv_fast(x: np.ndarray, w: np.ndarray, bias: Optional[np.ndarray] = None,
              stride: int = 1, groups: int = 1, pad_value=0) -> np.ndarray:
    """Same contract as reference.ref_conv."""
    n, h, wd = x.shape
    m, npg, k, _ = w.shape
    acc_dtype = np.int64 if np.issubdtype(x.dtype, np.integer) else np.float64
    xp = pad_same(x.astype(acc_dtype), k, fill=pad_value)
    ho, wo = conv_out(h, k, stride), conv_out(wd, k, stride)
    # (N, ho, wo, K, K) windows
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    wa = w.astype(acc_dtype)
    mpg = m // groups
    out = np.empty((m, ho, wo), dtype=acc_dtype)
    if groups == n and mpg == 1:  # depthwise: no per-group python loop
        out = np.einsum("nhwij,nij->nhw", win, wa[:, 0])
        if bias is not None:
            out += np.asarray(bias, dtype=acc_dtype).reshape(-1, 1, 1)
        return out
    for g in range(groups):
        cols = win[g * npg:(g + 1) * npg].transpose(1, 2, 0, 3, 4) \
            .reshape(ho * wo, npg * k * k)
        wg = wa[g * mpg:(g + 1) * mpg].reshape(mpg, npg * k * k)
        out[g * mpg:(g + 1) * mpg] = (cols @ wg.T).T.reshape(mpg, ho, wo)
    if bias is not None:
        out += np.asarray(bias, dtype=acc_dtype).reshape(-1, 1, 1)
    return out
