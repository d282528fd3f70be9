"""Streaming datapath simulators.

Each operator is a generator consuming channel vectors (one (C,) element
per spatial position, row-major) and yielding its outputs as soon as the
line buffer / scratchpad holds enough data. These are the bit-exact models
of the hardware pipelines; the naive kernels in reference.py are their
oracles.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from ..errors import GraphError, StreamUnderrun
from ..ir import Block, LayerDescriptor, conv_out, CONV_KINDS
from ..quantize import QuantSpec
from .requant import approximate_and_clip, rounding_rshift
from . import qexec


@dataclass
class StageStats:
    elements_in: int = 0
    elements_out: int = 0
    first_output_after: Optional[int] = None

    def mark_output(self):
        if self.first_output_after is None:
            self.first_output_after = self.elements_in
        self.elements_out += 1


def fill_latency(k: int, padded_width: int) -> int:
    """Padded elements consumed before the first window completes."""
    return (k - 1) * padded_width + k


class StreamChannel:
    """Bounded FIFO between pipeline stages (thread-safe)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise GraphError("channel capacity must be >= 1")
        self.capacity = capacity
        self.pushed = 0
        self.popped = 0
        self._q = deque()
        self._cond = threading.Condition()
        self._closed = False
        self._error = None

    def push(self, item):
        with self._cond:
            while len(self._q) >= self.capacity:
                self._cond.wait()
            self._q.append(item)
            self.pushed += 1
            self._cond.notify_all()

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def fail(self, exc):
        with self._cond:
            self._error = exc
            self._closed = True
            self._cond.notify_all()

    def __iter__(self):
        return self

    def __next__(self):
        with self._cond:
            while not self._q and not self._closed:
                self._cond.wait()
            if self._q:
                item = self._q.popleft()
                self.popped += 1
                self._cond.notify_all()
                return item
            if self._error is not None:
                raise self._error
            raise StopIteration


def tensor_to_stream(x: np.ndarray) -> Iterator[np.ndarray]:
    """(C, H, W) tensor to row-major stream of (C,) elements."""
    c = x.shape[0]
    flat = np.ascontiguousarray(x.reshape(c, -1).T)
    for row in flat:
        yield row


def stream_to_tensor(elems, c: int, h: int, w: int) -> np.ndarray:
    out = np.empty((h * w, c), dtype=np.int64)
    n = 0
    for e in elems:
        if n >= h * w:
            raise GraphError("stream produced more elements than expected")
        out[n] = e
        n += 1
    if n != h * w:
        raise StreamUnderrun(f"expected {h * w} elements, got {n}")
    return out.T.reshape(c, h, w)


def pad_stream(elems, h: int, w: int, k: int, fill_value: int, c: int):
    """Inject the same-padding border at the producer boundary."""
    p = (k - 1) // 2
    if p == 0:
        yield from elems
        return
    border = np.full(c, fill_value, dtype=np.int64)
    for row in range(h + 2 * p):
        inside_row = p <= row < p + h
        for col in range(w + 2 * p):
            if inside_row and p <= col < p + w:
                yield _next_element(elems)
            else:
                yield border


def _next_element(elems):
    try:
        return np.asarray(next(elems), dtype=np.int64)
    except StopIteration:
        raise StreamUnderrun("producer ended early") from None


def sliding_windows(elems, hp: int, wp: int, c: int, k: int, stride: int,
                    stats: Optional[StageStats] = None):
    """Line-buffer + window state machine.

    Ring of K rows x Wp columns; per step the window shifts left and the
    fresh column is copied in from the line buffer, whose bottom element is
    the element just pushed from the stream. Yields (oy, ox, window) with
    window shaped (K, K, C); oy/ox are unstrided padded coordinates.
    """
    ring = np.zeros((k, wp, c), dtype=np.int64)
    window = np.zeros((k, k, c), dtype=np.int64)
    total = hp * wp
    for idx in range(total):
        e = _next_element(elems)
        if stats is not None:
            stats.elements_in += 1
        r, col = divmod(idx, wp)
        ring[r % k, col] = e
        if r < k - 1:
            continue
        # shift-left, then copy the current column out of the line buffer
        window[:, :k - 1] = window[:, 1:]
        rows = [(r - k + 1 + i) % k for i in range(k)]
        window[:, k - 1] = ring[rows, col]
        oy, ox = r - k + 1, col - k + 1
        if ox >= 0 and oy % stride == 0 and ox % stride == 0:
            yield oy // stride, ox // stride, window


def stream_conv_dw(elems, l: LayerDescriptor, h: int, w: int,
                   stats: Optional[StageStats] = None):
    """Streaming depthwise conv + requantization, fused activation clamp."""
    lq = l.quant
    z_in = int(np.ravel(lq.in_spec.zero_point)[0])
    w_int = qexec.int_weights(l)[:, 0]  # (C, K, K)
    bias = l.bias.astype(np.int64)
    p = (l.K - 1) // 2
    hp, wp = h + 2 * p, w + 2 * p
    padded = pad_stream(elems, h, w, l.K, z_in, l.N)
    stats = stats if stats is not None else StageStats()
    for oy, ox, window in sliding_windows(padded, hp, wp, l.N, l.K,
                                          l.stride, stats):
        xi = window.astype(np.int64) - z_in
        acc = np.einsum("ijc,cij->c", xi, w_int) + bias
        stats.mark_output()
        yield approximate_and_clip(acc, lq.requant)


def stream_conv_normal(elems, l: LayerDescriptor, h: int, w: int,
                       stats: Optional[StageStats] = None):
    """Streaming normal/group conv: window MACs plus adder-tree reduce."""
    lq = l.quant
    z_in = int(np.ravel(lq.in_spec.zero_point)[0])
    w_int = qexec.int_weights(l)  # (M, N/G, K, K)
    bias = l.bias.astype(np.int64)
    p = (l.K - 1) // 2
    hp, wp = h + 2 * p, w + 2 * p
    padded = pad_stream(elems, h, w, l.K, z_in, l.N)
    stats = stats if stats is not None else StageStats()
    npg, mpg = l.N // l.G, l.M // l.G
    for oy, ox, window in sliding_windows(padded, hp, wp, l.N, l.K,
                                          l.stride, stats):
        xi = window.astype(np.int64) - z_in  # (K, K, N)
        acc = np.empty(l.M, dtype=np.int64)
        for g in range(l.G):
            acc[g * mpg:(g + 1) * mpg] = np.tensordot(
                w_int[g * mpg:(g + 1) * mpg],
                xi[:, :, g * npg:(g + 1) * npg],
                axes=([2, 3, 1], [0, 1, 2]))
        acc += bias
        stats.mark_output()
        yield approximate_and_clip(acc, lq.requant)


def stream_conv_pw(elems, l: LayerDescriptor, h: int, w: int,
                   parallelism: int = 0,
                   stats: Optional[StageStats] = None):
    """Streaming pointwise conv.

    One output pixel needs the whole channel vector of its position; the
    MAC runs in lanes of `parallelism` input channels with a remainder
    pass for the tail (tail lanes are never zero-padded).
    """
    lq = l.quant
    z_in = int(np.ravel(lq.in_spec.zero_point)[0])
    w_int = qexec.int_weights(l).reshape(l.M, l.N)
    bias = l.bias.astype(np.int64)
    par = parallelism if parallelism > 0 else l.N
    stats = stats if stats is not None else StageStats()
    if l.stride != 1:
        raise GraphError("pointwise stream expects stride 1")
    for _ in range(h * w):
        e = _next_element(elems)
        stats.elements_in += 1
        xi = e.astype(np.int64) - z_in
        acc = bias.copy()
        for lo in range(0, l.N, par):
            acc = acc + w_int[:, lo:lo + par] @ xi[lo:lo + par]
        stats.mark_output()
        if lq.requant is None:
            yield acc
        else:
            yield approximate_and_clip(acc, lq.requant)


def avg_pool_stream(elems, c: int, h: int, w: int,
                    stats: Optional[StageStats] = None):
    """On-the-fly accumulation; emits one (C,) mean with rounding."""
    stats = stats if stats is not None else StageStats()
    total = np.zeros(c, dtype=np.int64)
    for _ in range(h * w):
        total += _next_element(elems)
        stats.elements_in += 1
    n = h * w
    stats.mark_output()
    yield (2 * total + n) // (2 * n)


def squeeze_excite_stream(elems, l: LayerDescriptor, h: int, w: int,
                          stats: Optional[StageStats] = None):
    """Frame-buffered squeeze-excite: pool, bottleneck, gate multiply."""
    stats = stats if stats is not None else StageStats()
    frame = np.empty((h * w, l.N), dtype=np.int64)
    for i in range(h * w):
        frame[i] = _next_element(elems)
        stats.elements_in += 1
    x = frame.T.reshape(l.N, h, w)
    gate = _se_gate_elem(l, x)
    lq = l.quant
    z_in = int(np.ravel(lq.in_spec.zero_point)[0])
    for i in range(h * w):
        prod = (frame[i] - z_in) * gate
        stats.mark_output()
        yield approximate_and_clip(prod, lq.requant)


def _se_gate_elem(l: LayerDescriptor, x: np.ndarray) -> np.ndarray:
    """Elementwise gate computation (no conv kernels involved)."""
    c, h, w = x.shape
    n = h * w
    pooled = (2 * x.reshape(c, -1).sum(axis=1) + n) // (2 * n)
    sq = l.se_squeeze
    lq = sq.quant
    si = pooled - int(np.ravel(lq.in_spec.zero_point)[0])
    acc = np.zeros(sq.M, dtype=np.int64)
    wq = qexec.int_weights(sq).reshape(sq.M, sq.N)
    for j in range(sq.M):
        acc[j] = int(np.dot(wq[j], si)) + int(sq.bias[j])
    s_q = approximate_and_clip(acc, lq.requant)
    ex = l.se_excite
    lqe = ex.quant
    ei = s_q - int(np.ravel(lqe.in_spec.zero_point)[0])
    we = qexec.int_weights(ex).reshape(ex.M, ex.N)
    acc2 = np.zeros(ex.M, dtype=np.int64)
    for j in range(ex.M):
        acc2[j] = int(np.dot(we[j], ei)) + int(ex.bias[j])
    return approximate_and_clip(acc2, lqe.requant)


def residual_add_stream(a_elems, b_elems, spec_a: QuantSpec,
                        spec_b: QuantSpec, spec_out: QuantSpec,
                        count: int, stats: Optional[StageStats] = None):
    """Elementwise dequantize-add-requantize over two streams."""
    ma, mb = qexec.residual_multipliers(spec_a, spec_b, spec_out)
    za = int(np.ravel(spec_a.zero_point)[0])
    zb = int(np.ravel(spec_b.zero_point)[0])
    zc = int(np.ravel(spec_out.zero_point)[0])
    hi = (1 << spec_out.bw) - 1
    stats = stats if stats is not None else StageStats()
    for _ in range(count):
        a = _next_element(a_elems)
        b = _next_element(b_elems)
        stats.elements_in += 2
        v = (a - za) * ma + (b - zb) * mb
        q = rounding_rshift(v, qexec.RESIDUAL_SHIFT) + zc
        stats.mark_output()
        yield np.clip(q, 0, hi)


def dense_stream(elems, l: LayerDescriptor,
                 stats: Optional[StageStats] = None):
    """Classifier: consumes the single pooled element, emits logits."""
    stats = stats if stats is not None else StageStats()
    e = _next_element(elems)
    stats.elements_in += 1
    lq = l.quant
    xi = e - int(np.ravel(lq.in_spec.zero_point)[0])
    acc = qexec.int_weights(l).reshape(l.M, l.N) @ xi + l.bias.astype(np.int64)
    stats.mark_output()
    if lq.requant is None:
        yield acc
    else:
        yield approximate_and_clip(acc, lq.requant)


# -- block drivers -----------------------------------------------------------

def block_stage_plan(block: Block, h: int, w: int, c: int = 0):
    """Stages (name, layer, in_shape, out_shape) for one block."""
    stages = []
    for l in block.layers:
        if l.kind in CONV_KINDS:
            cin = l.N
            ho, wo = conv_out(h, l.K, l.stride), conv_out(w, l.K, l.stride)
            stages.append((l.kind, l, (cin, h, w), (l.M, ho, wo)))
            h, w, c = ho, wo, l.M
        elif l.kind == "squeeze-excite":
            stages.append((l.kind, l, (l.N, h, w), (l.N, h, w)))
            c = l.N
        elif l.kind == "avg-pool":
            stages.append((l.kind, l, (c, h, w), (c, 1, 1)))
            h = w = 1
        elif l.kind == "dense":
            stages.append((l.kind, l, (l.N, 1, 1), (l.M, 1, 1)))
            c = l.M
        elif l.kind == "residual-add":
            pass
        else:
            raise GraphError(f"unexpected {l.kind} in quantized block")
    return stages


def _make_stage(name, l, in_shape, out_shape, upstream, pw_parallelism,
                stats: StageStats):
    c, h, w = in_shape
    if name == "depthwise-conv":
        return stream_conv_dw(upstream, l, h, w, stats)
    if name == "normal-conv":
        return stream_conv_normal(upstream, l, h, w, stats)
    if name == "pointwise-conv":
        return stream_conv_pw(upstream, l, h, w, pw_parallelism, stats)
    if name == "squeeze-excite":
        return squeeze_excite_stream(upstream, l, h, w, stats)
    if name == "avg-pool":
        return avg_pool_stream(upstream, c, h, w, stats)
    if name == "dense":
        return dense_stream(upstream, l, stats)
    raise GraphError(f"no streaming stage for {name}")


def run_block_stream(block: Block, x_q: np.ndarray, pw_parallelism: int = 0,
                     threaded: bool = False, channel_capacity: int = 0,
                     collect_stats: Optional[list] = None) -> np.ndarray:
    """Drive one block as a chained streaming pipeline.

    threaded=True runs every stage in its own thread connected by bounded
    StreamChannels (default capacity: one output row); otherwise a
    single-threaded generator chain. Both produce identical streams.
    """
    stages = block_stage_plan(block, x_q.shape[1], x_q.shape[2], x_q.shape[0])
    stream = tensor_to_stream(x_q)
    threads = []
    channels = []
    for name, l, in_shape, out_shape in stages:
        stats = StageStats()
        if collect_stats is not None:
            collect_stats.append((name, stats))
        stage = _make_stage(name, l, in_shape, out_shape, stream,
                            pw_parallelism, stats)
        if threaded:
            cap = channel_capacity or max(1, out_shape[2])
            chan = StreamChannel(cap)
            t = threading.Thread(target=_pump, args=(stage, chan), daemon=True)
            threads.append(t)
            channels.append(chan)
            stream = chan
        else:
            stream = stage
    out_c, out_h, out_w = stages[-1][3]
    if block.residual:
        spec_a = qexec.block_input_spec(block)
        spec_b = qexec.block_output_spec_no_res(block)
        stats = StageStats()
        if collect_stats is not None:
            collect_stats.append(("residual-add", stats))
        stream = residual_add_stream(
            tensor_to_stream(x_q), stream, spec_a, spec_b, block.res_quant,
            out_h * out_w, stats)
    for t in threads:
        t.start()
    out = stream_to_tensor(stream, out_c, out_h, out_w)
    for t in threads:
        t.join()
    for chan in channels:
        if chan.pushed != chan.popped:
            raise GraphError("channel closed with elements still queued")
    return out


def _pump(gen, chan: StreamChannel):
    try:
        for item in gen:
            chan.push(item)
        chan.close()
    except BaseException as e:  # propagate into the consumer
        chan.fail(e)
