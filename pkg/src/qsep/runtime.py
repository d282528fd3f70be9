"""Scheduled inference over the compiled plan.

Executes the invocation schedule against a simulated shared-memory image:
activations ping-pong between two regions, parameters are fetched per
invocation, and every transfer is metered so the measured transaction
trace can be checked against the analytic one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import MemoryFault, PlanError
from .ir import CONV_KINDS, NetworkGraph
from .quantize import QNetModel
from .kernels import qexec, streams
from .kernels.fast import conv_fast
from .kernels.reference import ref_conv, ref_conv_shift
from . import soc

BIAS_BYTES = 4  # 32-bit bias words on the wire; everything else is 1 B/elt

_CONV_FNS = {
    "fast": conv_fast,
    "reference": ref_conv,
    "reference-shift": ref_conv_shift,
}


class SharedMemoryImage:
    """Byte-addressed memory with region bounds and an init mask.

    Reading a byte that was never written raises MemoryFault, as does any
    access outside the declared region.
    """

    def __init__(self, regions):
        self.regions = {r.name: r for r in regions}
        size = max((r.offset + r.size for r in regions), default=0)
        self.data = bytearray(size)
        self.written = np.zeros(size, dtype=bool)
        self.bytes_read = 0
        self.bytes_written = 0
        self.per_region_read = {r.name: 0 for r in regions}
        self.per_region_written = {r.name: 0 for r in regions}

    def _span(self, region: str, offset: int, n: int) -> tuple[int, int]:
        r = self.regions.get(region)
        if r is None:
            raise MemoryFault(f"unknown region {region!r}")
        if offset < 0 or offset + n > r.size:
            raise MemoryFault(
                f"{region}: access [{offset}, {offset + n}) outside "
                f"size {r.size}")
        return r.offset + offset, r.offset + offset + n

    def write(self, region: str, offset: int, payload: bytes) -> None:
        lo, hi = self._span(region, offset, len(payload))
        self.data[lo:hi] = payload
        self.written[lo:hi] = True
        self.bytes_written += len(payload)
        self.per_region_written[region] += len(payload)

    def read(self, region: str, offset: int, n: int) -> bytes:
        lo, hi = self._span(region, offset, n)
        if not self.written[lo:hi].all():
            raise MemoryFault(f"{region}: read of uninitialized bytes at "
                              f"offset {offset}")
        self.bytes_read += n
        self.per_region_read[region] += n
        return bytes(self.data[lo:hi])

    def write_tensor(self, region: str, x: np.ndarray) -> None:
        if x.min() < 0 or x.max() > 255:
            raise MemoryFault("activation exceeds one byte per element")
        self.write(region, 0, x.astype(np.uint8).tobytes())

    def read_tensor(self, region: str, shape) -> np.ndarray:
        n = int(np.prod(shape))
        raw = self.read(region, 0, n)
        return np.frombuffer(raw, dtype=np.uint8).astype(np.int64) \
            .reshape(shape)

    def write_words(self, region: str, x: np.ndarray) -> None:
        """32-bit signed transfers for raw accumulator outputs."""
        self.write(region, 0, x.astype("<i4").tobytes())

    def read_words(self, region: str, shape) -> np.ndarray:
        n = int(np.prod(shape))
        raw = self.read(region, 0, 4 * n)
        return np.frombuffer(raw, dtype="<i4").astype(np.int64).reshape(shape)


def param_bytes_of_block(block) -> int:
    total = 0
    for l in block.layers:
        targets = [l] if l.kind != "squeeze-excite" \
            else [l.se_squeeze, l.se_excite]
        for t in targets:
            if t.weights is not None:
                total += t.weights.data.size  # one byte per element
            if t.bias is not None:
                total += len(t.bias) * BIAS_BYTES
    return total


def load_params(mem: SharedMemoryImage, qnet: QNetModel) -> dict:
    """Pack all parameters into the params region; returns block offsets."""
    offsets = {}
    cursor = 0
    for bi, block in enumerate(qnet.graph.blocks):
        n = param_bytes_of_block(block)
        offsets[bi] = (cursor, n)
        payload = bytearray()
        for l in block.layers:
            targets = [l] if l.kind != "squeeze-excite" \
                else [l.se_squeeze, l.se_excite]
            for t in targets:
                if t.weights is not None:
                    payload += t.weights.data.astype(np.uint8).tobytes()
                if t.bias is not None:
                    payload += np.asarray(t.bias, dtype="<i4").tobytes()
        assert len(payload) == n
        mem.write("params", cursor, bytes(payload))
        cursor += n
    return offsets


@dataclass
class InferenceResult:
    logits_q: np.ndarray          # raw accumulators (or final feature map)
    logits: np.ndarray            # dequantized
    argmax: Optional[int]
    cycles: int
    fps: float
    memory: SharedMemoryImage
    measured: dict = field(default_factory=dict)  # schedule-scoped transfers

    def top_k(self, k: int = 5):
        order = np.argsort(self.logits.reshape(-1))[::-1][:k]
        return [(int(i), float(self.logits.reshape(-1)[i])) for i in order]


def _dequantize_output(qnet: QNetModel, y: np.ndarray) -> np.ndarray:
    last = None
    for l in qnet.graph.layers():
        if l.quant is not None:
            last = l
        elif l.kind == "squeeze-excite":
            last = l
    lq = last.quant
    if lq.out_spec is None:  # raw accumulator logits
        s_in = float(np.ravel(lq.in_spec.scale)[0])
        s_w = np.atleast_1d(lq.w_spec.scale)
        return (y.reshape(len(s_w), -1) * (s_in * s_w)[:, None]) \
            .reshape(y.shape)
    spec = qnet.graph.blocks[-1].res_quant or lq.out_spec
    return spec.dequantize(y)


def run_inference(qnet: QNetModel, x: np.ndarray,
                  plan: Optional[soc.HardwarePlan] = None,
                  mode: str = "fast") -> InferenceResult:
    """Run the invocation schedule bit-exactly on one input.

    x may be a float image (quantized with the model's input spec) or an
    already-quantized integer tensor. Modes: fast / reference /
    reference-shift (monolithic conv routes) and stream / stream-threaded
    (per-element pipelines).
    """
    plan = plan or soc.compile_plan(qnet)
    g = qnet.graph
    if np.issubdtype(np.asarray(x).dtype, np.integer):
        x_q = np.asarray(x, dtype=np.int64)
    else:
        x_q = qnet.input_spec.quantize(x)

    mem = SharedMemoryImage(plan.regions)
    offsets = load_params(mem, qnet)
    shapes = _block_io_shapes(g, x_q.shape[1])

    cur, nxt = "act_ping", "act_pong"
    mem.write_tensor(cur, x_q)  # input DMA, outside the schedule accounting
    raw = False
    r0, w0, b0 = _act_reads(mem), _act_writes(mem), mem.per_region_read["params"]
    for inv in plan.schedule:
        t = mem.read_tensor(cur, shapes[inv.blocks[0]][0])
        for bi in inv.blocks:
            off, n = offsets[bi]
            if n:
                mem.read("params", off, n)  # burst fetch of the block params
            if g.blocks[bi].residual and bi == inv.blocks[0]:
                # identity path re-reads the invocation input
                mem.read_tensor(cur, shapes[bi][0])
            t = _run_block(g.blocks[bi], t, mode)
        raw = _raw_block(g.blocks[inv.blocks[-1]])
        if raw:  # accumulator logits travel as 32-bit words
            mem.write_words(nxt, t)
        else:
            mem.write_tensor(nxt, t)
        cur, nxt = nxt, cur
    measured = {
        "burst_bytes": mem.per_region_read["params"] - b0,
        "stream_in_bytes": _act_reads(mem) - r0,
        "stream_out_bytes": _act_writes(mem) - w0,
    }
    out_shape = shapes[plan.schedule[-1].blocks[-1]][1]
    y = mem.read_words(cur, out_shape) if raw \
        else mem.read_tensor(cur, out_shape)
    logits = _dequantize_output(qnet, y)
    flat = logits.reshape(-1)
    return InferenceResult(
        logits_q=y, logits=logits,
        argmax=int(np.argmax(flat)),
        cycles=plan.total_cycles, fps=plan.fps, memory=mem,
        measured=measured)


def _act_reads(mem: SharedMemoryImage) -> int:
    return mem.per_region_read["act_ping"] + mem.per_region_read["act_pong"]


def _act_writes(mem: SharedMemoryImage) -> int:
    return (mem.per_region_written["act_ping"]
            + mem.per_region_written["act_pong"])


def _raw_block(block) -> bool:
    """True when the block's product is raw 32-bit accumulators."""
    last = block.layers[-1]
    return last.quant is not None and last.quant.out_spec is None


def _elt_bytes(block) -> int:
    return 4 if _raw_block(block) else 1


def _run_block(block, t, mode):
    if mode in _CONV_FNS:
        return qexec.run_block(block, t, conv_fn=_CONV_FNS[mode])
    if mode == "stream":
        return streams.run_block_stream(block, t)
    if mode == "stream-threaded":
        return streams.run_block_stream(block, t, threaded=True)
    raise PlanError(f"unknown execution mode {mode!r}")


def _block_io_shapes(g: NetworkGraph, resolution: int):
    """Per block index: ((C,H,W) in, (C,H,W) out)."""
    shapes = []
    it = g.layer_shapes(resolution)
    for block in g.blocks:
        entries = [next(it) for _ in block.layers]
        shapes.append((entries[0][1], entries[-1][2]))
    return shapes


# -- memory transaction traces -----------------------------------------------

@dataclass
class Transaction:
    invocation: int
    cu: str
    blocks: list[int]
    burst_bytes: int
    stream_in_bytes: int
    stream_out_bytes: int

    def to_doc(self) -> dict:
        return dict(self.__dict__)


def trace_transactions(qnet: QNetModel, plan: Optional[soc.HardwarePlan]
                       = None, fused: bool = True) -> list[Transaction]:
    """Analytic per-invocation transfer sizes (1 B per activation element).

    fused=True: only invocation-boundary activations cross shared memory.
    fused=False: every layer's input and output make the round trip, the
    datapath a per-layer accelerator without operator fusion would take.
    """
    plan = plan or soc.compile_plan(qnet)
    g = qnet.graph
    shapes = _block_io_shapes(g, g.input_resolution)
    layer_shapes = list(g.layer_shapes())
    per_block_layers = []
    idx = 0
    for block in g.blocks:
        per_block_layers.append(layer_shapes[idx:idx + len(block.layers)])
        idx += len(block.layers)

    out = []
    for i, inv in enumerate(plan.schedule):
        burst = sum(param_bytes_of_block(g.blocks[bi]) for bi in inv.blocks)
        if fused:
            sin = int(np.prod(shapes[inv.blocks[0]][0]))
            sout = int(np.prod(shapes[inv.blocks[-1]][1])) \
                * _elt_bytes(g.blocks[inv.blocks[-1]])
            # residual reuse of the block input counts as a second read
            sin += sum(int(np.prod(shapes[bi][0]))
                       for bi in inv.blocks if g.blocks[bi].residual)
        else:
            sin = sout = 0
            for bi in inv.blocks:
                for l, lin, lout in per_block_layers[bi]:
                    if l.kind in ("relu6", "batch-norm", "residual-add"):
                        continue
                    eb = 4 if (l.quant is not None
                               and not l.kind == "squeeze-excite"
                               and l.quant.out_spec is None) else 1
                    sin += int(np.prod(lin))
                    sout += int(np.prod(lout)) * eb
                if g.blocks[bi].residual:
                    sin += int(np.prod(shapes[bi][0]))
                    sout += int(np.prod(shapes[bi][1]))
        out.append(Transaction(i, inv.cu, list(inv.blocks), burst, sin, sout))
    return out


def transaction_totals(trace) -> dict:
    return {
        "burst_bytes": sum(t.burst_bytes for t in trace),
        "stream_in_bytes": sum(t.stream_in_bytes for t in trace),
        "stream_out_bytes": sum(t.stream_out_bytes for t in trace),
    }


def estimate_performance(qnet: QNetModel,
                         plan: Optional[soc.HardwarePlan] = None) -> dict:
    """Compute- and memory-bound latency for one frame."""
    plan = plan or soc.compile_plan(qnet)
    trace = trace_transactions(qnet, plan, fused=True)
    totals = transaction_totals(trace)
    moved = sum(totals.values())
    mem_cycles = int(np.ceil(moved / plan.device.bus_bytes_per_cycle))
    compute_cycles = plan.total_cycles
    latency = max(compute_cycles, mem_cycles)
    freq = plan.device.frequency_mhz * 1e6
    return {
        "compute_cycles": compute_cycles,
        "memory_cycles": mem_cycles,
        "latency_cycles": latency,
        "latency_ms": latency / freq * 1e3,
        "fps": freq / latency,
        "bound": "compute" if compute_cycles >= mem_cycles else "memory",
        "bytes_moved": moved,
    }
