"""Mapping a quantized graph onto the four streaming compute units.

Blocks are grouped by structural signature: the longest contiguous run of
isomorphic bottlenecks becomes the Body unit (one invocation per block);
everything before it runs once on the Head, trailing conv/pool blocks on
the Tail, and a final dense layer on the Classifier. Parallelism knobs,
buffer sizes and cycle counts are derived from the worst-case block each
unit has to serve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import PlanError
from .ir import CONV_KINDS, LayerDescriptor, NetworkGraph, conv_out, layer_ops
from .quantize import QNetModel

CU_NAMES = ("head", "body", "tail", "classifier")
DSP_PER_LANE = 0.25  # four narrow MAC lanes pack into one wide DSP slice
LUT_PER_LANE = 24.0


# -- device profiles ---------------------------------------------------------

@dataclass
class DeviceProfile:
    name: str
    dsp_count: int
    bram_bits: int
    lut_count: int
    frequency_mhz: float = 200.0
    bus_bytes_per_cycle: int = 16

    def to_doc(self) -> dict:
        return dict(self.__dict__)


def _parse_toml_value(raw: str):
    raw = raw.strip()
    if raw.startswith('"') and raw.endswith('"'):
        return raw[1:-1]
    if raw in ("true", "false"):
        return raw == "true"
    try:
        return int(raw)
    except ValueError:
        return float(raw)


def parse_flat_toml(text: str) -> dict:
    """Minimal TOML subset: flat key = value lines, # comments."""
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            continue  # section headers are allowed and flattened
        if "=" not in line:
            raise PlanError(f"device profile line {ln}: expected key = value")
        key, _, raw = line.partition("=")
        try:
            out[key.strip()] = _parse_toml_value(raw)
        except ValueError as e:
            raise PlanError(f"device profile line {ln}: {e}") from e
    return out


def load_device_profile(path) -> DeviceProfile:
    p = Path(path)
    if not p.is_file():
        return builtin_device(str(path))
    doc = parse_flat_toml(p.read_text())
    return _device_from_doc(doc, default_name=p.stem)


def builtin_device(name: str) -> DeviceProfile:
    ref = resources.files("qsep") / "devices" / f"{name}.toml"
    if not ref.is_file():
        raise PlanError(f"unknown device {name!r}")
    return _device_from_doc(parse_flat_toml(ref.read_text()),
                            default_name=name)


def _device_from_doc(doc: dict, default_name: str) -> DeviceProfile:
    try:
        return DeviceProfile(
            name=str(doc.get("name", default_name)),
            dsp_count=int(doc["dsp_count"]),
            bram_bits=int(doc["bram_bits"]),
            lut_count=int(doc["lut_count"]),
            frequency_mhz=float(doc.get("frequency_mhz", 200.0)),
            bus_bytes_per_cycle=int(doc.get("bus_bytes_per_cycle", 16)))
    except KeyError as e:
        raise PlanError(f"device profile missing field {e}") from e


# -- partitioning ------------------------------------------------------------

@dataclass
class CUAssignment:
    head: list[int]
    body: list[int]
    tail: list[int]
    classifier: list[int]

    def cu_of(self, block_index: int) -> str:
        for name in CU_NAMES:
            if block_index in getattr(self, name):
                return name
        raise PlanError(f"block {block_index} not assigned")

    def invocations(self) -> int:
        return ((1 if self.head else 0) + len(self.body)
                + (1 if self.tail else 0) + (1 if self.classifier else 0))

    def to_doc(self) -> dict:
        return {n: getattr(self, n) for n in CU_NAMES}


def partition_to_cus(qnet: QNetModel) -> CUAssignment:
    """Longest contiguous isomorphic run (>= 2 blocks) becomes the Body."""
    blocks = qnet.graph.blocks
    sigs = [b.signature() for b in blocks]
    best = (0, 0)  # (length, start)
    i = 0
    while i < len(sigs):
        j = i
        while j + 1 < len(sigs) and sigs[j + 1] == sigs[i]:
            j += 1
        if j - i + 1 > best[0]:
            best = (j - i + 1, i)
        i = j + 1
    length, start = best
    if length < 2:
        raise PlanError("no repeated bottleneck structure to map onto a "
                        "shared compute unit")
    body = list(range(start, start + length))
    head = list(range(0, start))
    tail, classifier = [], []
    for bi in range(start + length, len(blocks)):
        if any(l.kind == "dense" for l in blocks[bi].layers):
            classifier.append(bi)
        elif classifier:
            raise PlanError("conv/pool block after the classifier")
        else:
            tail.append(bi)
    return CUAssignment(head, body, tail, classifier)


# -- parallelism knobs and resources -----------------------------------------

@dataclass
class SlotKnob:
    """One pipeline stage slot of a compute unit."""

    kind: str
    lanes: int           # parallel MAC (or add) lanes
    k_max: int = 1
    c_max: int = 0       # widest channel count the slot serves
    weight_bits: int = 0  # largest resident filter set
    line_buffer_bits: int = 0
    uses_dsp: bool = True  # pooling/add lanes are plain adders

    def to_doc(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CUPlan:
    name: str
    blocks: list[int]
    slots: list[SlotKnob]

    def lanes(self) -> int:
        return sum(s.lanes for s in self.slots)

    def dsp_lanes(self) -> int:
        return sum(s.lanes for s in self.slots if s.uses_dsp)

    def buffer_bits(self) -> int:
        return sum(s.line_buffer_bits + s.weight_bits for s in self.slots)

    def to_doc(self) -> dict:
        return {"name": self.name, "blocks": self.blocks,
                "slots": [s.to_doc() for s in self.slots]}


@dataclass
class ResourceEstimate:
    dsp: int
    bram_bits: int
    lut: int
    dsp_utilization: float
    bram_utilization: float
    lut_utilization: float
    feasible: bool

    def to_doc(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Invocation:
    cu: str
    blocks: list[int]
    stage_cycles: dict
    fill_cycles: int

    @property
    def cycles(self) -> int:
        return (max(self.stage_cycles.values()) if self.stage_cycles else 0) \
            + self.fill_cycles

    def to_doc(self) -> dict:
        return {"cu": self.cu, "blocks": self.blocks,
                "stage_cycles": self.stage_cycles,
                "fill_cycles": self.fill_cycles, "cycles": self.cycles}


@dataclass
class MemoryRegion:
    name: str
    offset: int
    size: int  # bytes

    def to_doc(self) -> dict:
        return dict(self.__dict__)


@dataclass
class HardwarePlan:
    device: DeviceProfile
    assignment: CUAssignment
    cus: list[CUPlan]
    resources: ResourceEstimate
    schedule: list[Invocation]
    regions: list[MemoryRegion]

    @property
    def total_cycles(self) -> int:
        return sum(inv.cycles for inv in self.schedule)

    @property
    def fps(self) -> float:
        return self.device.frequency_mhz * 1e6 / max(1, self.total_cycles)

    def to_doc(self) -> dict:
        return {
            "device": self.device.to_doc(),
            "assignment": self.assignment.to_doc(),
            "cus": [c.to_doc() for c in self.cus],
            "resources": self.resources.to_doc(),
            "schedule": [s.to_doc() for s in self.schedule],
            "regions": [r.to_doc() for r in self.regions],
            "total_cycles": self.total_cycles,
            "fps": self.fps,
        }


def _slot_lanes(kind: str, k: int, n: int, c: int) -> int:
    """Parallel lanes a fully-unrolled slot needs for its worst case."""
    if kind == "depthwise-conv":
        return k * k * c
    if kind == "normal-conv":
        return k * k * n
    if kind in ("pointwise-conv", "dense", "se-squeeze", "se-excite"):
        return n
    if kind in ("se-pool", "avg-pool"):
        return c
    return 0


def _block_shape_walk(g: NetworkGraph):
    """Per block: list of (layer, in_shape, out_shape) plus block I/O."""
    shapes = list(g.layer_shapes())
    idx = 0
    for block in g.blocks:
        entries = []
        for l in block.layers:
            layer, sin, sout = shapes[idx]
            assert layer is l
            entries.append((l, sin, sout))
            idx += 1
        yield block, entries


def _signature_entries(block, entries):
    """Align signature slots with (layer, in_shape, out_shape) triples."""
    out = []
    for l, sin, sout in entries:
        if l.kind == "squeeze-excite":
            c = l.N
            out.append(("se-pool", l, sin, (c, 1, 1)))
            out.append(("se-squeeze", l.se_squeeze, (c, 1, 1),
                        (l.se_squeeze.M, 1, 1)))
            out.append(("se-excite", l.se_excite, (l.se_squeeze.M, 1, 1),
                        (c, 1, 1)))
        else:
            out.append((l.kind, l, sin, sout))
    return out


def derive_knobs(qnet: QNetModel, assignment: CUAssignment) -> list[CUPlan]:
    """Size each CU's slots for the widest block it serves."""
    g = qnet.graph
    per_block = list(_block_shape_walk(g))
    act_bw = g.default_bw
    plans = []
    for name in CU_NAMES:
        block_ids = getattr(assignment, name)
        if not block_ids:
            continue
        if name == "body":
            # one slot per template stage, sized over all body blocks
            sig = per_block[block_ids[0]][0].signature()
            slot_rows: list[list] = [[] for _ in sig]
            for bi in block_ids:
                block, entries = per_block[bi]
                if block.signature() != sig:
                    raise PlanError("body blocks must share one signature")
                for row, entry in zip(slot_rows,
                                      _signature_entries(block, entries)):
                    row.append(entry)
        else:
            # head/tail/classifier chain their blocks' stages back to back
            sig, slot_rows = [], []
            for bi in block_ids:
                block, entries = per_block[bi]
                for entry in _signature_entries(block, entries):
                    sig.append(entry[0])
                    slot_rows.append([entry])
        slots = []
        for kind, rows in zip(sig, slot_rows):
            k_max = max(e[1].K if e[1] is not None else 1 for e in rows)
            n_max = max(e[2][0] for e in rows)
            c_max = max(max(e[2][0], e[3][0]) for e in rows)
            w_max = max((e[3][1] if len(e[3]) > 1 else 1) for e in rows)
            lanes = _slot_lanes(kind, k_max, n_max, c_max)
            if kind == "dense":
                # classifier filters stream row by row from shared memory
                wbits = max(e[1].N * g.bw_of(e[1]) for e in rows)
            else:
                wbits = max((e[1].weight_count() * g.bw_of(e[1])
                             if e[1] is not None else 0) for e in rows)
            lb = 0
            if kind in ("depthwise-conv", "normal-conv") and k_max > 1:
                wp = w_max + (k_max - 1)
                lb = (k_max * wp + k_max * k_max) * c_max * act_bw
            elif kind in ("pointwise-conv", "dense", "se-squeeze",
                          "se-excite"):
                lb = n_max * act_bw
            slots.append(SlotKnob(kind, lanes, k_max, c_max, wbits, lb,
                                  uses_dsp=kind not in ("se-pool",
                                                        "avg-pool")))
        plans.append(CUPlan(name, block_ids, slots))
    return plans


def _stage_macs(kind, layer, sin, sout) -> int:
    if kind in ("se-pool", "avg-pool"):
        c, h, w = sin
        return c * h * w  # adds, not MACs, but they occupy the lanes
    if kind in ("se-squeeze", "se-excite"):
        return layer.N * layer.M
    if kind == "se-gate":
        c, h, w = sin
        return c * h * w
    return layer_ops(layer, sin, sout)


def emit_schedule(qnet: QNetModel, assignment: CUAssignment,
                  cus: list[CUPlan]) -> list[Invocation]:
    """Invocation list in execution order with per-stage cycle counts.

    A CU is a pipeline: an invocation costs the slowest stage plus the
    window fill latency of its strided stages.
    """
    g = qnet.graph
    per_block = list(_block_shape_walk(g))
    by_name = {c.name: c for c in cus}
    schedule = []
    for name in CU_NAMES:
        block_ids = getattr(assignment, name)
        if not block_ids:
            continue
        cu = by_name[name]
        groups = [[bi] for bi in block_ids] if name == "body" \
            else [list(block_ids)]
        for group in groups:
            stage_cycles = {}
            fill = 0
            slot_i = 0
            for bi in group:
                block, entries = per_block[bi]
                for kind, layer, sin, sout in _signature_entries(block,
                                                                 entries):
                    slot = cu.slots[slot_i]
                    slot_i += 1
                    macs = _stage_macs(kind, layer, sin, sout)
                    cycles = math.ceil(macs / max(1, slot.lanes))
                    key = f"b{bi}.{kind}.{len(stage_cycles)}"
                    stage_cycles[key] = cycles
                    if kind in ("depthwise-conv", "normal-conv") \
                            and layer.K > 1:
                        wp = sin[2] + (layer.K - 1)
                        fill += (layer.K - 1) * wp + layer.K
            schedule.append(Invocation(name, group, stage_cycles, fill))
    return schedule


def estimate_resources(cus: list[CUPlan], regions: list[MemoryRegion],
                       device: DeviceProfile) -> ResourceEstimate:
    # regions live in external shared memory and do not occupy block RAM
    dsp = math.ceil(sum(c.dsp_lanes() for c in cus) * DSP_PER_LANE)
    bram = sum(c.buffer_bits() for c in cus)
    lut = math.ceil(sum(c.lanes() for c in cus) * LUT_PER_LANE)
    du = dsp / device.dsp_count
    bu = bram / device.bram_bits
    lu = lut / device.lut_count
    return ResourceEstimate(dsp, bram, lut, du, bu, lu,
                            feasible=du <= 1.0 and bu <= 1.0 and lu <= 1.0)


def plan_memory(qnet: QNetModel) -> list[MemoryRegion]:
    """Ping-pong activation regions plus a parameter region (bytes)."""
    g = qnet.graph
    feat = 0
    for l, sin, sout in g.layer_shapes():
        feat = max(feat, int(np.prod(sin)), int(np.prod(sout)))
        if l.quant is not None and l.quant.out_spec is None:
            feat = max(feat, 4 * int(np.prod(sout)))  # 32-bit accumulators
    # one byte per weight on the wire (bit-widths up to 8), 4 B bias words
    params = sum(l.weight_count() + 4 * l.M for l in g.weighted_layers())
    regions = [MemoryRegion("act_ping", 0, feat)]
    regions.append(MemoryRegion("act_pong", feat, feat))
    regions.append(MemoryRegion("params", 2 * feat, params))
    return regions


def compile_plan(qnet: QNetModel,
                 device: Optional[DeviceProfile] = None) -> HardwarePlan:
    """Full mapping: partition, knobs, schedule, memory, resources."""
    device = device or builtin_device("xczu9eg")
    assignment = partition_to_cus(qnet)
    cus = derive_knobs(qnet, assignment)
    schedule = emit_schedule(qnet, assignment, cus)
    regions = plan_memory(qnet)
    resources = estimate_resources(cus, regions, device)
    return HardwarePlan(device, assignment, cus, resources, schedule, regions)
