"""Network intermediate representation.

The model is an ordered list of blocks; a block is either a single plain
layer (stem conv, pooling, dense, ...) or an inverted-residual bottleneck
holding several layers. Feature tensors are (C, H, W) channel-major with an
implicit batch of 1. Weight blobs are little-endian row-major in
(M, N/G, K, K) filter order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import GraphError, ManifestError

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

CONV_KINDS = ("normal-conv", "depthwise-conv", "pointwise-conv")
WEIGHTED_KINDS = CONV_KINDS + ("dense",)
LAYER_KINDS = WEIGHTED_KINDS + (
    "batch-norm",
    "relu6",
    "hard-sigmoid",
    "avg-pool",
    "residual-add",
    "squeeze-excite",
)

_ELEMENT_DTYPES = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("<u1"),
    "int32": np.dtype("<i4"),
}


def make_divisible(value: float, divisor: int = 8, floor: int = 8) -> int:
    """Round a scaled channel count to a hardware-friendly multiple.

    Nearest multiple of `divisor` with a lower bound, bumped up one step
    whenever plain rounding would drop below 90% of the requested width
    (the convention used by the public MobileNet family exporters).
    """
    new = max(floor, int(value + divisor / 2) // divisor * divisor)
    if new < 0.9 * value:
        new += divisor
    return new


@dataclass
class TensorBuffer:
    """Flat tensor container with an explicit element kind.

    shape is a 4-tuple: (1, C, H, W) for features, (M, N/G, K, K) for
    filters. data is the flat row-major array.
    """

    shape: tuple[int, int, int, int]
    element_kind: str  # "float32" | "uint8" | "int32"
    data: np.ndarray
    bw: int = 32  # value bit-width for integer kinds

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        n = int(np.prod(self.shape))
        self.data = np.asarray(self.data).reshape(-1)
        if self.data.size != n:
            raise GraphError(
                f"tensor data length {self.data.size} != prod(shape) {n}")
        if self.element_kind not in _ELEMENT_DTYPES:
            raise GraphError(f"unknown element kind {self.element_kind!r}")
        if self.element_kind == "uint8":
            hi = (1 << self.bw) - 1
            if self.data.size and (self.data.min() < 0 or self.data.max() > hi):
                raise GraphError(
                    f"uint{self.bw} tensor has values outside [0, {hi}]")

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @classmethod
    def from_array(cls, a: np.ndarray, element_kind: str = "float32",
                   bw: int = 32) -> "TensorBuffer":
        a = np.asarray(a)
        shape = a.shape
        if len(shape) < 4:
            shape = (1,) * (4 - len(shape)) + shape
        dt = _ELEMENT_DTYPES[element_kind]
        return cls(tuple(shape), element_kind, a.astype(dt).reshape(-1), bw)


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5


@dataclass
class LayerDescriptor:
    kind: str
    N: int = 0
    M: int = 0
    K: int = 1
    stride: int = 1
    G: int = 1
    weights: Optional[TensorBuffer] = None
    bias: Optional[np.ndarray] = None
    bn: Optional[BatchNormParams] = None
    # squeeze-excite carries its two pointwise bottleneck convs
    se_squeeze: Optional["LayerDescriptor"] = None
    se_excite: Optional["LayerDescriptor"] = None
    bw: Optional[int] = None  # per-layer override of the model default
    quant: object = None  # LayerQuant attached by the quantizer

    def validate(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise GraphError("stride must be positive")
        if self.kind == "pointwise-conv" and self.K != 1:
            raise GraphError("pointwise requires K=1")
        if self.kind == "depthwise-conv":
            if self.G != self.N or self.M != self.N:
                raise GraphError("depthwise requires G=N and M=N")
        if self.kind in CONV_KINDS and self.M % self.G != 0:
            raise GraphError(f"group conv needs M divisible by G "
                             f"(M={self.M}, G={self.G})")
        if self.kind in CONV_KINDS and self.N % self.G != 0:
            raise GraphError(f"group conv needs N divisible by G")
        if self.weights is not None:
            want = self.weight_shape()
            if tuple(self.weights.shape) != want:
                raise GraphError(
                    f"{self.kind} weight shape {self.weights.shape} != {want}")
        if self.bias is not None and len(self.bias) != self.M:
            raise GraphError("bias length must equal M")
        if self.kind == "squeeze-excite":
            if self.se_squeeze is None or self.se_excite is None:
                raise GraphError("squeeze-excite needs both bottleneck convs")
            self.se_squeeze.validate()
            self.se_excite.validate()
            if self.se_squeeze.N != self.N or self.se_excite.M != self.N:
                raise GraphError("squeeze-excite bottleneck must close on N")

    def weight_shape(self) -> tuple[int, int, int, int]:
        if self.kind == "dense":
            return (self.M, self.N, 1, 1)
        return (self.M, self.N // self.G, self.K, self.K)

    def weight_count(self) -> int:
        if self.kind in WEIGHTED_KINDS:
            return int(np.prod(self.weight_shape()))
        return 0


@dataclass
class Block:
    layers: list[LayerDescriptor]
    residual: bool = False
    expand_ratio: Optional[float] = None
    res_quant: object = None  # QuantSpec of the post-add tensor (QNet only)

    def signature(self) -> tuple[str, ...]:
        """Structural signature used for compute-unit template matching."""
        sig = []
        for l in self.layers:
            if l.kind == "squeeze-excite":
                sig += ["se-pool", "se-squeeze", "se-excite"]
            else:
                sig.append(l.kind)
        return tuple(sig)


@dataclass
class NetworkGraph:
    blocks: list[Block]
    arch_name: str = "custom"
    alpha: float = 1.0
    input_resolution: int = 224
    input_channels: int = 3
    default_bw: int = 4
    first_conv_bw: int = 8
    input_quant: object = None  # QuantSpec of the input image (QNet only)

    # -- structure ---------------------------------------------------------

    def layers(self) -> Iterator[LayerDescriptor]:
        for b in self.blocks:
            yield from b.layers

    def weighted_layers(self) -> Iterator[LayerDescriptor]:
        for l in self.layers():
            if l.kind in WEIGHTED_KINDS:
                yield l
            elif l.kind == "squeeze-excite":
                yield l.se_squeeze
                yield l.se_excite

    def validate(self) -> None:
        if not self.blocks or not any(b.layers for b in self.blocks):
            raise GraphError("no layers")
        prev_c = self.input_channels
        for bi, block in enumerate(self.blocks):
            block_in = prev_c
            for l in block.layers:
                l.validate()
                if l.kind in WEIGHTED_KINDS and l.N != prev_c:
                    raise GraphError(
                        f"block {bi}: layer expects N={l.N}, producer "
                        f"gives {prev_c}")
                prev_c = self._out_channels(l, prev_c)
            if block.residual:
                if block_in != prev_c:
                    raise GraphError(
                        f"block {bi}: residual needs matching channel "
                        f"counts ({block_in} vs {prev_c})")
                if any(l.stride > 1 for l in block.layers):
                    raise GraphError(
                        f"block {bi}: residual needs stride 1 throughout")

    @staticmethod
    def _out_channels(l: LayerDescriptor, cur: int) -> int:
        if l.kind in WEIGHTED_KINDS:
            return l.M
        return cur

    def bw_of(self, layer: LayerDescriptor) -> int:
        """Effective weight bit-width: first normal conv runs wider."""
        if layer.bw is not None:
            return layer.bw
        for l in self.weighted_layers():
            if l.kind == "normal-conv":
                return self.first_conv_bw if l is layer else self.default_bw
            break
        return self.default_bw

    # -- shape propagation -------------------------------------------------

    def layer_shapes(self, resolution: Optional[int] = None):
        """Yield (layer, (C,H,W) in, (C,H,W) out) with same padding.

        Same padding uses a symmetric border of (K-1)//2 zeros, so
        H_out = ceil(H/stride) for every odd kernel.
        """
        h = w = resolution if resolution is not None else self.input_resolution
        c = self.input_channels
        for l in self.layers():
            cin, hin, win = c, h, w
            if l.kind in CONV_KINDS:
                c = l.M
                h = conv_out(h, l.K, l.stride)
                w = conv_out(w, l.K, l.stride)
            elif l.kind == "dense":
                c, h, w = l.M, 1, 1
            elif l.kind == "avg-pool":
                h = w = 1
            yield l, (cin, hin, win), (c, h, w)

    def output_shape(self, resolution: Optional[int] = None):
        shape = (self.input_channels,) + (resolution or self.input_resolution,) * 2
        for _, _, shape in self.layer_shapes(resolution):
            pass
        return shape


def conv_out(h: int, k: int, stride: int) -> int:
    pad = (k - 1) // 2
    return (h + 2 * pad - k) // stride + 1


# -- analytics ---------------------------------------------------------------

def count_params_bits(g: NetworkGraph, bw_map: Optional[dict] = None) -> int:
    """Total parameter storage in bits.

    Per weighted layer: (weight elements + M bias elements) * BW. Biases are
    counted whether or not the layer is fused yet, so the figure is stable
    across batch-norm fusion. Independent of the input resolution.
    """
    total = 0
    for l in _expand_weighted(g):
        bw = bw_map.get(id(l), g.bw_of(l)) if bw_map else g.bw_of(l)
        total += (l.weight_count() + l.M) * bw
    return total


def count_params_mbits(g: NetworkGraph) -> float:
    return count_params_bits(g) / float(1 << 20)


def count_ops(g: NetworkGraph, resolution: Optional[int] = None) -> int:
    """Total multiply-accumulate count at the given input resolution.

    One op is one MAC; bias adds, pooling sums and requantization are not
    counted. The squeeze-excite gate contributes its per-element multiply.
    """
    total = 0
    for l, (cin, hin, win), (c, h, w) in g.layer_shapes(resolution):
        total += layer_ops(l, (cin, hin, win), (c, h, w))
    return total


def layer_ops(l: LayerDescriptor, in_shape, out_shape) -> int:
    cin, hin, win = in_shape
    c, h, w = out_shape
    if l.kind in CONV_KINDS:
        return h * w * l.K * l.K * (l.N // l.G) * l.M
    if l.kind == "dense":
        return l.N * l.M
    if l.kind == "squeeze-excite":
        sq = l.se_squeeze.N * l.se_squeeze.M
        ex = l.se_excite.N * l.se_excite.M
        gate = cin * hin * win
        return sq + ex + gate
    return 0


def network_complexity(g: NetworkGraph, resolution: Optional[int] = None) -> float:
    """Model size times operation count (Mbit x Mops), for Pareto tables."""
    return count_params_mbits(g) * (count_ops(g, resolution) / 1e6)


def _expand_weighted(g: NetworkGraph):
    yield from g.weighted_layers()


# -- width multiplier --------------------------------------------------------

def apply_width_multiplier(g: NetworkGraph, alpha: float) -> NetworkGraph:
    """Scale every channel count by alpha.

    Scaled counts round per make_divisible. Graphs that already carry
    trained weights are not re-sliced: pre-trained blobs exist per alpha, so
    for a weighted graph this only checks that the stored shapes are
    self-consistent and records nothing new.
    """
    if not 0 < alpha <= 1:
        raise GraphError(f"alpha must be in (0, 1], got {alpha}")
    if any(l.weights is not None for l in g.weighted_layers()):
        g.validate()
        return g
    if alpha == 1.0:
        return g

    new_blocks = []
    prev_c = g.input_channels
    prev_scaled = g.input_channels
    for block in g.blocks:
        mapping = {prev_c: prev_scaled}
        layers = []
        for l in block.layers:
            nl = replace(l)
            if l.kind in WEIGHTED_KINDS:
                nl.N = mapping.get(l.N, scale_channels(l.N, alpha))
                nl.M = mapping.get(l.M, scale_channels(l.M, alpha))
                mapping.setdefault(l.M, nl.M)
                if l.kind == "depthwise-conv":
                    nl.G = nl.N
                prev_c, prev_scaled = l.M, nl.M
            elif l.kind == "batch-norm" or l.kind == "squeeze-excite":
                nl.N = nl.M = prev_scaled
                if l.kind == "squeeze-excite":
                    nl.se_squeeze = replace(l.se_squeeze, N=prev_scaled)
                    nl.se_excite = replace(l.se_excite, M=prev_scaled)
            layers.append(nl)
        new_blocks.append(Block(layers, block.residual, block.expand_ratio))
    out = replace(g, blocks=new_blocks, alpha=alpha)
    out.validate()
    return out


def scale_channels(c: int, alpha: float) -> int:
    scaled = make_divisible(c * alpha)
    if scaled <= 0:
        raise GraphError("width multiplier yields zero channels")
    return scaled


# -- manifest serialization --------------------------------------------------

def load_model(manifest_path) -> NetworkGraph:
    """Load a model directory (or manifest.json path) into a NetworkGraph."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest: {e}") from e
    root = path.parent

    if doc.get("format_version") != MANIFEST_VERSION:
        raise ManifestError(
            f"unsupported format_version {doc.get('format_version')!r}")
    blocks_doc = doc.get("blocks")
    if not blocks_doc:
        raise ManifestError("no layers")

    from .quantize import QuantSpec  # local import: quantize builds on ir

    blocks = []
    for bd in blocks_doc:
        layers = [_layer_from_doc(ld, root) for ld in bd.get("layers", [])]
        blk = Block(layers, bool(bd.get("residual", False)),
                    bd.get("expand_ratio"))
        if bd.get("res_quant") is not None:
            blk.res_quant = QuantSpec.from_doc(bd["res_quant"])
        blocks.append(blk)
    g = NetworkGraph(
        blocks=blocks,
        arch_name=doc.get("arch_name", "custom"),
        alpha=float(doc.get("alpha", 1.0)),
        input_resolution=int(doc.get("input_resolution", 224)),
        input_channels=int(doc.get("input_channels", 3)),
        default_bw=int(doc.get("default_bw", 4)),
        first_conv_bw=int(doc.get("first_conv_bw", 8)),
    )
    if doc.get("input_quant") is not None:
        g.input_quant = QuantSpec.from_doc(doc["input_quant"])
    try:
        g.validate()
    except GraphError as e:
        raise ManifestError(str(e)) from e
    return g


def save_model(g: NetworkGraph, out_dir) -> Path:
    """Write manifest.json plus raw little-endian weight blobs."""
    out = Path(out_dir)
    (out / "blobs").mkdir(parents=True, exist_ok=True)
    blocks_doc = []
    for bi, block in enumerate(g.blocks):
        bd = {
            "residual": block.residual,
            "expand_ratio": block.expand_ratio,
            "layers": [
                _layer_to_doc(l, out, f"b{bi:02d}_l{li:02d}")
                for li, l in enumerate(block.layers)
            ],
        }
        bd["res_quant"] = block.res_quant.to_doc() if block.res_quant else None
        blocks_doc.append(bd)
    doc = {
        "format_version": MANIFEST_VERSION,
        "arch_name": g.arch_name,
        "alpha": g.alpha,
        "input_resolution": g.input_resolution,
        "input_channels": g.input_channels,
        "default_bw": g.default_bw,
        "first_conv_bw": g.first_conv_bw,
        "input_quant": g.input_quant.to_doc() if g.input_quant else None,
        "blocks": blocks_doc,
    }
    (out / MANIFEST_NAME).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out / MANIFEST_NAME


def _write_blob(out: Path, rel: str, a: np.ndarray, dtype) -> str:
    (out / rel).parent.mkdir(parents=True, exist_ok=True)
    np.asarray(a).astype(dtype).tofile(out / rel)
    return rel


def _read_blob(root: Path, rel: str, dtype, count: int) -> np.ndarray:
    p = root / rel
    if not p.is_file():
        raise ManifestError(f"weight blob missing: {rel}")
    a = np.fromfile(p, dtype=dtype)
    if a.size != count:
        raise ManifestError(
            f"blob {rel}: {a.size} elements, manifest expects {count}")
    return a


def _layer_to_doc(l: LayerDescriptor, out: Path, tag: str) -> dict:
    d = {"kind": l.kind, "N": l.N, "M": l.M, "K": l.K,
         "stride": l.stride, "G": l.G, "bw": l.bw}
    if l.weights is not None:
        kind = l.weights.element_kind
        d["weights"] = _write_blob(out, f"blobs/{tag}_w.bin",
                                   l.weights.data, _ELEMENT_DTYPES[kind])
        d["weights_kind"] = kind
    if l.bias is not None:
        bkind = "int32" if np.issubdtype(np.asarray(l.bias).dtype, np.integer) \
            else "float32"
        d["bias"] = _write_blob(out, f"blobs/{tag}_b.bin", l.bias,
                                _ELEMENT_DTYPES[bkind])
        d["bias_kind"] = bkind
    if l.bn is not None:
        packed = np.stack([l.bn.gamma, l.bn.beta, l.bn.mean, l.bn.var])
        d["bn"] = _write_blob(out, f"blobs/{tag}_bn.bin", packed, "<f4")
        d["bn_eps"] = l.bn.eps
    if l.kind == "squeeze-excite":
        d["squeeze"] = _layer_to_doc(l.se_squeeze, out, tag + "_sq")
        d["excite"] = _layer_to_doc(l.se_excite, out, tag + "_ex")
    if l.quant is not None:
        d["quant"] = l.quant.to_doc()
    return d


def _layer_from_doc(d: dict, root: Path) -> LayerDescriptor:
    try:
        l = LayerDescriptor(
            kind=d["kind"], N=int(d.get("N", 0)), M=int(d.get("M", 0)),
            K=int(d.get("K", 1)), stride=int(d.get("stride", 1)),
            G=int(d.get("G", 1)), bw=d.get("bw"))
    except KeyError as e:
        raise ManifestError(f"layer entry missing field {e}") from e
    if "weights" in d:
        kind = d.get("weights_kind", "float32")
        shape = l.weight_shape()
        data = _read_blob(root, d["weights"], _ELEMENT_DTYPES[kind],
                          int(np.prod(shape)))
        l.weights = TensorBuffer(shape, kind, data,
                                 bw=8 if kind == "uint8" else 32)
    if "bias" in d:
        bkind = d.get("bias_kind", "float32")
        l.bias = _read_blob(root, d["bias"], _ELEMENT_DTYPES[bkind], l.M)
    if "bn" in d:
        packed = _read_blob(root, d["bn"], "<f4", 4 * l.M).reshape(4, l.M)
        l.bn = BatchNormParams(*packed, eps=float(d.get("bn_eps", 1e-5)))
    if d["kind"] == "squeeze-excite":
        l.se_squeeze = _layer_from_doc(d["squeeze"], root)
        l.se_excite = _layer_from_doc(d["excite"], root)
    if d.get("quant") is not None:
        from .quantize import LayerQuant
        l.quant = LayerQuant.from_doc(d["quant"])
    try:
        l.validate()
    except GraphError as e:
        raise ManifestError(str(e)) from e
    return l
