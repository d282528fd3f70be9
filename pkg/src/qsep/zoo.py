"""Built-in architectures with deterministic synthetic parameters.

Builders emit float graphs (conv + separate batch-norm + relu6 layers);
run fuse_graph_bn before calibration. Weight tensors are seeded random
draws so every pipeline stage is reproducible without shipping trained
checkpoints; the layer topology and channel schedules are the real ones.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import GraphError
from .ir import (BatchNormParams, Block, LayerDescriptor, NetworkGraph,
                 TensorBuffer, make_divisible)

# (expand_ratio, out_channels, repeats, first_stride)
MOBILENET_V2_CONFIG = [
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]
MOBILENET_V2_TAIL = 1280

# (expand_ratio, out_channels, repeats, first_stride, kernel)
EFFNET_COMPRESSED_CONFIG = [
    (3, 32, 2, 2, 3),
    (3, 48, 2, 2, 5),
    (3, 64, 3, 2, 3),
    (3, 96, 2, 1, 5),
]
EFFNET_COMPRESSED_TAIL = 256


def _conv(kind: str, n: int, m: int, k: int = 1, stride: int = 1,
          g: int = 1, rng=None, bias: bool = False) -> LayerDescriptor:
    l = LayerDescriptor(kind, N=n, M=m, K=k, stride=stride, G=g)
    if rng is not None:
        fan_in = (n // g) * k * k
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=l.weight_shape())
        l.weights = TensorBuffer.from_array(w.astype(np.float32))
        if bias:
            l.bias = rng.uniform(-0.1, 0.1, size=m).astype(np.float32)
    return l


def _bn(m: int, rng=None) -> LayerDescriptor:
    l = LayerDescriptor("batch-norm", N=m, M=m)
    if rng is not None:
        l.bn = BatchNormParams(
            gamma=rng.uniform(0.5, 1.5, m).astype(np.float32),
            beta=rng.uniform(-0.2, 0.2, m).astype(np.float32),
            mean=rng.uniform(-0.2, 0.2, m).astype(np.float32),
            var=rng.uniform(0.5, 1.5, m).astype(np.float32))
    return l


def _relu6() -> LayerDescriptor:
    return LayerDescriptor("relu6")


def _se(channels: int, rng=None) -> LayerDescriptor:
    squeeze = max(8, make_divisible(channels // 4))
    sq = _conv("pointwise-conv", channels, squeeze, rng=rng, bias=True)
    ex = _conv("pointwise-conv", squeeze, channels, rng=rng, bias=True)
    return LayerDescriptor("squeeze-excite", N=channels, M=channels,
                           se_squeeze=sq, se_excite=ex)


def build_mobilenet_v2(alpha: float = 1.0, resolution: int = 224,
                       seed: int = 0, num_classes: int = 1000,
                       with_weights: bool = True) -> NetworkGraph:
    """Inverted-residual separable network, width-scaled at build time.

    Channel counts under the width multiplier round to the nearest multiple
    of 8 (make_divisible); the tail width stays at 1280 for alpha <= 1.
    """
    if not 0 < alpha <= 1:
        raise GraphError(f"alpha must be in (0, 1], got {alpha}")
    rng = np.random.default_rng(seed) if with_weights else None

    def c(ch):
        return make_divisible(ch * alpha) if alpha != 1.0 else ch

    blocks = []
    stem = c(32)
    blocks.append(Block([_conv("normal-conv", 3, stem, 3, 2, rng=rng),
                         _bn(stem, rng), _relu6()]))
    # first bottleneck has no expansion
    first = c(16)
    blocks.append(Block([
        _conv("depthwise-conv", stem, stem, 3, 1, g=stem, rng=rng),
        _bn(stem, rng), _relu6(),
        _conv("pointwise-conv", stem, first, rng=rng), _bn(first, rng),
    ]))
    cin = first
    for t, ch, reps, first_stride in MOBILENET_V2_CONFIG:
        cout = c(ch)
        for r in range(reps):
            stride = first_stride if r == 0 else 1
            exp = cin * t
            residual = stride == 1 and cin == cout
            blocks.append(Block([
                _conv("pointwise-conv", cin, exp, rng=rng),
                _bn(exp, rng), _relu6(),
                _conv("depthwise-conv", exp, exp, 3, stride, g=exp, rng=rng),
                _bn(exp, rng), _relu6(),
                _conv("pointwise-conv", exp, cout, rng=rng), _bn(cout, rng),
            ], residual=residual, expand_ratio=float(t)))
            cin = cout
    tail = MOBILENET_V2_TAIL
    blocks.append(Block([_conv("pointwise-conv", cin, tail, rng=rng),
                         _bn(tail, rng), _relu6()]))
    blocks.append(Block([LayerDescriptor("avg-pool")]))
    blocks.append(Block([_conv("dense", tail, num_classes, rng=rng,
                               bias=True)]))
    g = NetworkGraph(blocks, arch_name="mobilenet-v2", alpha=alpha,
                     input_resolution=resolution)
    g.validate()
    return g


def build_efficientnet_compressed(resolution: int = 128, seed: int = 0,
                                  with_weights: bool = True) -> NetworkGraph:
    """Compressed squeeze-excite variant: narrow stem, nine isomorphic
    bottlenecks, convolutional tail, no classifier head."""
    rng = np.random.default_rng(seed) if with_weights else None
    blocks = []
    stem = 16
    blocks.append(Block([_conv("normal-conv", 3, stem, 3, 2, rng=rng),
                         _bn(stem, rng), _relu6()]))
    # expansion-free opening bottleneck (distinct shape from the main run)
    first = 24
    blocks.append(Block([
        _conv("depthwise-conv", stem, stem, 3, 1, g=stem, rng=rng),
        _bn(stem, rng), _relu6(),
        _se(stem, rng),
        _conv("pointwise-conv", stem, first, rng=rng), _bn(first, rng),
    ]))
    cin = first
    for t, cout, reps, first_stride, k in EFFNET_COMPRESSED_CONFIG:
        for r in range(reps):
            stride = first_stride if r == 0 else 1
            exp = cin * t
            residual = stride == 1 and cin == cout
            blocks.append(Block([
                _conv("pointwise-conv", cin, exp, rng=rng),
                _bn(exp, rng), _relu6(),
                _conv("depthwise-conv", exp, exp, k, stride, g=exp, rng=rng),
                _bn(exp, rng), _relu6(),
                _se(exp, rng),
                _conv("pointwise-conv", exp, cout, rng=rng), _bn(cout, rng),
            ], residual=residual, expand_ratio=float(t)))
            cin = cout
    blocks.append(Block([_conv("pointwise-conv", cin, EFFNET_COMPRESSED_TAIL,
                               rng=rng),
                         _bn(EFFNET_COMPRESSED_TAIL, rng), _relu6()]))
    blocks.append(Block([LayerDescriptor("avg-pool")]))
    g = NetworkGraph(blocks, arch_name="efficientnet-compressed",
                     input_resolution=resolution)
    g.validate()
    return g


def build_toy(seed: int = 0, resolution: int = 16, num_classes: int = 4,
              with_se: bool = False, body_blocks: int = 2) -> NetworkGraph:
    """Small end-to-end fixture: stem, residual bottlenecks, tail, head."""
    rng = np.random.default_rng(seed)
    blocks = [Block([_conv("normal-conv", 3, 8, 3, 2, rng=rng),
                     _bn(8, rng), _relu6()])]
    for _ in range(body_blocks):
        layers = [
            _conv("pointwise-conv", 8, 16, rng=rng), _bn(16, rng), _relu6(),
            _conv("depthwise-conv", 16, 16, 3, 1, g=16, rng=rng),
            _bn(16, rng), _relu6(),
        ]
        if with_se:
            layers.append(_se(16, rng))
        layers += [_conv("pointwise-conv", 16, 8, rng=rng), _bn(8, rng)]
        blocks.append(Block(layers, residual=True, expand_ratio=2.0))
    blocks.append(Block([_conv("pointwise-conv", 8, 16, rng=rng),
                         _bn(16, rng), _relu6()]))
    blocks.append(Block([LayerDescriptor("avg-pool")]))
    blocks.append(Block([_conv("dense", 16, num_classes, rng=rng, bias=True)]))
    g = NetworkGraph(blocks, arch_name="toy", input_resolution=resolution)
    g.validate()
    return g


ARCH_BUILDERS = {
    "mobilenet-v2": build_mobilenet_v2,
    "efficientnet-compressed": build_efficientnet_compressed,
    "toy": build_toy,
}


def build_arch(name: str, **kwargs) -> NetworkGraph:
    if name not in ARCH_BUILDERS:
        raise GraphError(f"unknown architecture {name!r}; "
                         f"choices: {sorted(ARCH_BUILDERS)}")
    return ARCH_BUILDERS[name](**kwargs)
