"""Quantizing compiler and bit-exact simulator for separable CNNs."""

__version__ = "0.1.0"

from .ir import (Block, LayerDescriptor, NetworkGraph, TensorBuffer,
                 load_model, save_model, count_ops, count_params_mbits,
                 network_complexity)
from .quantize import (QNetModel, QuantSpec, calibrate, fuse_activation,
                       fuse_graph_bn)

__all__ = [
    "Block", "LayerDescriptor", "NetworkGraph", "TensorBuffer",
    "load_model", "save_model", "count_ops", "count_params_mbits",
    "network_complexity", "QNetModel", "QuantSpec", "calibrate",
    "fuse_activation", "fuse_graph_bn",
]
