import numpy as np
import pytest

from qsep import quantize as Q
from qsep import zoo
from qsep.kernels.reference import make_calibration_inputs


def quantize_graph(g, samples=4, bw=4, seed=7):
    fused = Q.fuse_graph_bn(g)
    data = make_calibration_inputs(fused, samples, seed=seed)
    stats = Q.calibrate(fused, data)
    return Q.fuse_activation(fused, stats, bw=bw), data


@pytest.fixture(scope="session")
def toy_qnet():
    g = zoo.build_toy(seed=1, with_se=True, resolution=16)
    qnet, data = quantize_graph(g)
    return qnet, data


@pytest.fixture(scope="session")
def toy_qnet_plain():
    g = zoo.build_toy(seed=2, resolution=16)
    qnet, data = quantize_graph(g)
    return qnet, data


@pytest.fixture(scope="session")
def mnv2_small_qnet():
    """Half-width model at the smallest published resolution."""
    g = zoo.build_mobilenet_v2(alpha=0.5, resolution=96, seed=11,
                               num_classes=100)
    qnet, data = quantize_graph(g, samples=2)
    return qnet, data


@pytest.fixture(scope="session")
def effnet_qnet():
    g = zoo.build_efficientnet_compressed(resolution=128, seed=13)
    qnet, data = quantize_graph(g, samples=2)
    return qnet, data
