import matplotlib
import numpy as np
import pytest

from archdoor.architectures import build_alexnet_small
from archdoor.datasets import make_synthetic
from archdoor.detector import DetectorConfig
from archdoor.graph import GraphBuilder, ensure_valid

matplotlib.use("Agg")

TINY_WIDTH = 0.0625


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_alexnet():
    return build_alexnet_small(4, (3, 32, 32), width=TINY_WIDTH)


@pytest.fixture
def robust_cfg():
    return DetectorConfig(alpha=10, beta=1.0, delta=1.0, window=3, mode="robust")


@pytest.fixture
def naive_cfg():
    return DetectorConfig(alpha=10, beta=1.0, delta=1.0, window=3, mode="naive")


@pytest.fixture
def small_data():
    train_set = make_synthetic(4, 48, seed=0, split="train")
    test_set = make_synthetic(4, 24, seed=99, split="test")
    return train_set, test_set


@pytest.fixture
def pooled_graph():
    """conv -> relu -> adaptive avg pool -> dense on 3x8x8 inputs."""
    builder = GraphBuilder("pooled", (3, 8, 8))
    x = builder.add(
        "conv2d", [builder.input_id], node_id="conv", in_channels=3, out_channels=4, kernel=3
    )
    x = builder.add("relu", [x], node_id="relu")
    x = builder.add("adaptive-avg-pool", [x], node_id="avgpool", out=[2, 2])
    x = builder.add("flatten", [x], node_id="flatten")
    x = builder.add("dense", [x], node_id="fc", in_features=16, out_features=3)
    return ensure_valid(builder.build(x))
